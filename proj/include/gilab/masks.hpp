#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "gilab/camera.hpp"
#include "gilab/common.hpp"
#include "gilab/tensor.hpp"

namespace gilab {

using Mask = Tensor<std::uint8_t>; // HxW, 1 = masked

enum class MaskType { object, geometric, random };

inline const char *mask_type_name(MaskType t) {
  switch (t) {
  case MaskType::object: return "object";
  case MaskType::geometric: return "geometric";
  default: return "random";
  }
}

// Masks for the four input views. The reference view's mask is empty by
// construction; the reference image is never corrupted.
struct MaskSet {
  std::array<Mask, 4> masks;
  MaskType mask_type = MaskType::random;
  int reference_index = 0;
};

inline std::int64_t mask_area(const Mask &m) {
  std::int64_t n = 0;
  for (auto v : m.data)
    n += v ? 1 : 0;
  return n;
}

inline double mask_fraction(const Mask &m) {
  return m.size() ? double(mask_area(m)) / double(m.size()) : 0.0;
}

struct MaskPlan {
  MaskType mask_type;
  int count; // 1..4 regions
};

// Mask type with probabilities {object 0.25, geometric 0.25, random 0.50},
// region count uniform on {1,2,3,4}.
inline MaskPlan sample_mask_plan(Rng &rng) {
  const double u = rng.uniform();
  MaskType t = MaskType::random;
  if (u < 0.25)
    t = MaskType::object;
  else if (u < 0.5)
    t = MaskType::geometric;
  return {t, int(rng.uniform_int(1, 4))};
}

inline MaskPlan sample_mask_plan(std::uint64_t seed) {
  Rng rng(seed);
  return sample_mask_plan(rng);
}

// Union of `count` axis-aligned rectangles with integer edge lengths drawn
// uniformly from [size/6, size/4] (floored bounds), fully inside the image.
inline Mask gen_rect_union(Rng &rng, int size, int count) {
  require(size >= 24, "random masks need size >= 24, got ", size);
  Mask m({size, size});
  const int lo = size / 6, hi = size / 4;
  for (int i = 0; i < count; ++i) {
    const int w = int(rng.uniform_int(lo, hi));
    const int h = int(rng.uniform_int(lo, hi));
    const int x0 = int(rng.uniform_int(0, size - w));
    const int y0 = int(rng.uniform_int(0, size - h));
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x)
        m.at(y, x) = 1;
  }
  return m;
}

// The same rectangle union replicated on every non-reference view.
inline MaskSet gen_random_masks(std::uint64_t seed, int size, int count,
                                int reference_index = 0) {
  require(reference_index >= 0 && reference_index < 4, "reference index ", reference_index,
          " out of range");
  Rng rng(seed);
  Mask shared = count > 0 ? gen_rect_union(rng, size, count) : Mask({size, size});
  MaskSet out;
  out.mask_type = MaskType::random;
  out.reference_index = reference_index;
  for (int v = 0; v < 4; ++v)
    out.masks[std::size_t(v)] = (v == reference_index) ? Mask({size, size}) : shared;
  return out;
}

// Union of `count` axis-aligned ellipses. Semi-axis ranges follow the mask
// count: [size/8, size/6] for 1-2 regions, [size/12, size/8] for 3-4.
// Boundary pixels are included (<= comparison).
inline Mask sample_ref_ellipses(std::uint64_t seed, int size, int count) {
  require(size >= 24, "ellipse masks need size >= 24, got ", size);
  Rng rng(seed);
  const int lo = count <= 2 ? size / 8 : size / 12;
  const int hi = count <= 2 ? size / 6 : size / 8;
  Mask m({size, size});
  for (int i = 0; i < count; ++i) {
    const int a = int(rng.uniform_int(lo, hi));
    const int b = int(rng.uniform_int(lo, hi));
    const int cx = int(rng.uniform_int(a, size - 1 - a));
    const int cy = int(rng.uniform_int(b, size - 1 - b));
    for (int y = cy - b; y <= cy + b; ++y)
      for (int x = cx - a; x <= cx + a; ++x) {
        const double ex = double(x - cx) / a, ey = double(y - cy) / b;
        if (ex * ex + ey * ey <= 1.0)
          m.at(y, x) = 1;
      }
  }
  return m;
}

inline Mask dilate(const Mask &m, int radius) {
  const std::int64_t h = m.shape[0], w = m.shape[1];
  Mask out({h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (!m.at(y, x))
        continue;
      for (std::int64_t dy = -radius; dy <= radius; ++dy)
        for (std::int64_t dx = -radius; dx <= radius; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w)
            out.at(yy, xx) = 1;
        }
    }
  return out;
}

// Erosion over the in-bounds part of the window, so closing stays extensive
// at the image border.
inline Mask erode(const Mask &m, int radius) {
  const std::int64_t h = m.shape[0], w = m.shape[1];
  Mask out({h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      bool all = true;
      for (std::int64_t dy = -radius; dy <= radius && all; ++dy)
        for (std::int64_t dx = -radius; dx <= radius && all; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && !m.at(yy, xx))
            all = false;
        }
      out.at(y, x) = all ? 1 : 0;
    }
  return out;
}

// 5x5 square closing (dilate then erode).
inline Mask morph_close(const Mask &m, int radius = 2) { return erode(dilate(m, radius), radius); }

// Unproject masked reference pixels with the reference depth map, reproject
// into the target camera, and mark the landing pixels (nearest integer).
// Pixels behind the target camera or out of bounds are dropped. No closing.
inline Mask warp_mask(const Mask &ref_mask, const Tensor<float> &depth_ref,
                      const Camera &ref_cam, const Camera &target_cam) {
  const std::int64_t h = ref_mask.shape[0], w = ref_mask.shape[1];
  require(depth_ref.shape == ref_mask.shape, "warp_mask: depth shape ",
          shape_str(depth_ref.shape), " does not match mask ", shape_str(ref_mask.shape));
  Mask out({target_cam.height, target_cam.width});
  const Eigen::Matrix3d ref_rt = ref_cam.R.transpose();
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      if (!ref_mask.at(v, u))
        continue;
      const double d = double(depth_ref.at(v, u));
      require(d > 0, "warp_mask: non-positive depth ", d, " at masked pixel (", u, ",", v,
              ")");
      const Eigen::Vector3d cam_pt(d * (double(u) + 0.5 - ref_cam.cx) / ref_cam.fx,
                                   d * (double(v) + 0.5 - ref_cam.cy) / ref_cam.fy, d);
      const Eigen::Vector3d world = ref_rt * (cam_pt - ref_cam.t);
      const Eigen::Vector3d q = target_cam.R * world + target_cam.t;
      if (q.z() <= 0)
        continue;
      const double uu = target_cam.fx * q.x() / q.z() + target_cam.cx;
      const double vv = target_cam.fy * q.y() / q.z() + target_cam.cy;
      const std::int64_t px = std::llround(uu - 0.5);
      const std::int64_t py = std::llround(vv - 0.5);
      if (px >= 0 && px < target_cam.width && py >= 0 && py < target_cam.height)
        out.at(py, px) = 1;
    }
  return out;
}

// Multi-view-consistent masks: the reference-view mask is carried into each
// inpaint view by depth warping, then closed with a 5x5 element. The
// reference entry of the result stays empty.
inline MaskSet gen_geometric_masks(const Mask &ref_mask, const Tensor<float> &depth_ref,
                                   const std::array<Camera, 4> &cameras, int ref_index) {
  require(ref_index >= 0 && ref_index < 4, "gen_geometric_masks: reference index ",
          ref_index, " out of range");
  for (std::int64_t i = 0; i < depth_ref.size(); ++i)
    require(depth_ref[i] > 0, "gen_geometric_masks: non-positive depth at index ", i);
  MaskSet out;
  out.mask_type = MaskType::geometric;
  out.reference_index = ref_index;
  for (int v = 0; v < 4; ++v) {
    if (v == ref_index) {
      out.masks[std::size_t(v)] =
          Mask({cameras[std::size_t(v)].height, cameras[std::size_t(v)].width});
      continue;
    }
    out.masks[std::size_t(v)] = morph_close(
        warp_mask(ref_mask, depth_ref, cameras[std::size_t(ref_index)],
                  cameras[std::size_t(v)]));
  }
  return out;
}

struct ObjectFilterParams {
  double min_area = 0.005;
  double max_area = 0.5;
  double border_margin = 0.02; // fraction of each image dimension
  double iou_threshold = 0.5;
};

inline double mask_iou(const Mask &a, const Mask &b) {
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// Per-frame keep flags for one instance track. A track is discarded outright
// when its first frame is too large, too small, or hugs the border; it is
// truncated at the first frame whose IoU with the previous one drops below
// the threshold.
inline std::vector<bool> filter_object_masks(const std::vector<Mask> &track,
                                             const ObjectFilterParams &params = {}) {
  require(track.size() >= 2, "filter_object_masks: need at least 2 frames, got ",
          track.size());
  std::vector<bool> keep(track.size(), false);
  const Mask &first = track[0];
  const double frac = mask_fraction(first);
  if (frac > params.max_area || frac < params.min_area)
    return keep;

  const std::int64_t h = first.shape[0], w = first.shape[1];
  std::int64_t min_x = w, max_x = -1, min_y = h, max_y = -1;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (first.at(y, x)) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
  const std::int64_t margin_x = std::llround(params.border_margin * double(w));
  const std::int64_t margin_y = std::llround(params.border_margin * double(h));
  if (min_x < margin_x || min_y < margin_y || max_x >= w - margin_x ||
      max_y >= h - margin_y)
    return keep;

  keep[0] = true;
  for (std::size_t t = 1; t < track.size(); ++t) {
    if (!keep[t - 1])
      break;
    keep[t] = mask_iou(track[t], track[t - 1]) >= params.iou_threshold;
  }
  return keep;
}

// Gray out the masked pixels.
inline Tensor<float> apply_mask(const Tensor<float> &image, const Mask &mask) {
  require(image.rank() == 3 && image.shape[0] == mask.shape[0] &&
              image.shape[1] == mask.shape[1],
          "apply_mask: image ", shape_str(image.shape), " does not match mask ",
          shape_str(mask.shape));
  Tensor<float> out = image;
  const std::int64_t c = image.shape[2];
  for (std::int64_t i = 0; i < mask.size(); ++i)
    if (mask[i])
      for (std::int64_t k = 0; k < c; ++k)
        out[i * c + k] = 0.5f;
  return out;
}

} // namespace gilab
