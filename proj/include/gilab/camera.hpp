#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gilab/common.hpp"
#include "gilab/tensor.hpp"

namespace gilab {

// Pinhole camera. R, t are world-to-camera; the camera looks down +z and the
// image y axis points down. Pixels are sampled at half-integer centers
// (u + 0.5, v + 0.5).
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  int width = 0, height = 0;

  Eigen::Vector3d center() const { return -R.transpose() * t; }
  Eigen::Vector3d optical_axis() const { return R.row(2).transpose(); }

  void validate(double tol = 1e-6) const {
    require(width > 0 && height > 0, "camera: non-positive image size");
    require(fx > 0 && fy > 0, "camera: non-positive focal length");
    require(cx > 0 && cx < width && cy > 0 && cy < height,
            "camera: principal point (", cx, ",", cy, ") outside image");
    const Eigen::Matrix3d rrt = R * R.transpose();
    require((rrt - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < tol,
            "camera: rotation not orthonormal");
    require(std::abs(R.determinant() - 1.0) < tol, "camera: rotation determinant != +1");
  }

  // World-to-camera rotation from eye/target with world up (0,0,1),
  // y-down image convention.
  static Camera look_at(const Eigen::Vector3d &eye, const Eigen::Vector3d &target,
                        double focal, double pcx, double pcy, int w, int h) {
    const Eigen::Vector3d up(0, 0, 1);
    const Eigen::Vector3d z = (target - eye).normalized();
    Eigen::Vector3d x = z.cross(up);
    require(x.norm() > 1e-9, "look_at: view direction parallel to world up");
    x.normalize();
    const Eigen::Vector3d y = z.cross(x);
    Camera cam;
    cam.R.row(0) = x;
    cam.R.row(1) = y;
    cam.R.row(2) = z;
    cam.t = -cam.R * eye;
    cam.fx = cam.fy = focal;
    cam.cx = pcx;
    cam.cy = pcy;
    cam.width = w;
    cam.height = h;
    return cam;
  }
};

// Per-pixel Plücker coordinates: channels 0-2 unit world-space direction d,
// channels 3-5 moment m = o x d for camera center o.
inline Tensor<double> plucker_rays(const Camera &cam) {
  cam.validate();
  Tensor<double> rays({cam.height, cam.width, 6});
  const Eigen::Matrix3d rt = cam.R.transpose();
  const Eigen::Vector3d o = cam.center();
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      const Eigen::Vector3d dir_cam((u + 0.5 - cam.cx) / cam.fx,
                                    (v + 0.5 - cam.cy) / cam.fy, 1.0);
      const Eigen::Vector3d d = (rt * dir_cam).normalized();
      const Eigen::Vector3d m = o.cross(d);
      for (int k = 0; k < 3; ++k) {
        rays.at(v, u, k) = d[k];
        rays.at(v, u, 3 + k) = m[k];
      }
    }
  return rays;
}

struct NormalizeResult {
  std::vector<Camera> cameras;
  double scale = 1.0;              // max L-inf deviation of centers from mean
  Eigen::Vector3d mean_center = Eigen::Vector3d::Zero();
};

// Recenter camera positions on their mean and scale by the maximum L-inf
// deviation so every center lands in [-1,1]^3. Rotations are unchanged.
inline NormalizeResult normalize_cameras(std::span<const Camera> cams) {
  require(!cams.empty(), "normalize_cameras: no cameras");
  NormalizeResult out;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const Camera &c : cams)
    mean += c.center();
  mean /= double(cams.size());
  double s = 0.0;
  for (const Camera &c : cams)
    s = std::max(s, (c.center() - mean).cwiseAbs().maxCoeff());
  if (s == 0.0)
    s = 1.0;
  out.scale = s;
  out.mean_center = mean;
  out.cameras.reserve(cams.size());
  for (const Camera &c : cams) {
    Camera nc = c;
    const Eigen::Vector3d nc_center = (c.center() - mean) / s;
    nc.t = -nc.R * nc_center;
    out.cameras.push_back(nc);
  }
  return out;
}

// Map a point / depth from the original world into the normalized one.
inline Eigen::Vector3d normalize_point(const Eigen::Vector3d &p, const NormalizeResult &n) {
  return (p - n.mean_center) / n.scale;
}

// Quartile input frames: floor((n-1) * k / 3) for k = 0..3.
inline std::array<int, 4> select_input_views(int n_frames) {
  require(n_frames >= 5, "select_input_views: need at least 5 frames, got ", n_frames,
          " (no supervision frames would remain)");
  std::array<int, 4> out{};
  for (int k = 0; k < 4; ++k)
    out[std::size_t(k)] = int((std::int64_t(n_frames) - 1) * k / 3);
  return out;
}

struct ValidationViews {
  int reference = -1;
  std::array<int, 3> inputs{};
};

namespace detail {
inline double triangle_area(const Eigen::Vector3d &a, const Eigen::Vector3d &b,
                            const Eigen::Vector3d &c) {
  return 0.5 * ((b - a).cross(c - a)).norm();
}
} // namespace detail

// Reference view closest to the mean camera position, plus the three other
// views spanning the largest triangle. Exhaustive for up to 30 candidates,
// greedy farthest-point beyond that. Lowest-index tie-breaks throughout.
inline ValidationViews select_validation_views(std::span<const Camera> cams) {
  require(cams.size() >= 4, "select_validation_views: need at least 4 cameras, got ",
          cams.size());
  std::vector<Eigen::Vector3d> centers;
  centers.reserve(cams.size());
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const Camera &c : cams) {
    centers.push_back(c.center());
    mean += centers.back();
  }
  mean /= double(cams.size());

  ValidationViews out;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < int(cams.size()); ++i) {
    const double d = (centers[std::size_t(i)] - mean).norm();
    if (d < best) {
      best = d;
      out.reference = i;
    }
  }

  std::vector<int> cand;
  for (int i = 0; i < int(cams.size()); ++i)
    if (i != out.reference)
      cand.push_back(i);

  if (cand.size() <= 30) {
    double best_area = -1.0;
    for (std::size_t a = 0; a < cand.size(); ++a)
      for (std::size_t b = a + 1; b < cand.size(); ++b)
        for (std::size_t c = b + 1; c < cand.size(); ++c) {
          const double area =
              detail::triangle_area(centers[std::size_t(cand[a])],
                                    centers[std::size_t(cand[b])],
                                    centers[std::size_t(cand[c])]);
          if (area > best_area + 1e-15) {
            best_area = area;
            out.inputs = {cand[a], cand[b], cand[c]};
          }
        }
  } else {
    // Greedy: farthest from reference, farthest from that, then max area.
    auto argmax = [&](auto &&score) {
      int bi = -1;
      double bs = -std::numeric_limits<double>::infinity();
      for (int i : cand) {
        const double s = score(i);
        if (s > bs + 1e-15) {
          bs = s;
          bi = i;
        }
      }
      return bi;
    };
    const Eigen::Vector3d ref_c = centers[std::size_t(out.reference)];
    const int p0 = argmax([&](int i) { return (centers[std::size_t(i)] - ref_c).norm(); });
    const int p1 = argmax([&](int i) {
      return i == p0 ? -1.0 : (centers[std::size_t(i)] - centers[std::size_t(p0)]).norm();
    });
    const int p2 = argmax([&](int i) {
      if (i == p0 || i == p1)
        return -1.0;
      return detail::triangle_area(centers[std::size_t(p0)], centers[std::size_t(p1)],
                                   centers[std::size_t(i)]);
    });
    out.inputs = {p0, p1, p2};
    std::sort(out.inputs.begin(), out.inputs.end());
  }
  return out;
}

} // namespace gilab
