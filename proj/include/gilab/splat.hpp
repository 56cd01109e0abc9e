#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <thread>
#include <type_traits>
#include <vector>

#include "gilab/autodiff.hpp"
#include "gilab/camera.hpp"
#include "gilab/tensor.hpp"

namespace gilab {

// World-space anisotropic Gaussian. Covariance is R(q) diag(scale^2) R(q)^T.
struct Gaussian3D {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d scale = Eigen::Vector3d::Constant(0.01);
  Eigen::Vector4d rotation = Eigen::Vector4d(1, 0, 0, 0); // (w,x,y,z)
  double opacity = 0.5;
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
  int instance_id = 0;
};

struct RenderOptions {
  double near_clip = 0.01;        // view-space z cull plane
  double far = 4.0;               // background depth
  double transmittance_cutoff = 1e-4;
  int tile_size = 16;
  int threads = 1;
  bool naive = false;             // full per-pixel loop instead of tiles
  bool want_instance = false;
};

template <typename T> struct RenderOutput {
  Tensor<T> rgb;                  // HxWx3
  Tensor<T> depth;                // HxW, expected depth, background = far
  Tensor<T> alpha;                // HxW accumulated opacity
  Tensor<std::int32_t> instance;  // HxW argmax-contribution ids, -1 = none
  std::int64_t near_culled = 0;
};

// Non-owning flat view; layouts match Tensor rows (N,3) (N,3) (N,4) (N) (N,3).
template <typename T> struct GaussianView {
  std::int64_t n = 0;
  const T *pos = nullptr;
  const T *scale = nullptr;
  const T *quat = nullptr;
  const T *opacity = nullptr;
  const T *color = nullptr;
  const std::int32_t *instance = nullptr; // optional
};

template <typename T> struct GaussianGrads {
  std::vector<T> pos, scale, quat, opacity, color;
  explicit GaussianGrads(std::int64_t n = 0)
      : pos(std::size_t(3 * n), T(0)), scale(std::size_t(3 * n), T(0)),
        quat(std::size_t(4 * n), T(0)), opacity(std::size_t(n), T(0)),
        color(std::size_t(3 * n), T(0)) {}
};

namespace splat_detail {

template <typename T> struct CamT {
  T fx, fy, cx, cy;
  T r[9]; // row-major world-to-camera rotation
  T t[3];
  int width, height;
};

template <typename T> CamT<T> cast_camera(const Camera &cam) {
  CamT<T> out;
  out.fx = T(cam.fx);
  out.fy = T(cam.fy);
  out.cx = T(cam.cx);
  out.cy = T(cam.cy);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      out.r[i * 3 + j] = T(cam.R(i, j));
  for (int i = 0; i < 3; ++i)
    out.t[i] = T(cam.t[i]);
  out.width = cam.width;
  out.height = cam.height;
  return out;
}

// Rotation matrix from a quaternion, used as-is (callers pass unit values;
// the formula stays a well-defined smooth function for non-unit input, which
// keeps finite differences meaningful).
template <typename T> void quat_to_rot(const T *q, T *r) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  r[0] = T(1) - T(2) * (y * y + z * z);
  r[1] = T(2) * (x * y - w * z);
  r[2] = T(2) * (x * z + w * y);
  r[3] = T(2) * (x * y + w * z);
  r[4] = T(1) - T(2) * (x * x + z * z);
  r[5] = T(2) * (y * z - w * x);
  r[6] = T(2) * (x * z - w * y);
  r[7] = T(2) * (y * z + w * x);
  r[8] = T(1) - T(2) * (x * x + y * y);
}

template <typename T> struct Splat {
  bool valid = false;
  T mean[2] = {0, 0};
  T cov[3] = {0, 0, 0};   // (xx, xy, yy), includes the 0.3 dilation
  T inv[3] = {0, 0, 0};   // inverse of cov
  T view[3] = {0, 0, 0};
  T radius = 0;           // 3 * sqrt(largest cov eigenvalue)
};

template <typename T>
Splat<T> project_splat(const GaussianView<T> &g, std::int64_t i, const CamT<T> &cam,
                       T near_clip) {
  Splat<T> s;
  const T *p = g.pos + 3 * i;
  for (int r = 0; r < 3; ++r)
    s.view[r] = cam.r[r * 3 + 0] * p[0] + cam.r[r * 3 + 1] * p[1] +
                cam.r[r * 3 + 2] * p[2] + cam.t[r];
  if (!(s.view[2] > near_clip))
    return s;
  const T vx = s.view[0], vy = s.view[1], vz = s.view[2];
  s.mean[0] = cam.fx * vx / vz + cam.cx;
  s.mean[1] = cam.fy * vy / vz + cam.cy;

  T rq[9];
  quat_to_rot(g.quat + 4 * i, rq);
  const T *sc = g.scale + 3 * i;
  // Sigma = M M^T with M = R(q) diag(scale)
  T m[9];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      m[r * 3 + c] = rq[r * 3 + c] * sc[c];
  T sigma[9];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      sigma[r * 3 + c] =
          m[r * 3] * m[c * 3] + m[r * 3 + 1] * m[c * 3 + 1] + m[r * 3 + 2] * m[c * 3 + 2];

  // Rows of Tm = J R, with J the projection Jacobian at the mean.
  const T j00 = cam.fx / vz, j02 = -cam.fx * vx / (vz * vz);
  const T j11 = cam.fy / vz, j12 = -cam.fy * vy / (vz * vz);
  T t0[3], t1[3];
  for (int c = 0; c < 3; ++c) {
    t0[c] = j00 * cam.r[c] + j02 * cam.r[6 + c];
    t1[c] = j11 * cam.r[3 + c] + j12 * cam.r[6 + c];
  }
  auto quad = [&](const T *a, const T *b) {
    T out = T(0);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        out += a[r] * sigma[r * 3 + c] * b[c];
    return out;
  };
  s.cov[0] = quad(t0, t0) + T(0.3);
  s.cov[1] = quad(t0, t1);
  s.cov[2] = quad(t1, t1) + T(0.3);

  const T det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
  s.inv[0] = s.cov[2] / det;
  s.inv[1] = -s.cov[1] / det;
  s.inv[2] = s.cov[0] / det;

  const T mid = (s.cov[0] + s.cov[2]) / T(2);
  const T disc = std::sqrt(std::max(T(0), mid * mid - det));
  s.radius = T(3) * std::sqrt(mid + disc);
  s.valid = true;
  return s;
}

template <typename T> struct Contributor {
  std::int32_t index; // gaussian index
  T alpha;
};

template <typename T> struct ForwardCache {
  CamT<T> cam;
  RenderOptions opts;
  std::vector<Splat<T>> splats;          // input order
  std::vector<std::int32_t> order;       // valid splats sorted by depth
  std::vector<std::vector<Contributor<T>>> contribs; // per pixel, compositing order
};

// Flat per-candidate record, staged contiguously so the hot pixel loop
// streams through memory instead of chasing splat indices.
template <typename T> struct CandidateSplat {
  T mean[2];
  T inv[3];
  T depth;
  T opacity;
  T color[3];
  std::int32_t index;
};

template <typename T>
CandidateSplat<T> make_candidate(const GaussianView<T> &g, const Splat<T> &s,
                                 std::int32_t idx) {
  CandidateSplat<T> c;
  c.mean[0] = s.mean[0];
  c.mean[1] = s.mean[1];
  c.inv[0] = s.inv[0];
  c.inv[1] = s.inv[1];
  c.inv[2] = s.inv[2];
  c.depth = s.view[2];
  c.opacity = g.opacity[idx];
  c.color[0] = g.color[3 * idx];
  c.color[1] = g.color[3 * idx + 1];
  c.color[2] = g.color[3 * idx + 2];
  c.index = idx;
  return c;
}

// Composite one pixel given a candidate list in global depth order.
// Candidates outside the 3-sigma Mahalanobis ellipse contribute nothing, so
// any superset of candidates yields bit-identical results.
template <typename T>
inline void composite_pixel(const CandidateSplat<T> *cands, std::size_t n_cands, T ux,
                            T uy, T cutoff, T *rgb, T &alpha_out, T &depth_num,
                            std::vector<Contributor<T>> *record) {
  T trans = T(1);
  T wsum = T(0), dnum = T(0);
  T c0 = T(0), c1 = T(0), c2 = T(0);
  for (std::size_t k = 0; k < n_cands; ++k) {
    if (trans < cutoff)
      break;
    const CandidateSplat<T> &s = cands[k];
    const T dx = ux - s.mean[0];
    const T dy = uy - s.mean[1];
    const T m = s.inv[0] * dx * dx + T(2) * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
    if (m > T(9))
      continue;
    const T sigma = std::exp(T(-0.5) * m);
    const T alpha = s.opacity * sigma;
    const T w = alpha * trans;
    c0 += s.color[0] * w;
    c1 += s.color[1] * w;
    c2 += s.color[2] * w;
    dnum += s.depth * w;
    wsum += w;
    if (record)
      record->push_back({s.index, alpha});
    trans *= (T(1) - alpha);
  }
  rgb[0] = c0;
  rgb[1] = c1;
  rgb[2] = c2;
  alpha_out = wsum;
  depth_num = dnum;
}

} // namespace splat_detail

template <typename T> struct RenderResult {
  RenderOutput<T> output;
  splat_detail::ForwardCache<T> cache;
};

template <typename T>
RenderResult<T> render_forward(const GaussianView<T> &g, const Camera &cam,
                               const RenderOptions &opts = {}) {
  using namespace splat_detail;
  cam.validate();
  RenderResult<T> rr;
  ForwardCache<T> &cache = rr.cache;
  cache.cam = cast_camera<T>(cam);
  cache.opts = opts;
  const int w = cam.width, h = cam.height;

  RenderOutput<T> &out = rr.output;
  out.rgb = Tensor<T>({h, w, 3});
  out.depth = Tensor<T>({h, w});
  out.alpha = Tensor<T>({h, w});
  if (opts.want_instance)
    out.instance = Tensor<std::int32_t>({h, w});

  cache.splats.resize(std::size_t(g.n));
  for (std::int64_t i = 0; i < g.n; ++i) {
    cache.splats[std::size_t(i)] = project_splat(g, i, cache.cam, T(opts.near_clip));
    if (!cache.splats[std::size_t(i)].valid)
      ++out.near_culled;
  }
  for (std::int64_t i = 0; i < g.n; ++i)
    if (cache.splats[std::size_t(i)].valid)
      cache.order.push_back(std::int32_t(i));
  std::stable_sort(cache.order.begin(), cache.order.end(),
                   [&](std::int32_t a, std::int32_t b) {
                     return cache.splats[std::size_t(a)].view[2] <
                            cache.splats[std::size_t(b)].view[2];
                   });

  cache.contribs.assign(std::size_t(h) * std::size_t(w), {});

  auto run_pixel = [&](int px, int py, const CandidateSplat<T> *cands, std::size_t n) {
    const std::int64_t pix = std::int64_t(py) * w + px;
    T rgb[3], a, dnum;
    cache.contribs[std::size_t(pix)].reserve(8);
    composite_pixel(cands, n, T(px) + T(0.5), T(py) + T(0.5),
                    T(opts.transmittance_cutoff), rgb, a, dnum,
                    &cache.contribs[std::size_t(pix)]);
    out.rgb[pix * 3 + 0] = rgb[0];
    out.rgb[pix * 3 + 1] = rgb[1];
    out.rgb[pix * 3 + 2] = rgb[2];
    out.alpha[pix] = a;
    out.depth[pix] = a > T(1e-6) ? dnum / a : T(opts.far);
  };

  if (opts.naive) {
    std::vector<CandidateSplat<T>> cands;
    cands.reserve(cache.order.size());
    for (std::int32_t oi : cache.order)
      cands.push_back(make_candidate(g, cache.splats[std::size_t(oi)], oi));
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px)
        run_pixel(px, py, cands.data(), cands.size());
  } else {
    const int ts = std::max(1, opts.tile_size);
    const int ntx = (w + ts - 1) / ts, nty = (h + ts - 1) / ts;
    std::vector<std::vector<CandidateSplat<T>>> tile_cands(std::size_t(ntx) *
                                                           std::size_t(nty));
    for (std::int32_t oi : cache.order) {
      const Splat<T> &s = cache.splats[std::size_t(oi)];
      const double mx = double(s.mean[0]), my = double(s.mean[1]), r = double(s.radius);
      int tx0 = std::max(0, int(std::floor((mx - r) / ts)));
      int tx1 = std::min(ntx - 1, int(std::floor((mx + r) / ts)));
      int ty0 = std::max(0, int(std::floor((my - r) / ts)));
      int ty1 = std::min(nty - 1, int(std::floor((my + r) / ts)));
      for (int ty = ty0; ty <= ty1; ++ty)
        for (int tx = tx0; tx <= tx1; ++tx)
          tile_cands[std::size_t(ty) * ntx + tx].push_back(make_candidate(g, s, oi));
    }
    auto run_tiles = [&](int t_begin, int t_end) {
      for (int t = t_begin; t < t_end; ++t) {
        const int tx = t % ntx, ty = t / ntx;
        const auto &cands = tile_cands[std::size_t(t)];
        for (int py = ty * ts; py < std::min(h, (ty + 1) * ts); ++py)
          for (int px = tx * ts; px < std::min(w, (tx + 1) * ts); ++px)
            run_pixel(px, py, cands.data(), cands.size());
      }
    };
    const int n_tiles = ntx * nty;
    const int nthreads = std::clamp(opts.threads, 1, n_tiles);
    if (nthreads <= 1) {
      run_tiles(0, n_tiles);
    } else {
      std::vector<std::thread> pool;
      for (int th = 0; th < nthreads; ++th) {
        const int b = n_tiles * th / nthreads, e = n_tiles * (th + 1) / nthreads;
        pool.emplace_back(run_tiles, b, e);
      }
      for (auto &th : pool)
        th.join();
    }
  }

  if (opts.want_instance) {
    for (std::int64_t pix = 0; pix < std::int64_t(h) * w; ++pix) {
      std::int32_t best_id = -1;
      if (out.alpha[pix] > T(1e-6)) {
        T best_w = T(-1);
        T trans = T(1);
        for (const auto &c : cache.contribs[std::size_t(pix)]) {
          const T wgt = c.alpha * trans;
          if (wgt > best_w) {
            best_w = wgt;
            best_id = g.instance ? g.instance[c.index] : 0;
          }
          trans *= (T(1) - c.alpha);
        }
      }
      out.instance[pix] = best_id;
    }
  }
  return rr;
}

template <typename T>
GaussianGrads<T> render_backward(const splat_detail::ForwardCache<T> &cache,
                                 const GaussianView<T> &g,
                                 const std::type_identity_t<T> *grad_rgb,
                                 const std::type_identity_t<T> *grad_depth,
                                 const std::type_identity_t<T> *grad_alpha) {
  using namespace splat_detail;
  const int w = cache.cam.width, h = cache.cam.height;
  const std::int64_t n = g.n;

  // Per-splat screen-space accumulators.
  struct Acc {
    T mean[2] = {0, 0};
    T cov[3] = {0, 0, 0};
    T depth = 0;
    T opacity = 0;
    T color[3] = {0, 0, 0};
  };

  auto pixel_range_pass = [&](std::int64_t pix_begin, std::int64_t pix_end,
                              std::vector<Acc> &acc) {
    std::vector<T> tbuf, wbuf, dldw;
    for (std::int64_t pix = pix_begin; pix < pix_end; ++pix) {
      const auto &contribs = cache.contribs[std::size_t(pix)];
      if (contribs.empty())
        continue;
      const int px = int(pix % w), py = int(pix / w);
      const T ux = T(px) + T(0.5), uy = T(py) + T(0.5);
      const std::size_t m = contribs.size();
      tbuf.resize(m);
      wbuf.resize(m);
      dldw.resize(m);

      // Recompute transmittances and the depth normalization.
      T trans = T(1), wsum = T(0), dnum = T(0);
      for (std::size_t k = 0; k < m; ++k) {
        tbuf[k] = trans;
        wbuf[k] = contribs[k].alpha * trans;
        wsum += wbuf[k];
        dnum += cache.splats[std::size_t(contribs[k].index)].view[2] * wbuf[k];
        trans *= (T(1) - contribs[k].alpha);
      }
      const bool depth_live = wsum > T(1e-6);
      const T dexp = depth_live ? dnum / wsum : T(cache.opts.far);

      const T gr = grad_rgb ? grad_rgb[pix * 3 + 0] : T(0);
      const T gg = grad_rgb ? grad_rgb[pix * 3 + 1] : T(0);
      const T gb = grad_rgb ? grad_rgb[pix * 3 + 2] : T(0);
      const T gd = grad_depth ? grad_depth[pix] : T(0);
      const T ga = grad_alpha ? grad_alpha[pix] : T(0);

      for (std::size_t k = 0; k < m; ++k) {
        const std::int32_t idx = contribs[k].index;
        const T *col = g.color + 3 * idx;
        T v = gr * col[0] + gg * col[1] + gb * col[2] + ga;
        if (depth_live && gd != T(0))
          v += gd * (cache.splats[std::size_t(idx)].view[2] - dexp) / wsum;
        dldw[k] = v;
      }

      T suffix = T(0); // sum over later contributors of dldw * w
      for (std::size_t kk = m; kk-- > 0;) {
        const std::int32_t idx = contribs[kk].index;
        const Splat<T> &s = cache.splats[std::size_t(idx)];
        Acc &a = acc[std::size_t(idx)];
        const T alpha = contribs[kk].alpha;
        const T wgt = wbuf[kk];

        T dalpha = dldw[kk] * tbuf[kk];
        if (suffix != T(0))
          dalpha -= suffix / (T(1) - alpha);
        suffix += dldw[kk] * wbuf[kk];

        // color and direct depth path
        a.color[0] += gr * wgt;
        a.color[1] += gg * wgt;
        a.color[2] += gb * wgt;
        if (depth_live && gd != T(0))
          a.depth += gd * wgt / wsum;

        // alpha = opacity * sigma
        const T sigma = alpha / g.opacity[idx];
        a.opacity += sigma * dalpha;
        const T gsigma = g.opacity[idx] * dalpha;

        const T dx = ux - s.mean[0], dy = uy - s.mean[1];
        const T lx = s.inv[0] * dx + s.inv[1] * dy;
        const T ly = s.inv[1] * dx + s.inv[2] * dy;
        const T gs_sigma = gsigma * sigma;
        a.mean[0] += gs_sigma * lx;
        a.mean[1] += gs_sigma * ly;

        // dsigma/dLambda = -sigma/2 * Delta Delta^T; chain Lambda = C^{-1}
        const T f = T(-0.5) * gs_sigma;
        const T gl00 = f * dx * dx, gl01 = f * dx * dy, gl11 = f * dy * dy;
        // dC = -Lambda * gL * Lambda (all symmetric 2x2)
        const T i00 = s.inv[0], i01 = s.inv[1], i11 = s.inv[2];
        const T m00 = i00 * gl00 + i01 * gl01, m01 = i00 * gl01 + i01 * gl11;
        const T m10 = i01 * gl00 + i11 * gl01, m11 = i01 * gl01 + i11 * gl11;
        const T c00 = -(m00 * i00 + m01 * i01);
        const T c01 = -(m00 * i01 + m01 * i11);
        const T c10 = -(m10 * i00 + m11 * i01);
        const T c11 = -(m10 * i01 + m11 * i11);
        a.cov[0] += c00;
        a.cov[1] += c01 + c10;
        a.cov[2] += c11;
      }
    }
  };

  const std::int64_t n_pix = std::int64_t(h) * w;
  const int nthreads = std::clamp(cache.opts.threads, 1, 64);
  std::vector<Acc> acc(static_cast<std::size_t>(n));
  if (nthreads <= 1) {
    pixel_range_pass(0, n_pix, acc);
  } else {
    std::vector<std::vector<Acc>> partial(
        static_cast<std::size_t>(nthreads),
        std::vector<Acc>(static_cast<std::size_t>(n)));
    std::vector<std::thread> pool;
    for (int th = 0; th < nthreads; ++th) {
      const std::int64_t b = n_pix * th / nthreads, e = n_pix * (th + 1) / nthreads;
      pool.emplace_back([&, th, b, e] { pixel_range_pass(b, e, partial[std::size_t(th)]); });
    }
    for (auto &th : pool)
      th.join();
    for (int th = 0; th < nthreads; ++th)
      for (std::int64_t i = 0; i < n; ++i) {
        Acc &dst = acc[std::size_t(i)];
        const Acc &src = partial[std::size_t(th)][std::size_t(i)];
        dst.mean[0] += src.mean[0];
        dst.mean[1] += src.mean[1];
        for (int k = 0; k < 3; ++k) {
          dst.cov[k] += src.cov[k];
          dst.color[k] += src.color[k];
        }
        dst.depth += src.depth;
        dst.opacity += src.opacity;
      }
  }

  // Chain screen-space gradients through the projection, per gaussian.
  GaussianGrads<T> grads(n);
  const CamT<T> &cam = cache.cam;
  for (std::int64_t i = 0; i < n; ++i) {
    const Splat<T> &s = cache.splats[std::size_t(i)];
    if (!s.valid)
      continue;
    const Acc &a = acc[std::size_t(i)];
    grads.color[std::size_t(3 * i) + 0] = a.color[0];
    grads.color[std::size_t(3 * i) + 1] = a.color[1];
    grads.color[std::size_t(3 * i) + 2] = a.color[2];
    grads.opacity[std::size_t(i)] = a.opacity;

    const T vx = s.view[0], vy = s.view[1], vz = s.view[2];
    T dview[3];
    dview[0] = a.mean[0] * cam.fx / vz;
    dview[1] = a.mean[1] * cam.fy / vz;
    dview[2] = -a.mean[0] * cam.fx * vx / (vz * vz) - a.mean[1] * cam.fy * vy / (vz * vz) +
               a.depth;

    // Recompute Sigma and Tm (cheap relative to caching them all).
    T rq[9];
    splat_detail::quat_to_rot(g.quat + 4 * i, rq);
    const T *sc = g.scale + 3 * i;
    T mm[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        mm[r * 3 + c] = rq[r * 3 + c] * sc[c];
    T sigma[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        sigma[r * 3 + c] = mm[r * 3] * mm[c * 3] + mm[r * 3 + 1] * mm[c * 3 + 1] +
                           mm[r * 3 + 2] * mm[c * 3 + 2];
    const T j00 = cam.fx / vz, j02 = -cam.fx * vx / (vz * vz);
    const T j11 = cam.fy / vz, j12 = -cam.fy * vy / (vz * vz);
    T t0[3], t1[3];
    for (int c = 0; c < 3; ++c) {
      t0[c] = j00 * cam.r[c] + j02 * cam.r[6 + c];
      t1[c] = j11 * cam.r[3 + c] + j12 * cam.r[6 + c];
    }

    const T ga = a.cov[0], gb2 = a.cov[1], gc = a.cov[2];

    // dSigma (full 3x3) = ga t0 t0^T + gb2 t0 t1^T + gc t1 t1^T
    T dsig[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        dsig[r * 3 + c] = ga * t0[r] * t0[c] + gb2 * t0[r] * t1[c] + gc * t1[r] * t1[c];

    // d rows of Tm
    T st0[3], st1[3];
    for (int r = 0; r < 3; ++r) {
      st0[r] = sigma[r * 3] * t0[0] + sigma[r * 3 + 1] * t0[1] + sigma[r * 3 + 2] * t0[2];
      st1[r] = sigma[r * 3] * t1[0] + sigma[r * 3 + 1] * t1[1] + sigma[r * 3 + 2] * t1[2];
    }
    T dt0[3], dt1[3];
    for (int r = 0; r < 3; ++r) {
      dt0[r] = T(2) * ga * st0[r] + gb2 * st1[r];
      dt1[r] = gb2 * st0[r] + T(2) * gc * st1[r];
    }

    // Tm = J R: dJ = dTm R^T; only J00, J02, J11, J12 are nonzero.
    T dj00 = 0, dj02 = 0, dj11 = 0, dj12 = 0;
    for (int c = 0; c < 3; ++c) {
      dj00 += dt0[c] * cam.r[c];
      dj02 += dt0[c] * cam.r[6 + c];
      dj11 += dt1[c] * cam.r[3 + c];
      dj12 += dt1[c] * cam.r[6 + c];
    }
    dview[0] += dj02 * (-cam.fx / (vz * vz));
    dview[1] += dj12 * (-cam.fy / (vz * vz));
    dview[2] += dj00 * (-cam.fx / (vz * vz)) + dj11 * (-cam.fy / (vz * vz)) +
                dj02 * (T(2) * cam.fx * vx / (vz * vz * vz)) +
                dj12 * (T(2) * cam.fy * vy / (vz * vz * vz));

    // position: view = R p + t
    for (int c = 0; c < 3; ++c)
      grads.pos[std::size_t(3 * i + c)] =
          cam.r[c] * dview[0] + cam.r[3 + c] * dview[1] + cam.r[6 + c] * dview[2];

    // Sigma = M M^T: dM = (dSigma + dSigma^T) M
    T dm[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        T acc_v = T(0);
        for (int k = 0; k < 3; ++k)
          acc_v += (dsig[r * 3 + k] + dsig[k * 3 + r]) * mm[k * 3 + c];
        dm[r * 3 + c] = acc_v;
      }
    // M = R(q) S: dscale_k = sum_r R[r][k] dM[r][k]; dR = dM S
    for (int k = 0; k < 3; ++k) {
      T acc_v = T(0);
      for (int r = 0; r < 3; ++r)
        acc_v += rq[r * 3 + k] * dm[r * 3 + k];
      grads.scale[std::size_t(3 * i + k)] = acc_v;
    }
    T dr[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        dr[r * 3 + c] = dm[r * 3 + c] * sc[c];

    const T *q = g.quat + 4 * i;
    const T qw = q[0], qx = q[1], qy = q[2], qz = q[3];
    T dw = T(2) * (-qz * dr[1] + qy * dr[2] + qz * dr[3] - qx * dr[5] - qy * dr[6] +
                   qx * dr[7]);
    T dqx = T(2) * (qy * dr[1] + qz * dr[2] + qy * dr[3] - qw * dr[5] + qz * dr[6] +
                    qw * dr[7]) -
            T(4) * qx * (dr[4] + dr[8]);
    T dqy = T(2) * (qx * dr[1] + qw * dr[2] + qx * dr[3] + qz * dr[5] - qw * dr[6] +
                    qz * dr[7]) -
            T(4) * qy * (dr[0] + dr[8]);
    T dqz = T(2) * (-qw * dr[1] + qx * dr[2] + qw * dr[3] + qy * dr[5] + qx * dr[6] +
                    qy * dr[7]) -
            T(4) * qz * (dr[0] + dr[4]);
    grads.quat[std::size_t(4 * i) + 0] = dw;
    grads.quat[std::size_t(4 * i) + 1] = dqx;
    grads.quat[std::size_t(4 * i) + 2] = dqy;
    grads.quat[std::size_t(4 * i) + 3] = dqz;
  }
  return grads;
}

// Convenience entry over the AoS gaussian list.
inline RenderOutput<double> render(const std::vector<Gaussian3D> &gs, const Camera &cam,
                                   const RenderOptions &opts = {}) {
  std::vector<double> pos(gs.size() * 3), scale(gs.size() * 3), quat(gs.size() * 4),
      opac(gs.size()), color(gs.size() * 3);
  std::vector<std::int32_t> inst(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      pos[3 * i + k] = gs[i].position[k];
      scale[3 * i + k] = gs[i].scale[k];
      color[3 * i + k] = gs[i].color[k];
    }
    for (int k = 0; k < 4; ++k)
      quat[4 * i + k] = gs[i].rotation[k];
    opac[i] = gs[i].opacity;
    inst[i] = gs[i].instance_id;
  }
  GaussianView<double> view{std::int64_t(gs.size()), pos.data(), scale.data(), quat.data(),
                            opac.data(), color.data(), inst.data()};
  return render_forward(view, cam, opts).output;
}

// Screen-space projection of a single gaussian; invalid behind the near plane.
struct ProjectResult {
  bool valid = false;
  Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov2d = Eigen::Matrix2d::Zero();
  double view_depth = 0;
};

inline ProjectResult project(const Gaussian3D &g, const Camera &cam,
                             double near_clip = 0.01) {
  std::vector<double> pos(3), scale(3), quat(4), opac(1), color(3);
  for (int k = 0; k < 3; ++k) {
    pos[std::size_t(k)] = g.position[k];
    scale[std::size_t(k)] = g.scale[k];
    color[std::size_t(k)] = g.color[k];
  }
  for (int k = 0; k < 4; ++k)
    quat[std::size_t(k)] = g.rotation[k];
  opac[0] = g.opacity;
  GaussianView<double> view{1, pos.data(), scale.data(), quat.data(), opac.data(),
                            color.data(), nullptr};
  const auto s = splat_detail::project_splat(view, 0, splat_detail::cast_camera<double>(cam),
                                             near_clip);
  ProjectResult out;
  out.valid = s.valid;
  if (s.valid) {
    out.mean2d = Eigen::Vector2d(s.mean[0], s.mean[1]);
    out.cov2d << s.cov[0], s.cov[1], s.cov[1], s.cov[2];
    out.view_depth = s.view[2];
  }
  return out;
}

// Differentiable graph node over the rgb output. Side outputs (depth, alpha,
// instance) land in *side when requested; they carry no gradient.
template <typename T>
Var<T> render_rgb_node(Graph<T> &g, Var<T> pos, Var<T> scale, Var<T> quat, Var<T> opacity,
                       Var<T> color, const Camera &cam, const RenderOptions &opts = {},
                       RenderOutput<T> *side = nullptr) {
  const std::int64_t n = g.value(pos).shape[0];
  require(g.value(pos).shape == Shape{n, 3} && g.value(scale).shape == Shape{n, 3} &&
              g.value(quat).shape == Shape{n, 4} && g.value(opacity).size() == n &&
              g.value(color).shape == Shape{n, 3},
          "render_rgb_node: inconsistent gaussian array shapes");
  GaussianView<T> view{n,
                       g.value(pos).data.data(),
                       g.value(scale).data.data(),
                       g.value(quat).data.data(),
                       g.value(opacity).data.data(),
                       g.value(color).data.data(),
                       nullptr};
  auto rr = std::make_shared<RenderResult<T>>(render_forward(view, cam, opts));
  if (side)
    *side = rr->output;
  Tensor<T> rgb = rr->output.rgb;
  return custom<T>(
      g, {pos, scale, quat, opacity, color}, std::move(rgb),
      [&g, pos, scale, quat, opacity, color, rr, n](const Tensor<T> &gout,
                                                    const std::vector<Tensor<T> *> &gins) {
        GaussianView<T> v{n,
                          g.value(pos).data.data(),
                          g.value(scale).data.data(),
                          g.value(quat).data.data(),
                          g.value(opacity).data.data(),
                          g.value(color).data.data(),
                          nullptr};
        GaussianGrads<T> gr = render_backward(rr->cache, v, gout.data.data(), nullptr,
                                              nullptr);
        auto add_to = [](Tensor<T> *dst, const std::vector<T> &src) {
          if (!dst)
            return;
          for (std::size_t i = 0; i < src.size(); ++i)
            dst->data[i] += src[i];
        };
        add_to(gins[0], gr.pos);
        add_to(gins[1], gr.scale);
        add_to(gins[2], gr.quat);
        add_to(gins[3], gr.opacity);
        add_to(gins[4], gr.color);
      });
}

} // namespace gilab
