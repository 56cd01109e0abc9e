#pragma once

#include <cmath>
#include <vector>

#include "gilab/masks.hpp"
#include "gilab/tensor.hpp"

namespace gilab {

// PSNR in dB over [0,1] images, optionally restricted to mask-true pixels.
// Capped at 99 dB when the MSE drops below 1e-10.
inline double psnr(const Tensor<float> &a, const Tensor<float> &b,
                   const Mask *mask = nullptr) {
  require(a.shape == b.shape, "psnr: shape mismatch ", shape_str(a.shape), " vs ",
          shape_str(b.shape));
  require(a.rank() == 3, "psnr: HxWxC images required");
  const std::int64_t c = a.shape[2];
  double sum = 0;
  std::int64_t count = 0;
  if (mask) {
    require(mask->shape[0] == a.shape[0] && mask->shape[1] == a.shape[1],
            "psnr: mask shape mismatch");
    require(mask_area(*mask) > 0, "psnr: mask selects no pixels");
    for (std::int64_t i = 0; i < mask->size(); ++i) {
      if (!(*mask)[i])
        continue;
      for (std::int64_t k = 0; k < c; ++k) {
        const double d = double(a[i * c + k]) - double(b[i * c + k]);
        sum += d * d;
      }
      count += c;
    }
  } else {
    for (std::int64_t i = 0; i < a.size(); ++i) {
      const double d = double(a[i]) - double(b[i]);
      sum += d * d;
    }
    count = a.size();
  }
  const double mse = sum / double(count);
  if (mse < 1e-10)
    return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

namespace ssim_detail {

inline const std::vector<double> &gaussian_window() {
  static const std::vector<double> w = [] {
    std::vector<double> out(11 * 11);
    const double sigma = 1.5;
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const double dx = x - 5, dy = y - 5;
        out[std::size_t(y * 11 + x)] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
    return out;
  }();
  return w;
}

} // namespace ssim_detail

// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5,
// k1 = 0.01, k2 = 0.03, L = 1), averaged over channels. The window is
// clipped and renormalized at the border so the map covers every pixel;
// the masked variant averages the map over mask-true pixels.
inline double ssim(const Tensor<float> &a, const Tensor<float> &b,
                   const Mask *mask = nullptr) {
  require(a.shape == b.shape, "ssim: shape mismatch ", shape_str(a.shape), " vs ",
          shape_str(b.shape));
  require(a.rank() == 3, "ssim: HxWxC images required");
  const std::int64_t h = a.shape[0], w = a.shape[1], c = a.shape[2];
  require(h >= 11 && w >= 11, "ssim: images must be at least 11x11, got ", h, "x", w);
  if (mask) {
    require(mask->shape[0] == h && mask->shape[1] == w, "ssim: mask shape mismatch");
    require(mask_area(*mask) > 0, "ssim: mask selects no pixels");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto &win = ssim_detail::gaussian_window();

  double total = 0;
  std::int64_t counted = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (mask && !mask->at(y, x))
        continue;
      double pixel_ssim = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double wsum = 0, ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const std::int64_t yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w)
              continue;
            const double g = win[std::size_t((dy + 5) * 11 + (dx + 5))];
            const double va = a.at(yy, xx, ch), vb = b.at(yy, xx, ch);
            wsum += g;
            ma += g * va;
            mb += g * vb;
            maa += g * va * va;
            mbb += g * vb * vb;
            mab += g * va * vb;
          }
        ma /= wsum;
        mb /= wsum;
        const double sa = maa / wsum - ma * ma;
        const double sb = mbb / wsum - mb * mb;
        const double sab = mab / wsum - ma * mb;
        pixel_ssim += ((2 * ma * mb + c1) * (2 * sab + c2)) /
                      ((ma * ma + mb * mb + c1) * (sa + sb + c2));
      }
      total += pixel_ssim / double(c);
      ++counted;
    }
  return total / double(counted);
}

} // namespace gilab
