#pragma once

#include "gilab/autodiff.hpp"
#include "gilab/common.hpp"

namespace gilab {

// Fixed random filter bank standing in for a pretrained perceptual network:
// two levels of 8 random 5x5 filters with a stride-2 average pool between
// them. The filters are frozen at construction from a constant seed and are
// not part of any checkpoint.
template <typename T> struct FeatureBank {
  Tensor<T> level1; // (5*5*3, 8)
  Tensor<T> level2; // (5*5*8, 8)
  Tensor<T> pool;   // (2*2*8, 8), fixed 0.25 entries

  static FeatureBank make(std::uint64_t seed = 0xfea7ba) {
    Rng rng(derive_seed(seed, 0xf117e2));
    FeatureBank b;
    b.level1 = Tensor<T>({75, 8});
    for (auto &v : b.level1.data)
      v = T(rng.normal(0.0, 1.0 / std::sqrt(75.0)));
    b.level2 = Tensor<T>({200, 8});
    for (auto &v : b.level2.data)
      v = T(rng.normal(0.0, 1.0 / std::sqrt(200.0)));
    b.pool = Tensor<T>({32, 8});
    for (int c = 0; c < 8; ++c)
      for (int j = 0; j < 4; ++j)
        b.pool.at(c * 4 + j, c) = T(0.25);
    return b;
  }

  // Two feature maps from an HxWx3 image (H, W even).
  std::pair<Var<T>, Var<T>> apply(Graph<T> &g, Var<T> image) const {
    const Shape &s = g.value(image).shape;
    const std::int64_t h = s[0], w = s[1];
    Var<T> f1 = matmul(unfold(image, 5, 1, 2), g.constant(level1));
    Var<T> f1_img = reshape(f1, {h, w, 8});
    Var<T> pooled = reshape(matmul(unfold(f1_img, 2, 2, 0), g.constant(pool)),
                            {h / 2, w / 2, 8});
    Var<T> f2 = matmul(unfold(pooled, 5, 1, 2), g.constant(level2));
    return {f1, f2};
  }
};

template <typename T> struct LossParts {
  Var<T> total, mse, feature;
};

// MSE plus the filter-bank feature distance. Target features are computed
// through untracked nodes, so only the rendered branch carries gradients.
template <typename T>
LossParts<T> photometric_loss(Graph<T> &g, Var<T> rendered, const Tensor<T> &target,
                              const FeatureBank<T> &bank, T feature_weight,
                              T mse_weight = T(1)) {
  require(g.value(rendered).shape == target.shape, "photometric_loss: rendered shape ",
          shape_str(g.value(rendered).shape), " does not match target ",
          shape_str(target.shape));
  Var<T> tgt = g.constant(target);
  Var<T> diff = sub(rendered, tgt);
  LossParts<T> parts;
  parts.mse = mean(mul(diff, diff));
  auto [fr1, fr2] = bank.apply(g, rendered);
  auto [ft1, ft2] = bank.apply(g, tgt);
  Var<T> d1 = sub(fr1, ft1);
  Var<T> d2 = sub(fr2, ft2);
  parts.feature = add(mean(mul(d1, d1)), mean(mul(d2, d2)));
  parts.total = add(scale(parts.mse, mse_weight), scale(parts.feature, feature_weight));
  return parts;
}

} // namespace gilab
