#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gilab/autodiff.hpp"
#include "gilab/camera.hpp"
#include "gilab/checkpoint.hpp"
#include "gilab/masks.hpp"
#include "gilab/splat.hpp"

namespace gilab {

// Which views receive a populated mask channel (ablation options; the
// default feeds it to the three inpaint views only).
enum class MaskEncodingMode { reference_only, all_views, inpaint_views };

inline const char *mask_encoding_name(MaskEncodingMode m) {
  switch (m) {
  case MaskEncodingMode::reference_only: return "reference_only";
  case MaskEncodingMode::all_views: return "all_views";
  default: return "inpaint_views";
  }
}

inline MaskEncodingMode mask_encoding_from_name(const std::string &s) {
  if (s == "reference_only")
    return MaskEncodingMode::reference_only;
  if (s == "all_views")
    return MaskEncodingMode::all_views;
  require(s == "inpaint_views", "unknown mask encoding mode '", s, "'");
  return MaskEncodingMode::inpaint_views;
}

struct ModelConfig {
  int patch_size = 4;
  int token_dim = 128;
  int num_blocks = 4;
  int num_heads = 2;
  int image_size = 64;
  bool mask_channel = false; // true after the patchifier gains the mask input
  MaskEncodingMode mask_encoding = MaskEncodingMode::inpaint_views;
  double near = 0.1, far = 4.0;
  double scale_min = 1e-3, scale_max = 0.1;

  static constexpr int kGaussianParams = 12; // 1 dist + 3 scale + 4 quat + 1 opac + 3 color
  static constexpr int kInputViews = 4;

  int channels() const { return mask_channel ? 10 : 9; }
  int tokens_per_view() const {
    const int n = image_size / patch_size;
    return n * n;
  }

  void validate() const {
    require(image_size % patch_size == 0, "model config: image size ", image_size,
            " not divisible by patch size ", patch_size);
    require(token_dim % num_heads == 0, "model config: token dim ", token_dim,
            " not divisible by ", num_heads, " heads");
    require(near < far, "model config: near ", near, " must be below far ", far);
    require(scale_min > 0 && scale_min < scale_max, "model config: bad scale bounds");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"patch_size", patch_size},
                          {"token_dim", token_dim},
                          {"num_blocks", num_blocks},
                          {"num_heads", num_heads},
                          {"image_size", image_size},
                          {"mask_channel", mask_channel},
                          {"mask_encoding_mode", mask_encoding_name(mask_encoding)},
                          {"near", near},
                          {"far", far},
                          {"scale_min", scale_min},
                          {"scale_max", scale_max}};
  }

  static ModelConfig from_json(const nlohmann::json &j) {
    ModelConfig c;
    c.patch_size = j.value("patch_size", c.patch_size);
    c.token_dim = j.value("token_dim", c.token_dim);
    c.num_blocks = j.value("num_blocks", c.num_blocks);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.image_size = j.value("image_size", c.image_size);
    c.mask_channel = j.value("mask_channel", c.mask_channel);
    c.mask_encoding =
        mask_encoding_from_name(j.value("mask_encoding_mode", std::string("inpaint_views")));
    c.near = j.value("near", c.near);
    c.far = j.value("far", c.far);
    c.scale_min = j.value("scale_min", c.scale_min);
    c.scale_max = j.value("scale_max", c.scale_max);
    c.validate();
    return c;
  }
};

template <typename T> struct BlockWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;
};

template <typename T> struct ModelWeights {
  ModelConfig cfg;
  Tensor<T> patch_w, patch_b;
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> lnf_gamma, lnf_beta;
  Tensor<T> head_w, head_b;

  // Pre-layernorm ViT initialization; the decoding head starts at zero so an
  // untrained model emits mid-range gaussians (identity rotation, opacity
  // 0.5) instead of noise.
  static ModelWeights init(const ModelConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x11117));
    const std::int64_t d = cfg.token_dim;
    const std::int64_t in_dim = std::int64_t(cfg.channels()) * cfg.patch_size *
                                cfg.patch_size;
    auto randn = [&](Shape s, double stddev) {
      Tensor<T> t(std::move(s));
      for (auto &v : t.data)
        v = T(rng.normal(0.0, stddev));
      return t;
    };
    ModelWeights w;
    w.cfg = cfg;
    w.patch_w = randn({in_dim, d}, 0.02);
    w.patch_b = Tensor<T>({d});
    for (int b = 0; b < cfg.num_blocks; ++b) {
      BlockWeights<T> blk;
      blk.ln1_gamma = Tensor<T>::full({d}, T(1));
      blk.ln1_beta = Tensor<T>({d});
      blk.wq = randn({d, d}, 0.02);
      blk.bq = Tensor<T>({d});
      blk.wk = randn({d, d}, 0.02);
      blk.bk = Tensor<T>({d});
      blk.wv = randn({d, d}, 0.02);
      blk.bv = Tensor<T>({d});
      blk.wo = randn({d, d}, 0.02);
      blk.bo = Tensor<T>({d});
      blk.ln2_gamma = Tensor<T>::full({d}, T(1));
      blk.ln2_beta = Tensor<T>({d});
      blk.w1 = randn({d, 4 * d}, 0.02);
      blk.b1 = Tensor<T>({4 * d});
      blk.w2 = randn({4 * d, d}, 0.02);
      blk.b2 = Tensor<T>({d});
      w.blocks.push_back(std::move(blk));
    }
    w.lnf_gamma = Tensor<T>::full({d}, T(1));
    w.lnf_beta = Tensor<T>({d});
    w.head_w = Tensor<T>({d, std::int64_t(cfg.patch_size) * cfg.patch_size *
                                 ModelConfig::kGaussianParams});
    w.head_b = Tensor<T>({std::int64_t(cfg.patch_size) * cfg.patch_size *
                          ModelConfig::kGaussianParams});
    return w;
  }

  std::vector<std::pair<std::string, Tensor<T> *>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T> *>> out;
    out.emplace_back("patchify.weight", &patch_w);
    out.emplace_back("patchify.bias", &patch_b);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      auto &blk = blocks[b];
      out.emplace_back(p + "ln1.gamma", &blk.ln1_gamma);
      out.emplace_back(p + "ln1.beta", &blk.ln1_beta);
      out.emplace_back(p + "attn.wq", &blk.wq);
      out.emplace_back(p + "attn.bq", &blk.bq);
      out.emplace_back(p + "attn.wk", &blk.wk);
      out.emplace_back(p + "attn.bk", &blk.bk);
      out.emplace_back(p + "attn.wv", &blk.wv);
      out.emplace_back(p + "attn.bv", &blk.bv);
      out.emplace_back(p + "attn.wo", &blk.wo);
      out.emplace_back(p + "attn.bo", &blk.bo);
      out.emplace_back(p + "ln2.gamma", &blk.ln2_gamma);
      out.emplace_back(p + "ln2.beta", &blk.ln2_beta);
      out.emplace_back(p + "mlp.w1", &blk.w1);
      out.emplace_back(p + "mlp.b1", &blk.b1);
      out.emplace_back(p + "mlp.w2", &blk.w2);
      out.emplace_back(p + "mlp.b2", &blk.b2);
    }
    out.emplace_back("final_norm.gamma", &lnf_gamma);
    out.emplace_back("final_norm.beta", &lnf_beta);
    out.emplace_back("head.weight", &head_w);
    out.emplace_back("head.bias", &head_b);
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    auto *self = const_cast<ModelWeights *>(this);
    for (auto &[name, tensor] : self->named_parameters())
      ck.add(name, tensor->template cast<float>());
    return ck;
  }

  static ModelWeights from_checkpoint(const Checkpoint &ck, const ModelConfig &cfg) {
    ModelWeights w = init(cfg, 0);
    for (auto &[name, tensor] : w.named_parameters()) {
      const Tensor<float> &src = ck.get(name);
      require(src.shape == tensor->shape, "checkpoint entry '", name, "' has shape ",
              shape_str(src.shape), ", model expects ", shape_str(tensor->shape));
      *tensor = src.template cast<T>();
    }
    return w;
  }
};

// Stage-2 patchifier expansion: append a mask channel whose weights are the
// per-output mean of the three RGB channel blocks; everything else is copied
// bit-exactly.
template <typename T>
ModelWeights<T> expand_patchifier_for_masks(const ModelWeights<T> &stage1) {
  const ModelConfig &c1 = stage1.cfg;
  require(!c1.mask_channel, "expand_patchifier_for_masks: model already has a mask channel");
  const std::int64_t p2 = std::int64_t(c1.patch_size) * c1.patch_size;
  require(stage1.patch_w.shape[0] == 9 * p2, "expand_patchifier_for_masks: stage-1 "
          "patchifier must have 9 input channels, found ",
          stage1.patch_w.shape[0] / p2);
  ModelWeights<T> out = stage1;
  out.cfg.mask_channel = true;
  const std::int64_t d = stage1.patch_w.shape[1];
  out.patch_w = Tensor<T>({10 * p2, d});
  std::copy(stage1.patch_w.data.begin(), stage1.patch_w.data.end(),
            out.patch_w.data.begin());
  for (std::int64_t k = 0; k < p2; ++k)
    for (std::int64_t j = 0; j < d; ++j) {
      const T r = stage1.patch_w.at(0 * p2 + k, j);
      const T g = stage1.patch_w.at(1 * p2 + k, j);
      const T b = stage1.patch_w.at(2 * p2 + k, j);
      out.patch_w.at(9 * p2 + k, j) = (r + g + b) / T(3);
    }
  return out;
}

// Graph leaves for one forward pass.
template <typename T> struct WeightVars {
  Var<T> patch_w, patch_b;
  struct Block {
    Var<T> ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1,
        w2, b2;
  };
  std::vector<Block> blocks;
  Var<T> lnf_gamma, lnf_beta, head_w, head_b;

  std::vector<Var<T>> all() const {
    std::vector<Var<T>> out = {patch_w, patch_b};
    for (const auto &b : blocks)
      for (Var<T> v : {b.ln1_gamma, b.ln1_beta, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo,
                       b.bo, b.ln2_gamma, b.ln2_beta, b.w1, b.b1, b.w2, b.b2})
        out.push_back(v);
    for (Var<T> v : {lnf_gamma, lnf_beta, head_w, head_b})
      out.push_back(v);
    return out;
  }
};

template <typename T>
WeightVars<T> bind_weights(Graph<T> &g, const ModelWeights<T> &w, bool track) {
  WeightVars<T> out;
  out.patch_w = g.leaf(w.patch_w, track);
  out.patch_b = g.leaf(w.patch_b, track);
  for (const auto &blk : w.blocks) {
    typename WeightVars<T>::Block b;
    b.ln1_gamma = g.leaf(blk.ln1_gamma, track);
    b.ln1_beta = g.leaf(blk.ln1_beta, track);
    b.wq = g.leaf(blk.wq, track);
    b.bq = g.leaf(blk.bq, track);
    b.wk = g.leaf(blk.wk, track);
    b.bk = g.leaf(blk.bk, track);
    b.wv = g.leaf(blk.wv, track);
    b.bv = g.leaf(blk.bv, track);
    b.wo = g.leaf(blk.wo, track);
    b.bo = g.leaf(blk.bo, track);
    b.ln2_gamma = g.leaf(blk.ln2_gamma, track);
    b.ln2_beta = g.leaf(blk.ln2_beta, track);
    b.w1 = g.leaf(blk.w1, track);
    b.b1 = g.leaf(blk.b1, track);
    b.w2 = g.leaf(blk.w2, track);
    b.b2 = g.leaf(blk.b2, track);
    out.blocks.push_back(b);
  }
  out.lnf_gamma = g.leaf(w.lnf_gamma, track);
  out.lnf_beta = g.leaf(w.lnf_beta, track);
  out.head_w = g.leaf(w.head_w, track);
  out.head_b = g.leaf(w.head_b, track);
  return out;
}

// One input view before tokenization.
template <typename T> struct ViewInput {
  Tensor<T> image;         // HxWx3 in [0,1]
  Tensor<T> rays;          // HxWx6 Plücker
  const Mask *mask = nullptr;
  bool is_reference = false;
};

// RGB (gray-filled under the mask for inpaint views), Plücker, then the mask
// channel. The reference view and views without masks feed zeros there.
template <typename T>
Tensor<T> build_view_channels(const ViewInput<T> &view, const ModelConfig &cfg) {
  const std::int64_t h = view.image.shape[0], w = view.image.shape[1];
  require(view.rays.shape == Shape{h, w, 6}, "tokenize: ray map shape ",
          shape_str(view.rays.shape), " does not match image ", shape_str(view.image.shape));
  require(h == cfg.image_size && w == cfg.image_size, "tokenize: image is ", h, "x", w,
          ", config expects ", cfg.image_size);
  if (view.mask != nullptr) {
    require(view.mask->shape == Shape{h, w}, "tokenize: mask shape mismatch");
    require(!view.is_reference || mask_area(*view.mask) == 0,
            "tokenize: reference view carries a non-empty mask");
  }
  const int c = cfg.channels();
  const bool feed_mask = [&] {
    if (!cfg.mask_channel || view.mask == nullptr)
      return false;
    switch (cfg.mask_encoding) {
    case MaskEncodingMode::reference_only: return view.is_reference;
    case MaskEncodingMode::all_views: return true;
    default: return !view.is_reference;
    }
  }();

  Tensor<T> out({h, w, c});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const bool masked =
          !view.is_reference && view.mask != nullptr && view.mask->at(y, x) != 0;
      for (int k = 0; k < 3; ++k)
        out.at(y, x, k) = masked ? T(0.5) : view.image.at(y, x, k);
      for (int k = 0; k < 6; ++k)
        out.at(y, x, 3 + k) = view.rays.at(y, x, k);
      if (cfg.mask_channel)
        out.at(y, x, 9) = (feed_mask && view.mask->at(y, x) != 0) ? T(1) : T(0);
    }
  return out;
}

// Patchify + linear embedding of one view. Uses the sequential matmul kernel
// so a zero-filled extra channel cannot perturb the rounding of the original
// channels (stage-1/stage-2 equivalence is bit-level).
template <typename T>
Var<T> tokenize(Graph<T> &g, const WeightVars<T> &wv, const ViewInput<T> &view,
                const ModelConfig &cfg) {
  Tensor<T> channels = build_view_channels(view, cfg);
  Var<T> x = g.constant(std::move(channels));
  Var<T> patches = unfold(x, cfg.patch_size, cfg.patch_size, 0);
  return linear(patches, wv.patch_w, wv.patch_b, MatmulKernel::seq);
}

template <typename T>
Var<T> transformer(Graph<T> &g, const WeightVars<T> &wv, Var<T> tokens,
                   const ModelConfig &cfg) {
  Var<T> x = tokens;
  for (const auto &blk : wv.blocks) {
    Var<T> h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    Var<T> q = linear(h, blk.wq, blk.bq);
    Var<T> k = linear(h, blk.wk, blk.bk);
    Var<T> v = linear(h, blk.wv, blk.bv);
    Var<T> attn = linear(multihead_attention(q, k, v, cfg.num_heads), blk.wo, blk.bo);
    x = add(x, attn);
    Var<T> h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    Var<T> m = linear(gelu(linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2);
    x = add(x, m);
  }
  return layer_norm(x, wv.lnf_gamma, wv.lnf_beta);
}

// Decode transformed tokens into per-view HxWx12 raw gaussian maps.
template <typename T>
std::array<Var<T>, 4> decode_raw_maps(Graph<T> &g, const WeightVars<T> &wv, Var<T> tokens,
                                      const ModelConfig &cfg) {
  Var<T> raw_tokens = linear(tokens, wv.head_w, wv.head_b);
  const std::int64_t tpv = cfg.tokens_per_view();
  std::array<Var<T>, 4> out;
  for (int v = 0; v < 4; ++v)
    out[std::size_t(v)] =
        fold_patches(slice(raw_tokens, 0, v * tpv, tpv), cfg.image_size, cfg.image_size,
                     ModelConfig::kGaussianParams, cfg.patch_size);
  return out;
}

template <typename T> struct ForwardResult {
  std::array<Var<T>, 4> raw_maps; // HxWx12 per view
  Var<T> tokens;
};

template <typename T>
ForwardResult<T> model_forward(Graph<T> &g, const WeightVars<T> &wv,
                               const std::array<ViewInput<T>, 4> &views,
                               const ModelConfig &cfg) {
  cfg.validate();
  std::vector<Var<T>> per_view;
  per_view.reserve(4);
  for (const auto &view : views)
    per_view.push_back(tokenize(g, wv, view, cfg));
  Var<T> tokens = concat<T>(per_view, 0);
  require(g.value(tokens).shape[0] == 4 * std::int64_t(cfg.tokens_per_view()),
          "model_forward: token count ", g.value(tokens).shape[0],
          " does not match config (", 4 * cfg.tokens_per_view(), ")");
  Var<T> transformed = transformer(g, wv, tokens, cfg);
  ForwardResult<T> out;
  out.tokens = transformed;
  out.raw_maps = decode_raw_maps(g, wv, transformed, cfg);
  return out;
}

// Differentiable activation of one raw map into world-space gaussian
// parameter tensors. Positions are pinned to the pixel rays:
// position = camera_center + ray_distance * direction.
template <typename T> struct ActivatedGaussians {
  Var<T> positions;  // (N,3)
  Var<T> scales;     // (N,3)
  Var<T> rotations;  // (N,4) unit quaternions
  Var<T> opacities;  // (N)
  Var<T> colors;     // (N,3)
};

template <typename T>
ActivatedGaussians<T> activate(Graph<T> &g, Var<T> raw, const Tensor<T> &rays,
                               const Camera &cam, const ModelConfig &cfg) {
  require(cfg.near < cfg.far, "activate: near ", cfg.near, " >= far ", cfg.far);
  const std::int64_t h = g.value(raw).shape[0], w = g.value(raw).shape[1];
  require(g.value(raw).shape == Shape{h, w, 12}, "activate: raw map must be HxWx12, got ",
          shape_str(g.value(raw).shape));
  const std::int64_t n = h * w;
  Var<T> flat = reshape(raw, {n, 12});

  Var<T> dist = add_scalar(scale(sigmoid(slice(flat, 1, 0, 1)), T(cfg.far - cfg.near)),
                           T(cfg.near));
  Tensor<T> dirs({n, 3});
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      dirs.at(i, k) = rays[i * 6 + k];
  const Eigen::Vector3d c = cam.center();
  Tensor<T> center({3});
  for (int k = 0; k < 3; ++k)
    center[k] = T(c[k]);

  ActivatedGaussians<T> out;
  Var<T> dist3 = concat<T>({dist, dist, dist}, 1);
  out.positions = add(mul(dist3, g.constant(std::move(dirs))), g.constant(std::move(center)));
  out.scales = add_scalar(scale(sigmoid(slice(flat, 1, 1, 3)), T(cfg.scale_max - cfg.scale_min)),
                          T(cfg.scale_min));
  Tensor<T> identity_quat({4});
  identity_quat[0] = T(1);
  out.rotations = l2_normalize(add(slice(flat, 1, 4, 4), g.constant(std::move(identity_quat))));
  out.opacities = reshape(sigmoid(slice(flat, 1, 8, 1)), {n});
  out.colors = sigmoid(slice(flat, 1, 9, 3));
  return out;
}

// Plain-value view of an activated map, for inference-style consumers.
template <typename T>
std::vector<Gaussian3D> extract_gaussians(const Graph<T> &g, const ActivatedGaussians<T> &a) {
  const Tensor<T> &pos = g.value(a.positions);
  const Tensor<T> &sc = g.value(a.scales);
  const Tensor<T> &qt = g.value(a.rotations);
  const Tensor<T> &op = g.value(a.opacities);
  const Tensor<T> &co = g.value(a.colors);
  std::vector<Gaussian3D> out(std::size_t(op.size()));
  for (std::int64_t i = 0; i < op.size(); ++i) {
    Gaussian3D &gs = out[std::size_t(i)];
    gs.position = Eigen::Vector3d(pos.at(i, 0), pos.at(i, 1), pos.at(i, 2));
    gs.scale = Eigen::Vector3d(sc.at(i, 0), sc.at(i, 1), sc.at(i, 2));
    gs.rotation = Eigen::Vector4d(qt.at(i, 0), qt.at(i, 1), qt.at(i, 2), qt.at(i, 3));
    gs.opacity = double(op[i]);
    gs.color = Eigen::Vector3d(co.at(i, 0), co.at(i, 1), co.at(i, 2));
  }
  return out;
}

} // namespace gilab
