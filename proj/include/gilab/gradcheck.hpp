#pragma once

#include <string>
#include <vector>

#include "gilab/autodiff.hpp"
#include "gilab/common.hpp"
#include "gilab/model.hpp"
#include "gilab/splat.hpp"

namespace gilab {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
};

// Central finite-difference verification of every autodiff op at float64.
// Each op is exercised on `instances` random small tensors; the reported
// value is the worst relative error seen.
inline std::vector<GradCheckResult> run_op_gradient_checks(int instances = 100,
                                                           std::uint64_t seed = 17,
                                                           double eps = 1e-5) {
  using D = double;
  Rng rng(seed);

  auto rand_tensor = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<D> t(std::move(s));
    for (auto &v : t.data)
      v = rng.uniform(lo, hi);
    return t;
  };

  std::vector<GradCheckResult> results;
  auto run = [&](const std::string &name, auto make_case) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
      auto [build, leaves] = make_case();
      worst = std::max(worst, gradient_check<D>(build, std::move(leaves), eps));
    }
    results.push_back({name, worst});
  };

  using Build = std::function<Var<D>(Graph<D> &, const std::vector<Var<D>> &)>;
  using Case = std::pair<Build, std::vector<Tensor<D>>>;

  auto elementwise_pair = [&](auto op) {
    return [&, op]() -> Case {
      const std::int64_t n = rng.uniform_int(1, 12);
      Build b = [op](Graph<D> &g, const std::vector<Var<D>> &v) {
        return sum(op(v[0], v[1]));
      };
      return {b, {rand_tensor({n}), rand_tensor({n})}};
    };
  };

  run("add", elementwise_pair([](Var<D> a, Var<D> b) { return add(a, b); }));
  run("sub", elementwise_pair([](Var<D> a, Var<D> b) { return sub(a, b); }));
  run("mul", elementwise_pair([](Var<D> a, Var<D> b) { return mul(a, b); }));

  run("div", [&]() -> Case {
    const std::int64_t n = rng.uniform_int(1, 12);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) { return sum(div(v[0], v[1])); };
    Tensor<D> denom = rand_tensor({n}, 0.5, 2.0);
    return {b, {rand_tensor({n}), std::move(denom)}};
  });

  run("add_broadcast", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(2, 5), n = rng.uniform_int(1, 6);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) { return sum(add(v[0], v[1])); };
    return {b, {rand_tensor({m, n}), rand_tensor({n})}};
  });

  run("matmul", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5),
                       n = rng.uniform_int(1, 5);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(matmul(v[0], v[1]));
    };
    return {b, {rand_tensor({m, k}), rand_tensor({k, n})}};
  });

  run("linear", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5),
                       n = rng.uniform_int(1, 5);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(linear(v[0], v[1], v[2]));
    };
    return {b, {rand_tensor({m, k}), rand_tensor({k, n}), rand_tensor({n})}};
  });

  run("attention", [&]() -> Case {
    const int heads = int(rng.uniform_int(1, 2));
    const std::int64_t n = rng.uniform_int(2, 5), dh = rng.uniform_int(1, 3);
    const std::int64_t d = heads * dh;
    Tensor<D> w = rand_tensor({n, d});
    Build b = [heads, w](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(multihead_attention(v[0], v[1], v[2], heads), g.constant(w)));
    };
    return {b, {rand_tensor({n, d}), rand_tensor({n, d}), rand_tensor({n, d})}};
  });

  run("matmul_seq", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5),
                       n = rng.uniform_int(1, 5);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(matmul(v[0], v[1], MatmulKernel::seq));
    };
    return {b, {rand_tensor({m, k}), rand_tensor({k, n})}};
  });

  run("reshape", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 4), n = rng.uniform_int(1, 4);
    Build b = [m, n](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(reshape(v[0], {n * m}), reshape(v[1], {n * m})));
    };
    return {b, {rand_tensor({m, n}), rand_tensor({n, m})}};
  });

  run("transpose", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(transpose(v[0]), v[1]));
    };
    return {b, {rand_tensor({m, n}), rand_tensor({n, m})}};
  });

  run("concat", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 4), n1 = rng.uniform_int(1, 4),
                       n2 = rng.uniform_int(1, 4);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(pow(concat<D>({v[0], v[1]}, 1), 2.0));
    };
    return {b, {rand_tensor({m, n1}), rand_tensor({m, n2})}};
  });

  run("slice", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(2, 6), n = rng.uniform_int(2, 6);
    const std::int64_t start = rng.uniform_int(0, n - 1);
    const std::int64_t len = rng.uniform_int(1, n - start);
    Build b = [start, len](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(pow(slice(v[0], 1, start, len), 2.0));
    };
    return {b, {rand_tensor({m, n})}};
  });

  auto unary_case = [&](auto op, double lo, double hi) {
    return [&, op, lo, hi]() -> Case {
      const std::int64_t n = rng.uniform_int(1, 12);
      Build b = [op](Graph<D> &g, const std::vector<Var<D>> &v) { return sum(op(v[0])); };
      return {b, {rand_tensor({n}, lo, hi)}};
    };
  };

  run("sum", unary_case([](Var<D> a) { return a; }, -1, 1));
  run("mean", [&]() -> Case {
    const std::int64_t n = rng.uniform_int(1, 12);
    Build b = [](Graph<D> &g, const std::vector<Var<D>> &v) { return mean(pow(v[0], 2.0)); };
    return {b, {rand_tensor({n})}};
  });
  run("exp", unary_case([](Var<D> a) { return exp(a); }, -1, 1));
  run("sqrt", unary_case([](Var<D> a) { return sqrt(a); }, 0.3, 2.0));
  run("pow", [&]() -> Case {
    const std::int64_t n = rng.uniform_int(1, 8);
    const double p = rng.uniform(0.5, 3.0);
    Build b = [p](Graph<D> &g, const std::vector<Var<D>> &v) { return sum(pow(v[0], p)); };
    return {b, {rand_tensor({n}, 0.3, 2.0)}};
  });
  run("sigmoid", unary_case([](Var<D> a) { return sigmoid(a); }, -3, 3));
  run("gelu", unary_case([](Var<D> a) { return gelu(a); }, -3, 3));

  run("softmax", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 4), n = rng.uniform_int(2, 6);
    Tensor<D> w = rand_tensor({m, n});
    Build b = [w](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(softmax(v[0]), g.constant(w)));
    };
    return {b, {rand_tensor({m, n}, -2, 2)}};
  });

  run("layer_norm", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 4), n = rng.uniform_int(2, 8);
    Tensor<D> w = rand_tensor({m, n});
    Build b = [w](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(layer_norm(v[0], v[1], v[2]), g.constant(w)));
    };
    return {b, {rand_tensor({m, n}, -2, 2), rand_tensor({n}, 0.5, 1.5), rand_tensor({n})}};
  });

  run("l2_normalize", [&]() -> Case {
    const std::int64_t m = rng.uniform_int(1, 4);
    Tensor<D> w = rand_tensor({m, 4});
    Build b = [w](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(mul(l2_normalize(v[0]), g.constant(w)));
    };
    Tensor<D> q = rand_tensor({m, 4}, -1, 1);
    for (std::int64_t r = 0; r < m; ++r)
      q.at(r, 0) += 2.0; // keep rows away from zero norm
    return {b, {std::move(q)}};
  });

  run("unfold", [&]() -> Case {
    const int k = int(rng.uniform_int(1, 3));
    const int stride = int(rng.uniform_int(1, 2));
    const int pad = int(rng.uniform_int(0, k - 1));
    const std::int64_t h = k + stride * rng.uniform_int(2, 4) - 2 * pad;
    const std::int64_t w = k + stride * rng.uniform_int(2, 4) - 2 * pad;
    const std::int64_t c = rng.uniform_int(1, 3);
    Build b = [k, stride, pad](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(pow(unfold(v[0], k, stride, pad), 2.0));
    };
    return {b, {rand_tensor({h, w, c})}};
  });

  run("fold_patches", [&]() -> Case {
    const int p = int(rng.uniform_int(1, 3));
    const std::int64_t ny = rng.uniform_int(1, 3), nx = rng.uniform_int(1, 3);
    const std::int64_t c = rng.uniform_int(1, 3);
    Build b = [p, ny, nx, c](Graph<D> &g, const std::vector<Var<D>> &v) {
      return sum(pow(fold_patches(v[0], ny * p, nx * p, c, p), 2.0));
    };
    return {b, {rand_tensor({ny * nx, std::int64_t(p) * p * c})}};
  });

  return results;
}

// Random small scene for renderer verification: gaussians strewn in front of
// an 8x8 camera, depth/alpha loss terms masked to pixels safely away from
// the background switch.
struct RendererFdScene {
  Camera cam;
  std::vector<double> pos, scale, quat, opacity, color;
  Tensor<double> w_rgb, w_depth, w_alpha;
  std::int64_t n = 0;
};

inline RendererFdScene make_renderer_fd_scene(Rng &rng, int n_gaussians = 5) {
  RendererFdScene s;
  s.n = n_gaussians;
  s.cam.fx = s.cam.fy = 6.0;
  s.cam.cx = s.cam.cy = 4.0;
  s.cam.width = s.cam.height = 8;
  for (int i = 0; i < n_gaussians; ++i) {
    s.pos.insert(s.pos.end(),
                 {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.8, 2.0)});
    s.scale.insert(s.scale.end(), {rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4),
                                   rng.uniform(0.08, 0.4)});
    Eigen::Vector4d q(1.0 + rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5),
                      rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    q.normalize();
    s.quat.insert(s.quat.end(), {q[0], q[1], q[2], q[3]});
    s.opacity.push_back(rng.uniform(0.2, 0.8));
    s.color.insert(s.color.end(),
                   {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});
  }
  s.w_rgb = Tensor<double>({8, 8, 3});
  s.w_depth = Tensor<double>({8, 8});
  s.w_alpha = Tensor<double>({8, 8});
  for (auto &v : s.w_rgb.data)
    v = rng.uniform(-1, 1);
  for (auto &v : s.w_depth.data)
    v = rng.uniform(-1, 1);
  for (auto &v : s.w_alpha.data)
    v = rng.uniform(-1, 1);
  return s;
}

// Full forward+backward finite-difference check of the splat renderer.
// Returns the max relative error across all gaussian parameters.
inline double run_renderer_fd_check(int n_scenes = 3, std::uint64_t seed = 1234,
                                    double eps = 1e-6) {
  Rng rng(seed);
  double worst = 0.0;
  for (int sc = 0; sc < n_scenes; ++sc) {
    RendererFdScene s = make_renderer_fd_scene(rng);
    RenderOptions opts;

    GaussianView<double> view{s.n,       s.pos.data(),     s.scale.data(), s.quat.data(),
                              s.opacity.data(), s.color.data(), nullptr};
    auto base = render_forward(view, s.cam, opts);
    // Freeze the depth loss mask away from the background branch.
    Tensor<double> w_depth = s.w_depth;
    for (std::int64_t i = 0; i < w_depth.size(); ++i)
      if (base.output.alpha[i] <= 1e-3)
        w_depth[i] = 0.0;

    auto loss = [&](const GaussianView<double> &v) {
      auto out = render_forward(v, s.cam, opts).output;
      double acc = 0;
      for (std::int64_t i = 0; i < out.rgb.size(); ++i)
        acc += out.rgb[i] * s.w_rgb[i];
      for (std::int64_t i = 0; i < out.depth.size(); ++i)
        acc += out.depth[i] * w_depth[i] + out.alpha[i] * s.w_alpha[i];
      return acc;
    };

    GaussianGrads<double> an = render_backward(base.cache, view, s.w_rgb.data.data(),
                                               w_depth.data.data(), s.w_alpha.data.data());

    auto check_param = [&](std::vector<double> &arr, const std::vector<double> &analytic) {
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const double saved = arr[i];
        arr[i] = saved + eps;
        const double fp = loss(view);
        arr[i] = saved - eps;
        const double fm = loss(view);
        arr[i] = saved;
        const double numeric = (fp - fm) / (2 * eps);
        const double a = analytic[i];
        const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      }
    };
    check_param(s.pos, an.pos);
    check_param(s.scale, an.scale);
    check_param(s.quat, an.quat);
    check_param(s.opacity, an.opacity);
    check_param(s.color, an.color);
  }
  return worst;
}

// End-to-end check: photometric loss through tokenize -> transformer ->
// activate -> renderer at float64 on an 8x8 image with 2 blocks. Finite
// differences run over a representative set of weight tensors (patchifier,
// one attention weight, one MLP weight, final norm, head).
inline double run_model_e2e_fd_check(std::uint64_t seed = 5150, double eps = 1e-6) {
  using D = double;
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 2;
  cfg.token_dim = 16;
  cfg.num_heads = 2;
  cfg.num_blocks = 2;
  cfg.mask_channel = true;
  ModelWeights<D> weights = ModelWeights<D>::init(cfg, seed);
  Rng rng(derive_seed(seed, 0xe2e));
  for (auto &v : weights.head_w.data)
    v = rng.normal(0.0, 0.05); // nonzero head so gradients reach every layer

  // Four posed views of nothing in particular: random pixels, real rays.
  std::array<Camera, 4> cams;
  std::array<Tensor<D>, 4> images, rays;
  for (int v = 0; v < 4; ++v) {
    const double az = 0.5 + 1.4 * v;
    const Eigen::Vector3d eye(1.4 * std::cos(az), 1.4 * std::sin(az), 1.0);
    cams[std::size_t(v)] = Camera::look_at(eye, {0, 0, 0}, 7.0, 4.0, 4.0, 8, 8);
    images[std::size_t(v)] = Tensor<D>({8, 8, 3});
    for (auto &x : images[std::size_t(v)].data)
      x = rng.uniform();
    rays[std::size_t(v)] = plucker_rays(cams[std::size_t(v)]);
  }
  Mask mask({8, 8});
  for (std::int64_t i = 0; i < 12; ++i)
    mask[rng.uniform_int(0, 63)] = 1;
  Tensor<D> target({8, 8, 3});
  for (auto &x : target.data)
    x = rng.uniform();

  auto build_loss = [&](Graph<D> &g, const WeightVars<D> &wv) {
    std::array<ViewInput<D>, 4> views;
    for (int v = 0; v < 4; ++v) {
      views[std::size_t(v)].image = images[std::size_t(v)];
      views[std::size_t(v)].rays = rays[std::size_t(v)];
      views[std::size_t(v)].is_reference = v == 0;
      views[std::size_t(v)].mask = v == 0 ? nullptr : &mask;
    }
    auto fwd = model_forward(g, wv, views, cfg);
    std::vector<Var<D>> pos, sc, qt, op, co;
    for (int v = 0; v < 4; ++v) {
      auto act = activate(g, fwd.raw_maps[std::size_t(v)], rays[std::size_t(v)],
                          cams[std::size_t(v)], cfg);
      pos.push_back(act.positions);
      sc.push_back(act.scales);
      qt.push_back(act.rotations);
      op.push_back(act.opacities);
      co.push_back(act.colors);
    }
    Var<D> rgb = render_rgb_node(g, concat<D>(pos, 0), concat<D>(sc, 0), concat<D>(qt, 0),
                                 concat<D>(op, 0), concat<D>(co, 0), cams[1]);
    Var<D> diff = sub(rgb, g.constant(target));
    return mean(mul(diff, diff));
  };

  // The checked tensors become gradient_check leaves; the rest stay fixed.
  const std::vector<std::string> checked = {"patchify.weight", "blocks.0.attn.wq",
                                            "blocks.1.mlp.w2", "final_norm.gamma",
                                            "head.weight"};
  std::vector<Tensor<D>> leaf_values;
  auto named = weights.named_parameters();
  for (const auto &name : checked)
    for (auto &[n, t] : named)
      if (n == name)
        leaf_values.push_back(*t);

  auto builder = [&](Graph<D> &g, const std::vector<Var<D>> &leaves) {
    WeightVars<D> wv;
    std::size_t li = 0;
    auto bind_one = [&](const std::string &name, const Tensor<D> &value) -> Var<D> {
      for (std::size_t c = 0; c < checked.size(); ++c)
        if (checked[c] == name)
          return leaves[c];
      (void)li;
      return g.constant(value);
    };
    wv.patch_w = bind_one("patchify.weight", weights.patch_w);
    wv.patch_b = bind_one("patchify.bias", weights.patch_b);
    for (std::size_t b = 0; b < weights.blocks.size(); ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      const auto &blk = weights.blocks[b];
      typename WeightVars<D>::Block bv;
      bv.ln1_gamma = bind_one(p + "ln1.gamma", blk.ln1_gamma);
      bv.ln1_beta = bind_one(p + "ln1.beta", blk.ln1_beta);
      bv.wq = bind_one(p + "attn.wq", blk.wq);
      bv.bq = bind_one(p + "attn.bq", blk.bq);
      bv.wk = bind_one(p + "attn.wk", blk.wk);
      bv.bk = bind_one(p + "attn.bk", blk.bk);
      bv.wv = bind_one(p + "attn.wv", blk.wv);
      bv.bv = bind_one(p + "attn.bv", blk.bv);
      bv.wo = bind_one(p + "attn.wo", blk.wo);
      bv.bo = bind_one(p + "attn.bo", blk.bo);
      bv.ln2_gamma = bind_one(p + "ln2.gamma", blk.ln2_gamma);
      bv.ln2_beta = bind_one(p + "ln2.beta", blk.ln2_beta);
      bv.w1 = bind_one(p + "mlp.w1", blk.w1);
      bv.b1 = bind_one(p + "mlp.b1", blk.b1);
      bv.w2 = bind_one(p + "mlp.w2", blk.w2);
      bv.b2 = bind_one(p + "mlp.b2", blk.b2);
      wv.blocks.push_back(bv);
    }
    wv.lnf_gamma = bind_one("final_norm.gamma", weights.lnf_gamma);
    wv.lnf_beta = bind_one("final_norm.beta", weights.lnf_beta);
    wv.head_w = bind_one("head.weight", weights.head_w);
    wv.head_b = bind_one("head.bias", weights.head_b);
    return build_loss(g, wv);
  };

  return gradient_check<D>(builder, std::move(leaf_values), eps);
}

} // namespace gilab
