#include <doctest.h>

#include <cstring>

#include "gilab/gradcheck.hpp"
#include "gilab/model.hpp"
#include "testutil.hpp"

using namespace gilab;

TEST_SUITE_BEGIN("model");

namespace {

ModelConfig small_cfg(int size = 16, int p = 4, bool mask_channel = true) {
  ModelConfig cfg;
  cfg.image_size = size;
  cfg.patch_size = p;
  cfg.token_dim = 32;
  cfg.num_heads = 4;
  cfg.num_blocks = 2;
  cfg.mask_channel = mask_channel;
  return cfg;
}

struct TestViews {
  std::array<Camera, 4> cams;
  std::array<Tensor<double>, 4> images, rays;
  Mask mask;

  explicit TestViews(const ModelConfig &cfg, std::uint64_t seed) {
    Rng rng(seed);
    const int s = cfg.image_size;
    mask = Mask({s, s});
    for (int i = 0; i < s; ++i)
      mask.at(s / 2, i) = 1;
    for (int v = 0; v < 4; ++v) {
      const double az = 0.3 + 1.5 * v;
      const Eigen::Vector3d eye(1.5 * std::cos(az), 1.5 * std::sin(az), 0.9);
      cams[std::size_t(v)] =
          Camera::look_at(eye, {0, 0, 0}, s * 0.9, s / 2.0, s / 2.0, s, s);
      images[std::size_t(v)] = Tensor<double>({s, s, 3});
      for (auto &x : images[std::size_t(v)].data)
        x = rng.uniform();
      rays[std::size_t(v)] = plucker_rays(cams[std::size_t(v)]);
    }
  }

  std::array<ViewInput<double>, 4> inputs(int ref_index, bool with_masks) const {
    std::array<ViewInput<double>, 4> out;
    for (int v = 0; v < 4; ++v) {
      out[std::size_t(v)].image = images[std::size_t(v)];
      out[std::size_t(v)].rays = rays[std::size_t(v)];
      out[std::size_t(v)].is_reference = v == ref_index;
      out[std::size_t(v)].mask = (with_masks && v != ref_index) ? &mask : nullptr;
    }
    return out;
  }
};

} // namespace

TEST_CASE("token grid arithmetic") {
  ModelConfig cfg;
  cfg.image_size = 64;
  cfg.patch_size = 4;
  CHECK(cfg.tokens_per_view() == 256);
  CHECK(4 * cfg.tokens_per_view() == 1024);
}

TEST_CASE("channel stack layout: rgb, plucker, mask") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 3);

  ViewInput<double> ref;
  ref.image = tv.images[0];
  ref.rays = tv.rays[0];
  ref.is_reference = true;
  const auto ref_channels = build_view_channels(ref, cfg);
  REQUIRE(ref_channels.shape == Shape{16, 16, 10});
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x) {
      CHECK(ref_channels.at(y, x, 9) == 0.0); // reference mask channel is all zeros
      for (int k = 0; k < 3; ++k)
        CHECK(ref_channels.at(y, x, k) == tv.images[0].at(y, x, k));
      for (int k = 0; k < 6; ++k)
        CHECK(ref_channels.at(y, x, 3 + k) == tv.rays[0].at(y, x, k));
    }

  ViewInput<double> inpaint;
  inpaint.image = tv.images[1];
  inpaint.rays = tv.rays[1];
  inpaint.is_reference = false;
  inpaint.mask = &tv.mask;
  const auto in_channels = build_view_channels(inpaint, cfg);
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x) {
      if (tv.mask.at(y, x)) {
        for (int k = 0; k < 3; ++k)
          CHECK(in_channels.at(y, x, k) == 0.5);
        CHECK(in_channels.at(y, x, 9) == 1.0);
      } else {
        CHECK(in_channels.at(y, x, 9) == 0.0);
        CHECK(in_channels.at(y, x, 0) == tv.images[1].at(y, x, 0));
      }
    }
}

TEST_CASE("size mismatch with the config is an error") {
  const ModelConfig cfg = small_cfg(16);
  ViewInput<double> v;
  v.image = Tensor<double>({8, 8, 3});
  v.rays = Tensor<double>({8, 8, 6});
  CHECK_THROWS_AS(build_view_channels(v, cfg), Error);
}

TEST_CASE("forward emits one gaussian per input pixel") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 5);
  auto weights = ModelWeights<double>::init(cfg, 1);
  Graph<double> g;
  auto wv = bind_weights(g, weights, false);
  auto fwd = model_forward(g, wv, tv.inputs(0, true), cfg);
  std::int64_t total = 0;
  for (int v = 0; v < 4; ++v) {
    REQUIRE(g.value(fwd.raw_maps[std::size_t(v)]).shape == Shape{16, 16, 12});
    total += 16 * 16;
  }
  CHECK(total == 4 * 16 * 16);
}

TEST_CASE("zero head yields mid-range activations") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 7);
  auto weights = ModelWeights<double>::init(cfg, 1); // head initialized to zero
  Graph<double> g;
  auto wv = bind_weights(g, weights, false);
  auto fwd = model_forward(g, wv, tv.inputs(0, true), cfg);
  for (std::int64_t i = 0; i < g.value(fwd.raw_maps[0]).size(); ++i)
    CHECK(g.value(fwd.raw_maps[0])[i] == 0.0);
  auto act = activate(g, fwd.raw_maps[0], tv.rays[0], tv.cams[0], cfg);
  CHECK(g.value(act.opacities)[0] == doctest::Approx(0.5));
  CHECK(g.value(act.rotations).at(0, 0) == doctest::Approx(1.0));
  CHECK(g.value(act.rotations).at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("activation maps raw parameters into their stated ranges") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 9);
  Graph<double> g;
  Tensor<double> raw({16, 16, 12});
  auto rawv = g.leaf(raw, false);
  auto act = activate(g, rawv, tv.rays[0], tv.cams[0], cfg);
  // raw zeros, near 0.1, far 4 -> distance 2.05 along every ray
  const auto &pos = g.value(act.positions);
  const Eigen::Vector3d c = tv.cams[0].center();
  for (std::int64_t i = 0; i < 16; ++i) {
    const Eigen::Vector3d p(pos.at(i, 0), pos.at(i, 1), pos.at(i, 2));
    CHECK((p - c).norm() == doctest::Approx(2.05).epsilon(1e-12));
  }

  // saturated raw distance clamps at far
  Tensor<double> raw_hi({16, 16, 12});
  for (std::int64_t i = 0; i < raw_hi.size(); i += 12)
    raw_hi[i] = 1000.0;
  auto act_hi = activate(g, g.leaf(raw_hi, false), tv.rays[0], tv.cams[0], cfg);
  const auto &pos_hi = g.value(act_hi.positions);
  const Eigen::Vector3d p0(pos_hi.at(0, 0), pos_hi.at(0, 1), pos_hi.at(0, 2));
  CHECK((p0 - c).norm() == doctest::Approx(cfg.far));
}

TEST_CASE("activated positions lie on their pixel rays") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 11);
  Rng rng(13);
  Tensor<double> raw({16, 16, 12});
  for (auto &v : raw.data)
    v = rng.normal();
  Graph<double> g;
  auto act = activate(g, g.leaf(raw, false), tv.rays[0], tv.cams[0], cfg);
  const auto &pos = g.value(act.positions);
  const Eigen::Vector3d c = tv.cams[0].center();
  for (std::int64_t i = 0; i < pos.shape[0]; ++i) {
    const Eigen::Vector3d p(pos.at(i, 0), pos.at(i, 1), pos.at(i, 2));
    const Eigen::Vector3d d(tv.rays[0][i * 6], tv.rays[0][i * 6 + 1], tv.rays[0][i * 6 + 2]);
    CHECK(((p - c).cross(d)).norm() < 1e-6);
  }
  // quaternions are unit, opacities and colors in (0,1), scales within bounds
  for (std::int64_t i = 0; i < pos.shape[0]; ++i) {
    Eigen::Vector4d q(g.value(act.rotations).at(i, 0), g.value(act.rotations).at(i, 1),
                      g.value(act.rotations).at(i, 2), g.value(act.rotations).at(i, 3));
    CHECK(q.norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(g.value(act.opacities)[i] > 0.0);
    CHECK(g.value(act.opacities)[i] < 1.0);
    for (int k = 0; k < 3; ++k) {
      CHECK(g.value(act.scales).at(i, k) > cfg.scale_min);
      CHECK(g.value(act.scales).at(i, k) < cfg.scale_max);
    }
  }
}

TEST_CASE("permuting inpaint views permutes the output maps") {
  const ModelConfig cfg = small_cfg();
  TestViews tv(cfg, 15);
  auto weights = ModelWeights<double>::init(cfg, 2);
  Rng rng(3);
  for (auto &v : weights.head_w.data)
    v = rng.normal(0.0, 0.05);

  auto run = [&](const std::array<int, 4> &order) {
    Graph<double> g;
    auto wv = bind_weights(g, weights, false);
    std::array<ViewInput<double>, 4> views;
    for (int slot = 0; slot < 4; ++slot) {
      const int src = order[std::size_t(slot)];
      views[std::size_t(slot)].image = tv.images[std::size_t(src)];
      views[std::size_t(slot)].rays = tv.rays[std::size_t(src)];
      views[std::size_t(slot)].is_reference = src == 0;
      views[std::size_t(slot)].mask = src == 0 ? nullptr : &tv.mask;
    }
    auto fwd = model_forward(g, wv, views, cfg);
    std::array<Tensor<double>, 4> maps;
    for (int v = 0; v < 4; ++v)
      maps[std::size_t(v)] = g.value(fwd.raw_maps[std::size_t(v)]);
    return maps;
  };

  const auto base = run({0, 1, 2, 3});
  const auto perm = run({0, 3, 1, 2}); // inpaint views rotated
  const std::array<int, 4> where = {0, 2, 3, 1}; // slot of view v in the permuted run
  for (int v = 0; v < 4; ++v) {
    const auto &a = base[std::size_t(v)];
    const auto &b = perm[std::size_t(where[std::size_t(v)])];
    double max_diff = 0;
    for (std::int64_t i = 0; i < a.size(); ++i)
      max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
    CHECK(max_diff < 1e-9);
  }
}

TEST_CASE("patchifier expansion averages the rgb blocks") {
  ModelConfig cfg = small_cfg(16, 4, false);
  auto w = ModelWeights<double>::init(cfg, 4);
  const std::int64_t p2 = 16;
  // plant a recognizable pattern in one output unit
  w.patch_w.at(0 * p2 + 3, 7) = 0.3;
  w.patch_w.at(1 * p2 + 3, 7) = 0.6;
  w.patch_w.at(2 * p2 + 3, 7) = 0.9;
  const auto w2 = expand_patchifier_for_masks(w);
  CHECK(w2.cfg.mask_channel);
  CHECK(w2.patch_w.shape == Shape{10 * p2, 32});
  CHECK(w2.patch_w.at(9 * p2 + 3, 7) == doctest::Approx(0.6));
  // original rows copied bit-exactly
  CHECK(std::memcmp(w2.patch_w.data.data(), w.patch_w.data.data(),
                    std::size_t(9 * p2 * 32) * sizeof(double)) == 0);

  CHECK_THROWS_AS(expand_patchifier_for_masks(w2), Error);
}

TEST_CASE("stage-2 forward with zero mask channel equals stage-1 bit-exactly") {
  ModelConfig cfg1 = small_cfg(16, 4, false);
  TestViews tv(cfg1, 21);
  auto w1 = ModelWeights<float>::init(cfg1, 6);
  Rng rng(8);
  for (auto &v : w1.head_w.data)
    v = float(rng.normal(0.0, 0.05));
  const auto w2 = expand_patchifier_for_masks(w1);

  auto run = [&](const ModelWeights<float> &w, const ModelConfig &cfg) {
    Graph<float> g;
    auto wv = bind_weights(g, w, false);
    std::array<ViewInput<float>, 4> views;
    for (int v = 0; v < 4; ++v) {
      views[std::size_t(v)].image = tv.images[std::size_t(v)].cast<float>();
      views[std::size_t(v)].rays = tv.rays[std::size_t(v)].cast<float>();
      views[std::size_t(v)].is_reference = v == 0;
      views[std::size_t(v)].mask = nullptr; // no masks: stage-2 feeds zeros
    }
    auto fwd = model_forward(g, wv, views, cfg);
    std::array<Tensor<float>, 4> maps;
    for (int v = 0; v < 4; ++v)
      maps[std::size_t(v)] = g.value(fwd.raw_maps[std::size_t(v)]);
    return maps;
  };

  const auto a = run(w1, cfg1);
  const auto b = run(w2, w2.cfg);
  for (int v = 0; v < 4; ++v)
    CHECK(std::memcmp(a[std::size_t(v)].data.data(), b[std::size_t(v)].data.data(),
                      a[std::size_t(v)].data.size() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint round-trip preserves expanded weights bit-exactly") {
  testutil::TempDir dir("model_ckpt");
  ModelConfig cfg = small_cfg(16, 4, false);
  auto w1 = ModelWeights<float>::init(cfg, 12);
  const auto w2 = expand_patchifier_for_masks(w1);
  save_checkpoint(w2.to_checkpoint(), dir.path() / "m.ckpt");
  const auto back =
      ModelWeights<float>::from_checkpoint(load_checkpoint(dir.path() / "m.ckpt"), w2.cfg);
  auto wa = const_cast<ModelWeights<float> &>(w2).named_parameters();
  auto wb = const_cast<ModelWeights<float> &>(back).named_parameters();
  REQUIRE(wa.size() == wb.size());
  for (std::size_t i = 0; i < wa.size(); ++i) {
    CHECK(wa[i].first == wb[i].first);
    CHECK(std::memcmp(wa[i].second->data.data(), wb[i].second->data.data(),
                      wa[i].second->data.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("end-to-end gradients match finite differences") {
  CHECK(run_model_e2e_fd_check() < 1e-3);
}

TEST_SUITE_END();
