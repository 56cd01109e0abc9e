#include <doctest.h>

#include "gilab/benchmark.hpp"
#include "gilab/metrics.hpp"
#include "testutil.hpp"

using namespace gilab;

TEST_SUITE_BEGIN("metrics");

static Tensor<float> random_image(Rng &rng, int h = 16, int w = 16) {
  Tensor<float> img({h, w, 3});
  for (auto &v : img.data)
    v = float(rng.uniform());
  return img;
}

TEST_CASE("psnr of identical images caps at 99 dB") {
  Rng rng(1);
  const auto a = random_image(rng);
  CHECK(psnr(a, a) == 99.0);
}

TEST_CASE("uniform error of 0.1 gives exactly 20 dB") {
  Tensor<float> a = Tensor<float>::full({8, 8, 3}, 0.4f);
  Tensor<float> b = Tensor<float>::full({8, 8, 3}, 0.5f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));
}

TEST_CASE("mask restricts psnr to the selected pixels") {
  Rng rng(2);
  auto a = random_image(rng);
  auto b = a;
  // corrupt only the left half; mask selects the intact right half
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        b.at(y, x, c) = float(rng.uniform());
  Mask right({16, 16});
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 8; x < 16; ++x)
      right.at(y, x) = 1;
  CHECK(psnr(a, b, &right) == 99.0);
  CHECK(psnr(a, b) < 99.0);
}

TEST_CASE("empty masks and mismatched shapes are errors") {
  Rng rng(3);
  const auto a = random_image(rng);
  Mask empty({16, 16});
  CHECK_THROWS_AS(psnr(a, a, &empty), Error);
  CHECK_THROWS_AS(psnr(a, random_image(rng, 8, 8)), Error);
  CHECK_THROWS_AS(ssim(a, a, &empty), Error);
}

TEST_CASE("ssim of identical images is one") {
  Rng rng(4);
  const auto a = random_image(rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  // constant image vs its negative is the same constant image
  Tensor<float> half = Tensor<float>::full({16, 16, 3}, 0.5f);
  Tensor<float> neg(half.shape);
  for (std::int64_t i = 0; i < half.size(); ++i)
    neg[i] = 1.0f - half[i];
  CHECK(ssim(half, neg) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim is symmetric") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_image(rng, 12, 14);
    const auto b = random_image(rng, 12, 14);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("ssim rejects images smaller than the window") {
  Rng rng(6);
  CHECK_THROWS_AS(ssim(random_image(rng, 8, 8), random_image(rng, 8, 8)), Error);
}

TEST_CASE("full-mask metrics agree with unmasked metrics") {
  Rng rng(7);
  const auto a = random_image(rng);
  const auto b = random_image(rng);
  Mask full = Tensor<std::uint8_t>::full({16, 16}, 1);
  CHECK(std::abs(psnr(a, b, &full) - psnr(a, b)) < 1e-12);
  CHECK(std::abs(ssim(a, b, &full) - ssim(a, b)) < 1e-12);
}

static double spearman(const std::vector<double> &x, const std::vector<double> &y) {
  auto ranks = [](const std::vector<double> &v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      r[idx[i]] = double(i);
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

TEST_CASE("increasing noise strictly degrades both metrics") {
  Rng rng(8);
  const auto base = random_image(rng, 24, 24);
  std::vector<double> amps, psnrs, ssims;
  for (int a = 1; a <= 20; ++a) {
    const double amp = 0.01 * a;
    double p = 0, s = 0;
    for (int seed = 0; seed < 10; ++seed) {
      Rng noise_rng(std::uint64_t(1000 * a + seed));
      Tensor<float> noisy = base;
      for (auto &v : noisy.data)
        v = float(std::clamp(double(v) + amp * noise_rng.normal(), 0.0, 1.0));
      p += psnr(base, noisy);
      s += ssim(base, noisy);
    }
    amps.push_back(amp);
    psnrs.push_back(p / 10);
    ssims.push_back(s / 10);
  }
  CHECK(spearman(amps, psnrs) < -0.9);
  CHECK(spearman(amps, ssims) < -0.9);
}

TEST_CASE("reconstruction protocol omits masked metrics") {
  SynthConfig scfg;
  scfg.n_frames = 6;
  scfg.image_size = 24;
  scfg.n_objects = 1;
  SceneDataset data({gen_scene(1, scfg), gen_scene(2, scfg)});
  ModelConfig mcfg;
  mcfg.image_size = 24;
  mcfg.patch_size = 4;
  mcfg.token_dim = 32;
  mcfg.num_heads = 4;
  mcfg.num_blocks = 1;
  mcfg.mask_channel = true;
  auto weights = ModelWeights<float>::init(mcfg, 3);
  const EvalReport rec = run_benchmark(weights, data, EvalProtocol::reconstruction);
  CHECK_FALSE(rec.m_psnr.has_value());
  CHECK(rec.scenes.size() == 2);
  const auto j = rec.to_json();
  CHECK_FALSE(j["aggregate"].contains("m_psnr"));

  const EvalReport ref = run_benchmark(weights, data, EvalProtocol::gt_reference, 5);
  CHECK(ref.m_psnr.has_value());
}

TEST_CASE("a briefly trained model beats the untrained one on masked psnr") {
  SynthConfig scfg;
  scfg.image_size = 24;
  scfg.n_objects = 2;
  scfg.n_frames = 10;
  std::vector<SceneClip> train_clips, eval_clips;
  for (int i = 0; i < 3; ++i)
    train_clips.push_back(gen_scene(std::uint64_t(100 + i), scfg));
  for (int i = 0; i < 3; ++i)
    eval_clips.push_back(gen_scene(std::uint64_t(500 + i), scfg));
  SceneDataset train_data(std::move(train_clips)), eval_data(std::move(eval_clips));

  ModelConfig mcfg;
  mcfg.image_size = 24;
  mcfg.patch_size = 4;
  mcfg.token_dim = 48;
  mcfg.num_heads = 2;
  mcfg.num_blocks = 2;
  mcfg.mask_channel = false;
  auto model = ModelWeights<float>::init(mcfg, 3);
  testutil::TempDir dir("paired");
  TrainConfig tc;
  tc.stage = 1;
  tc.steps = 420;
  tc.batch_size = 2;
  tc.lr = 1e-3;
  tc.n_supervision = 4;
  tc.seed = 9;
  tc.log_every = 0;
  tc.checkpoint_every = 0;
  train_stage(model, tc, train_data, dir.path() / "s1");
  auto model2 = expand_patchifier_for_masks(model);
  TrainConfig tc2 = tc;
  tc2.stage = 2;
  tc2.steps = 180;
  tc2.lr = 5e-4;
  tc2.seed = 10;
  train_stage(model2, tc2, train_data, dir.path() / "s2");

  const auto untrained = ModelWeights<float>::init(model2.cfg, 42);
  const auto trained_report = run_benchmark(model2, eval_data, EvalProtocol::gt_reference, 5);
  const auto untrained_report =
      run_benchmark(untrained, eval_data, EvalProtocol::gt_reference, 5);
  REQUIRE(trained_report.scenes.size() == untrained_report.scenes.size());
  for (std::size_t i = 0; i < trained_report.scenes.size(); ++i) {
    REQUIRE(trained_report.scenes[i].m_psnr.has_value());
    INFO("scene ", i);
    CHECK(*trained_report.scenes[i].m_psnr > *untrained_report.scenes[i].m_psnr);
  }
}

TEST_CASE("benchmark reports are deterministic") {
  SynthConfig scfg;
  scfg.n_frames = 6;
  scfg.image_size = 24;
  scfg.n_objects = 1;
  SceneDataset data({gen_scene(9, scfg)});
  ModelConfig mcfg;
  mcfg.image_size = 24;
  mcfg.patch_size = 4;
  mcfg.token_dim = 32;
  mcfg.num_heads = 4;
  mcfg.num_blocks = 1;
  mcfg.mask_channel = true;
  auto weights = ModelWeights<float>::init(mcfg, 3);
  const EvalReport a = run_benchmark(weights, data, EvalProtocol::gt_reference, 7);
  const EvalReport b = run_benchmark(weights, data, EvalProtocol::gt_reference, 7);
  REQUIRE(a.scenes.size() == b.scenes.size());
  CHECK(a.psnr_value == b.psnr_value);
  CHECK(a.ssim_value == b.ssim_value);
  CHECK(a.m_psnr == b.m_psnr);
  CHECK(a.config_fingerprint == b.config_fingerprint);
}

TEST_SUITE_END();
