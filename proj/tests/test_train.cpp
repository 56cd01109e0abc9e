#include <doctest.h>

#include <cstring>
#include <set>

#include "gilab/train.hpp"
#include "testutil.hpp"

using namespace gilab;

TEST_SUITE_BEGIN("train");

namespace {

SynthConfig clip_cfg(int frames = 15, int size = 24, int objects = 2) {
  SynthConfig c;
  c.n_frames = frames;
  c.image_size = size;
  c.n_objects = objects;
  return c;
}

ModelConfig tiny_model_cfg(int size = 24, bool mask_channel = false) {
  ModelConfig c;
  c.image_size = size;
  c.patch_size = 4;
  c.token_dim = 32;
  c.num_heads = 4;
  c.num_blocks = 2;
  c.mask_channel = mask_channel;
  return c;
}

TrainConfig quick_train_cfg(int stage, int steps, std::uint64_t seed = 7) {
  TrainConfig c;
  c.stage = stage;
  c.steps = steps;
  c.batch_size = 2;
  c.n_supervision = 3;
  c.lr = 3e-4;
  c.seed = seed;
  c.log_every = 5;
  c.checkpoint_every = 0;
  c.threads = 1;
  return c;
}

} // namespace

TEST_CASE("training samples draw supervision from the n-4 leftovers") {
  const SceneClip clip = gen_scene(1, clip_cfg());
  Rng rng(3);
  SampleOptions so;
  so.with_masks = true;
  so.n_supervision = 8;
  const TrainingSample s = build_training_sample(clip, rng, so);
  CHECK(s.input_indices == std::array<int, 4>{0, 4, 9, 14});
  CHECK(s.supervision_indices.size() == 8);
  std::set<int> inputs(s.input_indices.begin(), s.input_indices.end());
  std::set<int> seen;
  for (int f : s.supervision_indices) {
    CHECK(inputs.count(f) == 0);
    CHECK(f >= 0);
    CHECK(f < 15);
    seen.insert(f);
  }
  CHECK(seen.size() == s.supervision_indices.size()); // without replacement
  CHECK(s.supervision_masks.size() == s.supervision_indices.size());
}

TEST_CASE("reference view bytes stay identical to the stored frame") {
  const SceneClip clip = gen_scene(2, clip_cfg());
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    SampleOptions so;
    so.with_masks = true;
    const TrainingSample s = build_training_sample(clip, rng, so);
    const int ref_frame = s.input_indices[std::size_t(s.reference_slot)];
    CHECK(std::memcmp(s.images[std::size_t(s.reference_slot)].data.data(),
                      clip.frames[std::size_t(ref_frame)].image.data.data(),
                      s.images[std::size_t(s.reference_slot)].data.size() * 4) == 0);
    CHECK(mask_area(s.masks.masks[std::size_t(s.reference_slot)]) == 0);
  }
}

TEST_CASE("generated masks never exceed half the frame") {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const SceneClip clip = gen_scene(rng.next_u64(), clip_cfg());
    Rng sr(rng.next_u64());
    SampleOptions so;
    so.with_masks = true;
    const TrainingSample s = build_training_sample(clip, sr, so);
    for (int v = 0; v < 4; ++v)
      CHECK(mask_fraction(s.masks.masks[std::size_t(v)]) <= 0.5);
  }
}

TEST_CASE("object masks fall back to geometric when no track survives") {
  // a clip without any instances cannot supply object masks
  const SceneClip clip = gen_scene(77, clip_cfg(15, 24, 0));
  bool saw_fallback = false;
  for (std::uint64_t seed = 0; seed < 40 && !saw_fallback; ++seed) {
    Rng rng(seed);
    SampleOptions so;
    so.with_masks = true;
    const TrainingSample s = build_training_sample(clip, rng, so);
    if (s.object_fallback) {
      saw_fallback = true;
      CHECK(s.masks.mask_type == MaskType::geometric);
    }
  }
  CHECK(saw_fallback);
}

TEST_CASE("sample construction is deterministic") {
  const SceneClip clip = gen_scene(3, clip_cfg());
  SampleOptions so;
  so.with_masks = true;
  Rng r1(42), r2(42);
  const TrainingSample a = build_training_sample(clip, r1, so);
  const TrainingSample b = build_training_sample(clip, r2, so);
  CHECK(a.reference_slot == b.reference_slot);
  CHECK(a.supervision_indices == b.supervision_indices);
  CHECK(a.masks.mask_type == b.masks.mask_type);
  for (int v = 0; v < 4; ++v)
    CHECK(a.masks.masks[std::size_t(v)].data == b.masks.masks[std::size_t(v)].data);
}

TEST_CASE("photometric loss is zero for identical images and exact for offsets") {
  const auto bank = FeatureBank<double>::make();
  Tensor<double> img({16, 16, 3});
  Rng rng(4);
  for (auto &v : img.data)
    v = rng.uniform(0.2, 0.8);
  Graph<double> g;
  auto rendered = g.leaf(img, false);
  const auto same = photometric_loss(g, rendered, img, bank, 0.5);
  CHECK(g.value(same.total)[0] == 0.0);
  CHECK(g.value(same.mse)[0] == 0.0);

  Tensor<double> shifted = img;
  for (auto &v : shifted.data)
    v += 0.1;
  const auto off = photometric_loss(g, rendered, shifted, bank, 0.5);
  CHECK(g.value(off.mse)[0] == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(g.value(off.total)[0] >= g.value(off.mse)[0]);
}

TEST_CASE("photometric loss gradient passes the finite-difference check") {
  const auto bank = FeatureBank<double>::make();
  Rng rng(5);
  Tensor<double> target({8, 8, 3});
  for (auto &v : target.data)
    v = rng.uniform();
  Tensor<double> start({8, 8, 3});
  for (auto &v : start.data)
    v = rng.uniform();
  const double err = gradient_check<double>(
      [&](Graph<double> &g, const std::vector<Var<double>> &leaves) {
        return photometric_loss(g, leaves[0], target, bank, 0.5).total;
      },
      {start}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("zero training steps leaves the initialization untouched") {
  testutil::TempDir dir("train0");
  SceneDataset data({gen_scene(5, clip_cfg())});
  auto model = ModelWeights<float>::init(tiny_model_cfg(), 11);
  const auto init_ck = model.to_checkpoint();
  const auto res = train_stage(model, quick_train_cfg(1, 0), data, dir.path());
  const auto final_ck = load_checkpoint(res.final_checkpoint);
  REQUIRE(final_ck.entries.size() == init_ck.entries.size());
  for (std::size_t i = 0; i < init_ck.entries.size(); ++i)
    CHECK(std::memcmp(final_ck.entries[i].tensor.data.data(),
                      init_ck.entries[i].tensor.data.data(),
                      init_ck.entries[i].tensor.data.size() * 4) == 0);
}

TEST_CASE("supervision gradients reach all four input views") {
  const SceneClip clip = gen_scene(6, clip_cfg());
  ModelConfig mcfg = tiny_model_cfg(24, true);
  auto model = ModelWeights<float>::init(mcfg, 13);
  Rng wr(14);
  for (auto &v : model.head_w.data)
    v = float(wr.normal(0.0, 0.05));
  Rng rng(7);
  SampleOptions so;
  so.with_masks = true;
  so.n_supervision = 2;
  const TrainingSample sample = build_training_sample(clip, rng, so);
  TrainConfig tc = quick_train_cfg(2, 1);
  const auto bank = FeatureBank<float>::make();
  Graph<float> g;
  auto wv = bind_weights(g, model, true);
  auto fwd_maps = model_forward(
      g, wv,
      [&] {
        std::array<ViewInput<float>, 4> views;
        for (int v = 0; v < 4; ++v) {
          views[std::size_t(v)].image = sample.images[std::size_t(v)].cast<float>();
          views[std::size_t(v)].rays =
              plucker_rays(clip.frames[std::size_t(sample.input_indices[std::size_t(v)])]
                               .camera)
                  .cast<float>();
          views[std::size_t(v)].is_reference = v == sample.reference_slot;
          views[std::size_t(v)].mask =
              v == sample.reference_slot ? nullptr : &sample.masks.masks[std::size_t(v)];
        }
        return views;
      }(),
      mcfg);
  // render one supervision view and backprop a photometric loss
  std::vector<Var<float>> pos, sc, qt, op, co;
  for (int v = 0; v < 4; ++v) {
    const Camera &cam = clip.frames[std::size_t(sample.input_indices[std::size_t(v)])].camera;
    auto act = activate(g, fwd_maps.raw_maps[std::size_t(v)], plucker_rays(cam).cast<float>(),
                        cam, mcfg);
    pos.push_back(act.positions);
    sc.push_back(act.scales);
    qt.push_back(act.rotations);
    op.push_back(act.opacities);
    co.push_back(act.colors);
  }
  const int f = sample.supervision_indices[0];
  auto rgb = render_rgb_node(g, concat<float>(pos, 0), concat<float>(sc, 0),
                             concat<float>(qt, 0), concat<float>(op, 0),
                             concat<float>(co, 0), clip.frames[std::size_t(f)].camera);
  auto loss = photometric_loss(g, rgb, clip.frames[std::size_t(f)].image.cast<float>(),
                               bank, float(tc.feature_weight))
                  .total;
  g.backward(loss);
  for (int v = 0; v < 4; ++v) {
    double norm = 0;
    for (auto x : g.grad(fwd_maps.raw_maps[std::size_t(v)]).data)
      norm += double(x) * double(x);
    INFO("view ", v);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("training is deterministic and thread-count invariant") {
  SceneDataset data({gen_scene(8, clip_cfg())});
  auto run = [&](int threads) {
    auto model = ModelWeights<float>::init(tiny_model_cfg(), 21);
    testutil::TempDir dir("det");
    TrainConfig tc = quick_train_cfg(1, 3);
    tc.threads = threads;
    train_stage(model, tc, data, dir.path());
    return model.to_checkpoint();
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(2);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(std::memcmp(a.entries[i].tensor.data.data(), b.entries[i].tensor.data.data(),
                      a.entries[i].tensor.data.size() * 4) == 0);
    CHECK(std::memcmp(a.entries[i].tensor.data.data(), c.entries[i].tensor.data.data(),
                      a.entries[i].tensor.data.size() * 4) == 0);
  }
}

TEST_CASE("a short stage-1 run reduces the training loss") {
  SceneDataset data({gen_scene(9, clip_cfg(15, 24, 1))});
  auto model = ModelWeights<float>::init(tiny_model_cfg(), 31);
  testutil::TempDir dir("loss");
  TrainConfig tc = quick_train_cfg(1, 60, 5);
  tc.lr = 1e-3;
  tc.log_every = 10;
  const auto res = train_stage(model, tc, data, dir.path());
  REQUIRE(res.rows.size() >= 3);
  CHECK(res.rows.back().loss < res.rows.front().loss);
  CHECK(std::filesystem::exists(dir.path() / "metrics.csv"));
  // csv header contract
  std::ifstream is(dir.path() / "metrics.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,loss,mse,feature,psnr,masked_psnr");
}

#ifdef NDEBUG
TEST_CASE("non-finite losses abort with a replayable dump") {
  // a poisoned pixel in a supervision frame forces a NaN loss at step 0
  SceneClip clip = gen_scene(10, clip_cfg());
  for (int f : {5, 6, 7, 8, 10, 11, 12, 13})
    clip.frames[std::size_t(f)].image[0] = std::numeric_limits<float>::quiet_NaN();
  SceneDataset data({std::move(clip)});
  auto run = [&] {
    auto model = ModelWeights<float>::init(tiny_model_cfg(), 41);
    testutil::TempDir dir("nan");
    TrainConfig tc = quick_train_cfg(1, 5);
    try {
      train_stage(model, tc, data, dir.path());
      return std::string("no error");
    } catch (const Error &e) {
      CHECK(std::filesystem::exists(dir.path() / "nan_dump.json"));
      return std::string(e.what());
    }
  };
  auto abort_point = [&] {
    const std::string msg = run();
    return msg.substr(0, msg.find(';'));
  };
  const std::string first = abort_point();
  CHECK(first.find("step 0") != std::string::npos);
  CHECK(abort_point() == first); // replay reproduces the aborting step
}
#endif

TEST_CASE("inpainting inference is a no-op on unmasked inputs") {
  const SceneClip clip = gen_scene(11, clip_cfg());
  ModelConfig mcfg = tiny_model_cfg(24, true);
  auto model = ModelWeights<float>::init(mcfg, 51);
  const auto idx = select_input_views(clip.n_frames());
  std::array<Camera, 4> cams;
  std::array<Tensor<float>, 4> images;
  for (int v = 0; v < 4; ++v) {
    cams[std::size_t(v)] = clip.frames[std::size_t(idx[std::size_t(v)])].camera;
    images[std::size_t(v)] = clip.frames[std::size_t(idx[std::size_t(v)])].image;
  }
  MaskSet empty;
  empty.reference_index = 0;
  for (int v = 0; v < 4; ++v)
    empty.masks[std::size_t(v)] = Mask({24, 24});

  const auto plain = infer_inpaint(model, cams, images, empty);
  const Tensor<float> ref_copy = images[0];
  const auto with_ref = infer_inpaint(model, cams, images, empty, &ref_copy);
  REQUIRE(plain.gaussians.size() == with_ref.gaussians.size());
  CHECK(plain.gaussians.size() == 4u * 24 * 24);
  for (std::size_t i = 0; i < plain.gaussians.size(); i += 97)
    CHECK((plain.gaussians[i].position - with_ref.gaussians[i].position).norm() == 0.0);

  // disjoint multi-region masks are accepted in one pass
  MaskSet multi = gen_random_masks(3, 24, 3, 0);
  const auto inp = infer_inpaint(model, cams, images, multi);
  CHECK(inp.gaussians.size() == 4u * 24 * 24);

  // timing phases account for the whole pass
  CHECK(inp.timing.total() ==
        doctest::Approx(inp.timing.tokenize_s + inp.timing.transformer_s +
                        inp.timing.decode_s));

  // misaligned masks are rejected
  MaskSet bad = empty;
  bad.masks[1] = Mask({8, 8});
  CHECK_THROWS_AS(infer_inpaint(model, cams, images, bad), Error);
}

TEST_SUITE_END();
