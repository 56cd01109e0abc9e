#include <doctest.h>

#include <cstring>
#include <fstream>

#include "gilab/scene.hpp"
#include "testutil.hpp"

using namespace gilab;

TEST_SUITE_BEGIN("scene");

static SynthConfig tiny_config() {
  SynthConfig cfg;
  cfg.n_frames = 6;
  cfg.image_size = 32;
  cfg.n_objects = 2;
  return cfg;
}

TEST_CASE("png round-trip preserves 8-bit data") {
  testutil::TempDir dir("png");
  Rng rng(3);
  Tensor<float> img({17, 23, 3});
  for (auto &v : img.data)
    v = float(rng.uniform());
  const auto path = dir.path() / "img.png";
  write_png_rgb(path, img);
  const auto back = read_png_rgb(path);
  REQUIRE(back.shape == img.shape);
  for (std::int64_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  // a second write of the decoded image is lossless
  write_png_rgb(path, back);
  const auto again = read_png_rgb(path);
  CHECK(again.data == back.data);
}

TEST_CASE("mask png round-trip is exact") {
  testutil::TempDir dir("maskpng");
  Mask m({9, 13});
  Rng rng(8);
  for (auto &v : m.data)
    v = rng.uniform() < 0.4 ? 1 : 0;
  write_png_mask(dir.path() / "m.png", m);
  CHECK(read_png_mask(dir.path() / "m.png").data == m.data);
}

TEST_CASE("depth file round-trip is bit-exact") {
  testutil::TempDir dir("depth");
  Tensor<float> d({11, 7});
  Rng rng(4);
  for (auto &v : d.data)
    v = float(rng.uniform(0.01, 5.0));
  write_depth(dir.path() / "d.gidpth", d);
  const auto back = read_depth(dir.path() / "d.gidpth");
  REQUIRE(back.shape == d.shape);
  CHECK(std::memcmp(back.data.data(), d.data.data(), d.data.size() * 4) == 0);
}

TEST_CASE("scene generation is deterministic per seed") {
  const SceneClip a = gen_scene(11, tiny_config());
  const SceneClip b = gen_scene(11, tiny_config());
  REQUIRE(a.n_frames() == b.n_frames());
  for (int f = 0; f < a.n_frames(); ++f) {
    CHECK(a.frames[std::size_t(f)].image.data == b.frames[std::size_t(f)].image.data);
    CHECK(a.depth[std::size_t(f)].data == b.depth[std::size_t(f)].data);
    CHECK((a.frames[std::size_t(f)].camera.center() -
           b.frames[std::size_t(f)].camera.center())
              .norm() == 0.0);
  }
  const SceneClip c = gen_scene(12, tiny_config());
  CHECK(a.frames[0].image.data != c.frames[0].image.data);
}

TEST_CASE("scene without objects has empty instance masks and smooth depth") {
  SynthConfig cfg = tiny_config();
  cfg.n_objects = 0;
  const SceneClip clip = gen_scene(5, cfg);
  CHECK(clip.n_instances == 0);
  for (const auto &frame_masks : clip.instance_masks)
    CHECK(frame_masks.empty());
  // depth is positive and below far wherever the floor is visible
  for (const auto &d : clip.depth)
    for (auto v : d.data) {
      CHECK(v > 0.0f);
      CHECK(v <= float(cfg.far));
    }
}

TEST_CASE("cameras of a generated clip are normalized") {
  const SceneClip clip = gen_scene(21, tiny_config());
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  double max_abs = 0;
  for (const auto &f : clip.frames) {
    mean += f.camera.center();
    max_abs = std::max(max_abs, f.camera.center().cwiseAbs().maxCoeff());
  }
  CHECK((mean / clip.n_frames()).norm() < 1e-9);
  CHECK(max_abs <= 1.0 + 1e-12);
}

TEST_CASE("re-rendering the gt gaussians reproduces stored frames bit-exactly") {
  const SceneClip clip = gen_scene(33, tiny_config());
  RenderOptions opts;
  opts.want_instance = true;
  for (int f = 0; f < clip.n_frames(); ++f) {
    const auto out = render(clip.gt_gaussians, clip.frames[std::size_t(f)].camera, opts);
    for (std::int64_t i = 0; i < out.rgb.size(); ++i) {
      const float expected = float(std::clamp(out.rgb[i], 0.0, 1.0));
      REQUIRE(std::memcmp(&expected, &clip.frames[std::size_t(f)].image[i], 4) == 0);
    }
    const auto depth32 = out.depth.cast<float>();
    REQUIRE(std::memcmp(depth32.data.data(), clip.depth[std::size_t(f)].data.data(),
                        depth32.data.size() * 4) == 0);
    // instance masks equal the renderer's argmax output
    for (int id = 1; id <= clip.n_instances; ++id)
      for (std::int64_t i = 0; i < out.instance.size(); ++i)
        REQUIRE((out.instance[i] == id) ==
                (clip.instance_masks[std::size_t(f)][std::size_t(id - 1)][i] == 1));
  }
}

TEST_CASE("depth is positive and bounded wherever alpha is meaningful") {
  const SceneClip clip = gen_scene(44, tiny_config());
  RenderOptions opts;
  for (int f = 0; f < clip.n_frames(); ++f) {
    const auto out = render(clip.gt_gaussians, clip.frames[std::size_t(f)].camera, opts);
    for (std::int64_t i = 0; i < out.alpha.size(); ++i)
      if (out.alpha[i] > 1e-6) {
        CHECK(clip.depth[std::size_t(f)][i] > 0.0f);
        CHECK(clip.depth[std::size_t(f)][i] <= float(opts.far));
      }
  }
}

TEST_CASE("scene directory round-trip") {
  testutil::TempDir dir("scene");
  const SceneClip clip = gen_scene(55, tiny_config());
  write_scene(clip, dir.path());
  const SceneClip back = read_scene(dir.path());
  REQUIRE(back.n_frames() == clip.n_frames());
  CHECK(back.n_instances == clip.n_instances);
  for (int f = 0; f < clip.n_frames(); ++f) {
    const Camera &a = clip.frames[std::size_t(f)].camera;
    const Camera &b = back.frames[std::size_t(f)].camera;
    CHECK(std::abs(a.fx - b.fx) < 1e-15);
    CHECK(std::abs(a.cx - b.cx) < 1e-15);
    CHECK((a.R - b.R).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((a.t - b.t).cwiseAbs().maxCoeff() < 1e-15);
    // depth bit-exact
    CHECK(std::memcmp(back.depth[std::size_t(f)].data.data(),
                      clip.depth[std::size_t(f)].data.data(),
                      clip.depth[std::size_t(f)].data.size() * 4) == 0);
    // images within 8-bit quantization
    for (std::int64_t i = 0; i < clip.frames[std::size_t(f)].image.size(); ++i)
      CHECK(std::abs(back.frames[std::size_t(f)].image[i] -
                     clip.frames[std::size_t(f)].image[i]) <= 0.5f / 255.0f + 1e-6f);
    // instance masks exact
    for (int id = 0; id < clip.n_instances; ++id)
      CHECK(back.instance_masks[std::size_t(f)][std::size_t(id)].data ==
            clip.instance_masks[std::size_t(f)][std::size_t(id)].data);
  }
}

TEST_CASE("missing scene.json is a descriptive error") {
  testutil::TempDir dir("noscene");
  try {
    read_scene(dir.path());
    FAIL("expected error");
  } catch (const Error &e) {
    CHECK(std::string(e.what()).find("scene.json not found") != std::string::npos);
  }
}

TEST_CASE("truncated depth file names the frame") {
  testutil::TempDir dir("truncdepth");
  const SceneClip clip = gen_scene(66, tiny_config());
  write_scene(clip, dir.path());
  const auto bad = dir.path() / "depth" / "0004.gidpth";
  std::filesystem::resize_file(bad, std::filesystem::file_size(bad) / 2);
  try {
    read_scene(dir.path());
    FAIL("expected error");
  } catch (const Error &e) {
    const std::string msg = e.what();
    CHECK(msg.find("frame 4") != std::string::npos);
    CHECK(msg.find("0004.gidpth") != std::string::npos);
  }
}

TEST_CASE("missing camera field names frame and field") {
  testutil::TempDir dir("badjson");
  const SceneClip clip = gen_scene(77, tiny_config());
  write_scene(clip, dir.path());
  // rewrite scene.json without 'fy' on frame 2
  std::ifstream is(dir.path() / "scene.json");
  nlohmann::json j;
  is >> j;
  is.close();
  j["frames"][2].erase("fy");
  std::ofstream os(dir.path() / "scene.json");
  os << j.dump();
  os.close();
  try {
    read_scene(dir.path());
    FAIL("expected error");
  } catch (const Error &e) {
    const std::string msg = e.what();
    CHECK(msg.find("frame 2") != std::string::npos);
    CHECK(msg.find("'fy'") != std::string::npos);
  }
}

TEST_SUITE_END();
