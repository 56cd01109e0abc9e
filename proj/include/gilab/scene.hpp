#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gilab/camera.hpp"
#include "gilab/image_io.hpp"
#include "gilab/masks.hpp"
#include "gilab/splat.hpp"

namespace gilab {

struct SceneFrame {
  Camera camera;
  Tensor<float> image; // HxWx3 in [0,1]
  int frame_index = 0;
};

// A posed multi-view clip with exact depth and instance labels. Everything is
// expressed in the normalized world: camera centers have zero mean and max
// |coordinate| 1, and gt_gaussians live in the same frame, so renders of the
// stored gaussians reproduce the stored images exactly.
struct SceneClip {
  std::vector<SceneFrame> frames;
  std::vector<Gaussian3D> gt_gaussians;
  std::vector<std::vector<Mask>> instance_masks; // [frame][instance_id - 1]
  std::vector<Tensor<float>> depth;              // [frame]
  int n_instances = 0;

  int n_frames() const { return int(frames.size()); }
  int image_size() const { return frames.empty() ? 0 : frames[0].camera.width; }
  std::vector<Camera> cameras() const {
    std::vector<Camera> out;
    out.reserve(frames.size());
    for (const auto &f : frames)
      out.push_back(f.camera);
    return out;
  }
};

enum class BackgroundStyle { smooth, banded };

struct SynthConfig {
  int n_frames = 15;
  int image_size = 64;
  int n_objects = 3;
  BackgroundStyle background_style = BackgroundStyle::smooth;
  double far = 4.0;
  int render_threads = 1;
};

namespace synth_detail {

// Low-frequency color field from a handful of random sinusoids.
struct ColorField {
  std::array<double, 3> freq_x{}, freq_y{}, phase{}, base{}, amp{};
  bool banded = false;

  static ColorField make(Rng &rng, BackgroundStyle style) {
    ColorField f;
    f.banded = style == BackgroundStyle::banded;
    for (int c = 0; c < 3; ++c) {
      f.freq_x[std::size_t(c)] = rng.uniform(0.6, 2.2);
      f.freq_y[std::size_t(c)] = rng.uniform(0.6, 2.2);
      f.phase[std::size_t(c)] = rng.uniform(0, 2 * M_PI);
      f.base[std::size_t(c)] = rng.uniform(0.3, 0.6);
      f.amp[std::size_t(c)] = rng.uniform(0.15, 0.3);
    }
    return f;
  }

  Eigen::Vector3d sample(double x, double y) const {
    Eigen::Vector3d out;
    for (int c = 0; c < 3; ++c) {
      double s = std::sin(freq_x[std::size_t(c)] * x * M_PI +
                          freq_y[std::size_t(c)] * y * M_PI + phase[std::size_t(c)]);
      if (banded)
        s = s > 0 ? 1.0 : -1.0;
      out[c] = std::clamp(base[std::size_t(c)] + amp[std::size_t(c)] * s, 0.05, 0.95);
    }
    return out;
  }
};

inline Eigen::Vector4d random_unit_quat(Rng &rng) {
  Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  if (q.norm() < 1e-9)
    q = Eigen::Vector4d(1, 0, 0, 0);
  return q.normalized();
}

inline void add_floor(std::vector<Gaussian3D> &out, Rng &rng, const ColorField &field) {
  const int grid = 40;
  const double extent = 1.2;
  const double spacing = 2 * extent / grid;
  for (int iy = 0; iy < grid; ++iy)
    for (int ix = 0; ix < grid; ++ix) {
      Gaussian3D g;
      const double x = -extent + (ix + 0.5) * spacing;
      const double y = -extent + (iy + 0.5) * spacing;
      g.position = Eigen::Vector3d(x, y, 0.015 * rng.normal());
      g.scale = Eigen::Vector3d(spacing * 0.85, spacing * 0.85, 0.01);
      g.opacity = 0.97;
      g.color = field.sample(x / extent, y / extent);
      g.instance_id = 0;
      out.push_back(g);
    }
}

inline void add_blob(std::vector<Gaussian3D> &out, Rng &rng, int instance_id) {
  const Eigen::Vector3d center(rng.uniform(-0.65, 0.65), rng.uniform(-0.65, 0.65),
                               rng.uniform(0.12, 0.4));
  const Eigen::Vector3d half(rng.uniform(0.07, 0.18), rng.uniform(0.07, 0.18),
                             rng.uniform(0.07, 0.18));
  const Eigen::Vector3d base_color(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                                   rng.uniform(0.1, 0.9));
  const int n = 48;
  for (int i = 0; i < n; ++i) {
    Gaussian3D g;
    Eigen::Vector3d offset(rng.normal(), rng.normal(), rng.normal());
    offset = offset.cwiseProduct(half) * 0.45;
    g.position = center + offset;
    const double s = rng.uniform(0.35, 0.8);
    g.scale = half * (s / 3.0);
    g.rotation = random_unit_quat(rng);
    g.opacity = 0.93;
    g.color = (base_color + 0.12 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()))
                  .cwiseMax(0.05)
                  .cwiseMin(0.95);
    g.instance_id = instance_id;
    out.push_back(g);
  }
}

inline void add_box(std::vector<Gaussian3D> &out, Rng &rng, int instance_id) {
  const Eigen::Vector3d center(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                               rng.uniform(0.1, 0.3));
  const Eigen::Vector3d half(rng.uniform(0.08, 0.16), rng.uniform(0.08, 0.16),
                             rng.uniform(0.08, 0.16));
  const Eigen::Vector3d base_color(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                                   rng.uniform(0.1, 0.9));
  const int res = 4;
  for (int axis = 0; axis < 3; ++axis)
    for (int sign = -1; sign <= 1; sign += 2)
      for (int i = 0; i < res; ++i)
        for (int j = 0; j < res; ++j) {
          Gaussian3D g;
          Eigen::Vector3d p;
          const double u = (i + 0.5) / res * 2 - 1, v = (j + 0.5) / res * 2 - 1;
          p[axis] = double(sign);
          p[(axis + 1) % 3] = u;
          p[(axis + 2) % 3] = v;
          g.position = center + p.cwiseProduct(half);
          Eigen::Vector3d s;
          s[axis] = 0.012;
          s[(axis + 1) % 3] = half[(axis + 1) % 3] / res * 1.2;
          s[(axis + 2) % 3] = half[(axis + 2) % 3] / res * 1.2;
          g.scale = s;
          g.opacity = 0.95;
          g.color = (base_color +
                     0.08 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()))
                        .cwiseMax(0.05)
                        .cwiseMin(0.95);
          g.instance_id = instance_id;
          out.push_back(g);
        }
}

} // namespace synth_detail

// Procedural clip: a gaussian floor sheet plus compact object clusters,
// viewed from a jittered orbit arc, rendered by the splat renderer. The
// generator is a pure function of the seed.
inline SceneClip gen_scene(std::uint64_t seed, const SynthConfig &cfg = {}) {
  require(cfg.n_frames >= 5, "gen_scene: n_frames must be >= 5, got ", cfg.n_frames);
  require(cfg.n_objects >= 0 && cfg.n_objects <= 8, "gen_scene: n_objects must be in [0,8]");
  require(cfg.image_size >= 16, "gen_scene: image_size must be >= 16");

  Rng rng(derive_seed(seed, 0x5ce11e));
  SceneClip clip;
  clip.n_instances = cfg.n_objects;

  // Scene content in the raw world.
  std::vector<Gaussian3D> gaussians;
  const auto field = synth_detail::ColorField::make(rng, cfg.background_style);
  synth_detail::add_floor(gaussians, rng, field);
  for (int k = 0; k < cfg.n_objects; ++k) {
    if (rng.uniform() < 0.5)
      synth_detail::add_blob(gaussians, rng, k + 1);
    else
      synth_detail::add_box(gaussians, rng, k + 1);
  }

  // Orbit arc with jitter.
  const double radius = rng.uniform(1.9, 2.5);
  const double elevation = rng.uniform(0.45, 0.85); // radians above the floor
  const double az0 = rng.uniform(0, 2 * M_PI);
  const double az_span = rng.uniform(1.2, 2.1);
  const double hfov = rng.uniform(0.8, 1.05);
  const double focal = cfg.image_size / (2.0 * std::tan(hfov / 2));
  std::vector<Camera> cams;
  for (int f = 0; f < cfg.n_frames; ++f) {
    const double a = az0 + az_span * f / (cfg.n_frames - 1) + rng.uniform(-0.015, 0.015);
    const double el = elevation + rng.uniform(-0.03, 0.03);
    const double r = radius * (1.0 + rng.uniform(-0.02, 0.02));
    const Eigen::Vector3d eye(r * std::cos(el) * std::cos(a), r * std::cos(el) * std::sin(a),
                              r * std::sin(el));
    const Eigen::Vector3d target(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                 rng.uniform(0.0, 0.1));
    cams.push_back(Camera::look_at(eye, target, focal,
                                   cfg.image_size / 2.0 + rng.uniform(-1.5, 1.5),
                                   cfg.image_size / 2.0 + rng.uniform(-1.5, 1.5),
                                   cfg.image_size, cfg.image_size));
  }

  const NormalizeResult norm = normalize_cameras(cams);
  for (auto &g : gaussians) {
    g.position = normalize_point(g.position, norm);
    g.scale /= norm.scale;
  }
  clip.gt_gaussians = std::move(gaussians);

  RenderOptions opts;
  opts.far = cfg.far;
  opts.want_instance = true;
  opts.threads = cfg.render_threads;
  for (int f = 0; f < cfg.n_frames; ++f) {
    const RenderOutput<double> out = render(clip.gt_gaussians, norm.cameras[std::size_t(f)],
                                            opts);
    SceneFrame frame;
    frame.camera = norm.cameras[std::size_t(f)];
    frame.frame_index = f;
    frame.image = Tensor<float>({cfg.image_size, cfg.image_size, 3});
    for (std::int64_t i = 0; i < out.rgb.size(); ++i)
      frame.image[i] = float(std::clamp(out.rgb[i], 0.0, 1.0));
    clip.frames.push_back(std::move(frame));
    clip.depth.push_back(out.depth.template cast<float>());
    std::vector<Mask> inst;
    for (int id = 1; id <= cfg.n_objects; ++id) {
      Mask m({cfg.image_size, cfg.image_size});
      for (std::int64_t i = 0; i < out.instance.size(); ++i)
        m[i] = out.instance[i] == id ? 1 : 0;
      inst.push_back(std::move(m));
    }
    clip.instance_masks.push_back(std::move(inst));
  }
  return clip;
}

// --- scene directory format -----------------------------------------------
//
//   scene.json                 cameras + metadata
//   images/%04d.png            8-bit RGB frames
//   depth/%04d.gidpth          float32 expected-depth maps
//   instances/%04d_%02d.png    per-frame per-instance masks, 255 = masked

inline void write_scene(const SceneClip &clip, const std::filesystem::path &dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  if (clip.n_instances > 0)
    fs::create_directories(dir / "instances");

  nlohmann::json j;
  j["n_frames"] = clip.n_frames();
  j["n_instances"] = clip.n_instances;
  j["frames"] = nlohmann::json::array();
  char name[64];
  for (int f = 0; f < clip.n_frames(); ++f) {
    const Camera &cam = clip.frames[std::size_t(f)].camera;
    std::snprintf(name, sizeof(name), "images/%04d.png", f);
    nlohmann::json jf;
    jf["fx"] = cam.fx;
    jf["fy"] = cam.fy;
    jf["cx"] = cam.cx;
    jf["cy"] = cam.cy;
    jf["width"] = cam.width;
    jf["height"] = cam.height;
    std::vector<double> r(9), t(3);
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k)
        r[std::size_t(3 * i + k)] = cam.R(i, k);
      t[std::size_t(i)] = cam.t[i];
    }
    jf["R"] = r;
    jf["t"] = t;
    jf["image"] = name;
    j["frames"].push_back(jf);

    write_png_rgb(dir / name, clip.frames[std::size_t(f)].image);
    std::snprintf(name, sizeof(name), "depth/%04d.gidpth", f);
    write_depth(dir / name, clip.depth[std::size_t(f)]);
    for (int id = 1; id <= clip.n_instances; ++id) {
      std::snprintf(name, sizeof(name), "instances/%04d_%02d.png", f, id);
      write_png_mask(dir / name, clip.instance_masks[std::size_t(f)][std::size_t(id - 1)]);
    }
  }
  std::ofstream os(dir / "scene.json");
  require(bool(os), "write_scene: cannot open ", (dir / "scene.json").string());
  os << j.dump(2) << "\n";
}

inline SceneClip read_scene(const std::filesystem::path &dir) {
  namespace fs = std::filesystem;
  const fs::path json_path = dir / "scene.json";
  require(fs::exists(json_path), "scene.json not found in '", dir.string(), "'");
  std::ifstream is(json_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception &e) {
    fail("read_scene: failed to parse '", json_path.string(), "': ", e.what());
  }

  auto field = [&](const nlohmann::json &node, const char *key, int frame) {
    require(node.contains(key), "read_scene: frame ", frame, " in '", json_path.string(),
            "' missing field '", key, "'");
    return node.at(key);
  };

  SceneClip clip;
  require(j.contains("frames"), "read_scene: '", json_path.string(),
          "' missing field 'frames'");
  clip.n_instances = j.value("n_instances", 0);
  int f = 0;
  char name[64];
  for (const auto &jf : j.at("frames")) {
    SceneFrame frame;
    Camera &cam = frame.camera;
    cam.fx = field(jf, "fx", f).get<double>();
    cam.fy = field(jf, "fy", f).get<double>();
    cam.cx = field(jf, "cx", f).get<double>();
    cam.cy = field(jf, "cy", f).get<double>();
    cam.width = field(jf, "width", f).get<int>();
    cam.height = field(jf, "height", f).get<int>();
    const auto r = field(jf, "R", f).get<std::vector<double>>();
    const auto t = field(jf, "t", f).get<std::vector<double>>();
    require(r.size() == 9 && t.size() == 3, "read_scene: frame ", f,
            ": R must have 9 entries and t 3");
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k)
        cam.R(i, k) = r[std::size_t(3 * i + k)];
      cam.t[i] = t[std::size_t(i)];
    }
    frame.frame_index = f;
    const std::string image_rel = field(jf, "image", f).get<std::string>();
    frame.image = read_png_rgb(dir / image_rel);

    std::snprintf(name, sizeof(name), "depth/%04d.gidpth", f);
    try {
      clip.depth.push_back(read_depth(dir / name));
    } catch (const Error &e) {
      fail("read_scene: frame ", f, ": ", e.what());
    }
    std::vector<Mask> inst;
    for (int id = 1; id <= clip.n_instances; ++id) {
      std::snprintf(name, sizeof(name), "instances/%04d_%02d.png", f, id);
      inst.push_back(read_png_mask(dir / name));
    }
    clip.instance_masks.push_back(std::move(inst));
    clip.frames.push_back(std::move(frame));
    ++f;
  }
  require(clip.n_frames() >= 5, "read_scene: '", dir.string(), "' has ", clip.n_frames(),
          " frames, need at least 5");
  return clip;
}

} // namespace gilab
