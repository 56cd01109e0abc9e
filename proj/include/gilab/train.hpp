#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <optional>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gilab/loss.hpp"
#include "gilab/metrics.hpp"
#include "gilab/model.hpp"
#include "gilab/scene.hpp"

namespace gilab {

struct TrainConfig {
  int stage = 1;
  double lr = 8e-5;
  int batch_size = 4;
  int steps = 1000;
  int n_supervision = 8;       // clamped to the frames a clip can spare
  double feature_weight = 0.5; // lambda on the filter-bank feature loss
  double mse_weight = 1.0;
  std::uint64_t seed = 0;
  int threads = 0; // 0 = hardware concurrency, capped at batch_size
  int log_every = 50;
  int checkpoint_every = 500;

  void validate() const {
    require(stage == 1 || stage == 2, "train config: stage must be 1 or 2");
    require(lr > 0, "train config: lr must be positive");
    require(batch_size > 0 && steps >= 0 && n_supervision >= 1, "train config: bad sizes");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"stage", stage},
                          {"lr", lr},
                          {"batch_size", batch_size},
                          {"steps", steps},
                          {"n_supervision", n_supervision},
                          {"feature_weight", feature_weight},
                          {"mse_weight", mse_weight},
                          {"seed", seed},
                          {"threads", threads},
                          {"log_every", log_every},
                          {"checkpoint_every", checkpoint_every}};
  }

  static TrainConfig from_json(const nlohmann::json &j) {
    TrainConfig c;
    c.stage = j.value("stage", c.stage);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.n_supervision = j.value("n_supervision", c.n_supervision);
    c.feature_weight = j.value("feature_weight", c.feature_weight);
    c.mse_weight = j.value("mse_weight", c.mse_weight);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
  }
};

// In-memory dataset of scene clips.
class SceneDataset {
public:
  SceneDataset() = default;
  explicit SceneDataset(std::vector<SceneClip> clips) : clips_(std::move(clips)) {}

  static SceneDataset load(const std::vector<std::filesystem::path> &dirs) {
    std::vector<SceneClip> clips;
    clips.reserve(dirs.size());
    for (const auto &d : dirs)
      clips.push_back(read_scene(d));
    return SceneDataset(std::move(clips));
  }

  static SceneDataset load_dir(const std::filesystem::path &root) {
    std::vector<std::filesystem::path> dirs;
    for (const auto &entry : std::filesystem::directory_iterator(root))
      if (entry.is_directory() && std::filesystem::exists(entry.path() / "scene.json"))
        dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    require(!dirs.empty(), "no scene directories under '", root.string(), "'");
    return load(dirs);
  }

  std::size_t size() const { return clips_.size(); }
  const SceneClip &clip(std::size_t i) const { return clips_[i]; }

private:
  std::vector<SceneClip> clips_;
};

struct SampleOptions {
  bool with_masks = false; // stage-2 masking
  int n_supervision = 8;
};

// One training sample: quartile input views (inpaint views gray-filled),
// the mask set, and supervision frames with per-frame metric masks.
struct TrainingSample {
  std::array<int, 4> input_indices{};
  int reference_slot = 0; // position of the reference among the 4 inputs
  std::array<Tensor<float>, 4> images;
  MaskSet masks;
  std::vector<int> supervision_indices;
  std::vector<Mask> supervision_masks; // may be empty masks for stage 1
  bool object_fallback = false;
};

namespace train_detail {

inline std::vector<int> sample_without_replacement(Rng &rng, std::vector<int> pool, int m) {
  std::vector<int> out;
  for (int i = 0; i < m && !pool.empty(); ++i) {
    const std::size_t j = std::size_t(rng.uniform_int(0, std::int64_t(pool.size()) - 1));
    out.push_back(pool[j]);
    pool.erase(pool.begin() + std::ptrdiff_t(j));
  }
  return out;
}

} // namespace train_detail

// Instance tracks whose filtered masks survive at every input frame; the
// candidates for object-mask training and evaluation.
inline std::vector<int> usable_instance_tracks(const SceneClip &clip,
                                               const std::array<int, 4> &input_idx) {
  std::vector<int> out;
  for (int id = 0; id < clip.n_instances; ++id) {
    std::vector<Mask> track;
    track.reserve(std::size_t(clip.n_frames()));
    for (int f = 0; f < clip.n_frames(); ++f)
      track.push_back(clip.instance_masks[std::size_t(f)][std::size_t(id)]);
    const auto keep = filter_object_masks(track);
    bool ok = true;
    for (int f : input_idx)
      ok = ok && keep[std::size_t(f)];
    if (ok)
      out.push_back(id);
  }
  return out;
}

inline TrainingSample build_training_sample(const SceneClip &clip, Rng &rng,
                                            const SampleOptions &opts) {
  const int n = clip.n_frames();
  TrainingSample s;
  s.input_indices = select_input_views(n);
  s.reference_slot = int(rng.uniform_int(0, 3));
  const int size = clip.image_size();

  const int m = std::max(1, std::min(opts.n_supervision, n - 4));
  std::vector<int> leftover;
  for (int f = 0; f < n; ++f)
    if (f != s.input_indices[0] && f != s.input_indices[1] && f != s.input_indices[2] &&
        f != s.input_indices[3])
      leftover.push_back(f);
  s.supervision_indices = train_detail::sample_without_replacement(rng, leftover, m);

  std::array<Camera, 4> cams;
  for (int v = 0; v < 4; ++v)
    cams[std::size_t(v)] = clip.frames[std::size_t(s.input_indices[std::size_t(v)])].camera;

  if (opts.with_masks) {
    MaskPlan plan = sample_mask_plan(rng);
    const int ref_frame = s.input_indices[std::size_t(s.reference_slot)];

    std::vector<int> chosen_tracks;
    if (plan.mask_type == MaskType::object) {
      auto usable = usable_instance_tracks(clip, s.input_indices);
      if (usable.empty()) {
        plan.mask_type = MaskType::geometric; // logged by the caller via the flag
        s.object_fallback = true;
      } else {
        chosen_tracks = train_detail::sample_without_replacement(
            rng, usable, std::min<int>(plan.count, int(usable.size())));
      }
    }

    Mask geo_ref_mask;
    switch (plan.mask_type) {
    case MaskType::object: {
      s.masks.mask_type = MaskType::object;
      s.masks.reference_index = s.reference_slot;
      for (int v = 0; v < 4; ++v) {
        Mask m_v({size, size});
        if (v != s.reference_slot)
          for (int id : chosen_tracks) {
            const Mask &src =
                clip.instance_masks[std::size_t(s.input_indices[std::size_t(v)])]
                                   [std::size_t(id)];
            for (std::int64_t i = 0; i < m_v.size(); ++i)
              m_v[i] |= src[i];
          }
        s.masks.masks[std::size_t(v)] = std::move(m_v);
      }
      for (int f : s.supervision_indices) {
        Mask m_f({size, size});
        for (int id : chosen_tracks)
          for (std::int64_t i = 0; i < m_f.size(); ++i)
            m_f[i] |= clip.instance_masks[std::size_t(f)][std::size_t(id)][i];
        s.supervision_masks.push_back(std::move(m_f));
      }
      break;
    }
    case MaskType::geometric: {
      // Resample the reference ellipses if the warp blows past half the frame.
      for (int attempt = 0; attempt < 8; ++attempt) {
        geo_ref_mask = sample_ref_ellipses(rng.next_u64(), size, plan.count);
        s.masks = gen_geometric_masks(geo_ref_mask,
                                      clip.depth[std::size_t(ref_frame)], cams,
                                      s.reference_slot);
        double worst = 0;
        for (const auto &m_v : s.masks.masks)
          worst = std::max(worst, mask_fraction(m_v));
        if (worst <= 0.5)
          break;
      }
      for (int f : s.supervision_indices)
        s.supervision_masks.push_back(
            morph_close(warp_mask(geo_ref_mask, clip.depth[std::size_t(ref_frame)],
                                  cams[std::size_t(s.reference_slot)],
                                  clip.frames[std::size_t(f)].camera)));
      break;
    }
    case MaskType::random: {
      s.masks = gen_random_masks(rng.next_u64(), size, plan.count, s.reference_slot);
      int non_ref = s.reference_slot == 0 ? 1 : 0;
      for (std::size_t i = 0; i < s.supervision_indices.size(); ++i)
        s.supervision_masks.push_back(s.masks.masks[std::size_t(non_ref)]);
      break;
    }
    }
  } else {
    s.masks.mask_type = MaskType::random;
    s.masks.reference_index = s.reference_slot;
    for (int v = 0; v < 4; ++v)
      s.masks.masks[std::size_t(v)] = Mask({size, size});
    for (std::size_t i = 0; i < s.supervision_indices.size(); ++i)
      s.supervision_masks.emplace_back(Shape{size, size});
  }

  for (int v = 0; v < 4; ++v) {
    const Tensor<float> &src =
        clip.frames[std::size_t(s.input_indices[std::size_t(v)])].image;
    s.images[std::size_t(v)] = (v == s.reference_slot)
                                   ? src
                                   : apply_mask(src, s.masks.masks[std::size_t(v)]);
  }
  return s;
}

// Forward pass of one sample: tokenize, transform, activate all four views,
// render every supervision view, average the photometric losses.
template <typename T> struct SampleForward {
  Var<T> loss, mse, feature;
  std::vector<Tensor<T>> renders; // rgb per supervision view
};

template <typename T>
SampleForward<T> forward_sample(Graph<T> &g, const WeightVars<T> &wv, const SceneClip &clip,
                                const TrainingSample &sample, const ModelConfig &cfg,
                                const FeatureBank<T> &bank, const TrainConfig &tc) {
  std::array<ViewInput<T>, 4> views;
  std::array<Camera, 4> cams;
  std::array<Tensor<T>, 4> rays;
  for (int v = 0; v < 4; ++v) {
    cams[std::size_t(v)] =
        clip.frames[std::size_t(sample.input_indices[std::size_t(v)])].camera;
    rays[std::size_t(v)] = plucker_rays(cams[std::size_t(v)]).cast<T>();
    views[std::size_t(v)].image = sample.images[std::size_t(v)].cast<T>();
    views[std::size_t(v)].rays = rays[std::size_t(v)];
    views[std::size_t(v)].is_reference = v == sample.reference_slot;
    views[std::size_t(v)].mask =
        v == sample.reference_slot ? nullptr : &sample.masks.masks[std::size_t(v)];
  }
  auto fwd = model_forward(g, wv, views, cfg);
  std::vector<Var<T>> pos, sc, qt, op, co;
  for (int v = 0; v < 4; ++v) {
    auto act = activate(g, fwd.raw_maps[std::size_t(v)], rays[std::size_t(v)],
                        cams[std::size_t(v)], cfg);
    pos.push_back(act.positions);
    sc.push_back(act.scales);
    qt.push_back(act.rotations);
    op.push_back(act.opacities);
    co.push_back(act.colors);
  }
  Var<T> all_pos = concat<T>(pos, 0);
  Var<T> all_sc = concat<T>(sc, 0);
  Var<T> all_qt = concat<T>(qt, 0);
  Var<T> all_op = concat<T>(op, 0);
  Var<T> all_co = concat<T>(co, 0);

  RenderOptions ropts;
  ropts.far = cfg.far;

  SampleForward<T> out;
  Var<T> total{}, total_mse{}, total_feat{};
  for (std::size_t i = 0; i < sample.supervision_indices.size(); ++i) {
    const int f = sample.supervision_indices[i];
    Var<T> rgb = render_rgb_node(g, all_pos, all_sc, all_qt, all_op, all_co,
                                 clip.frames[std::size_t(f)].camera, ropts);
    out.renders.push_back(g.value(rgb));
    LossParts<T> parts = photometric_loss(
        g, rgb, clip.frames[std::size_t(f)].image.template cast<T>(), bank,
        T(tc.feature_weight), T(tc.mse_weight));
    total = i == 0 ? parts.total : add(total, parts.total);
    total_mse = i == 0 ? parts.mse : add(total_mse, parts.mse);
    total_feat = i == 0 ? parts.feature : add(total_feat, parts.feature);
  }
  const T inv = T(1) / T(double(sample.supervision_indices.size()));
  out.loss = scale(total, inv);
  out.mse = scale(total_mse, inv);
  out.feature = scale(total_feat, inv);
  return out;
}

template <typename T> struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Tensor<T>> m, v;

  explicit Adam(double lr_) : lr(lr_) {}

  void step(std::vector<Tensor<T> *> &params, const std::vector<Tensor<T>> &grads) {
    if (m.empty()) {
      for (auto *p : params) {
        m.push_back(Tensor<T>::zeros(p->shape));
        v.push_back(Tensor<T>::zeros(p->shape));
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> &p = *params[i];
      for (std::int64_t k = 0; k < p.size(); ++k) {
        const double gk = double(grads[i][k]);
        m[i][k] = T(beta1 * double(m[i][k]) + (1 - beta1) * gk);
        v[i][k] = T(beta2 * double(v[i][k]) + (1 - beta2) * gk * gk);
        const double mh = double(m[i][k]) / bc1;
        const double vh = double(v[i][k]) / bc2;
        p[k] = T(double(p[k]) - lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }
};

struct MetricsRow {
  int step;
  double loss, mse, feature, psnr_value, masked_psnr;
};

template <typename T> struct TrainResult {
  std::vector<MetricsRow> rows;
  std::filesystem::path final_checkpoint;
};

namespace train_detail {

inline void write_metrics_csv(const std::filesystem::path &path,
                              const std::vector<MetricsRow> &rows) {
  std::ofstream os(path);
  os << "step,loss,mse,feature,psnr,masked_psnr\n";
  os.precision(10);
  for (const auto &r : rows) {
    os << r.step << "," << r.loss << "," << r.mse << "," << r.feature << "," << r.psnr_value
       << ",";
    if (std::isfinite(r.masked_psnr))
      os << r.masked_psnr;
    else
      os << "nan";
    os << "\n";
  }
}

} // namespace train_detail

// One full training stage. Deterministic for a fixed seed: per-step,
// per-sample rng streams are derived from (seed, step, sample), gradients
// reduce in sample order, and the batch fans out over at most
// min(threads, batch_size) workers without affecting the result.
template <typename T>
TrainResult<T> train_stage(ModelWeights<T> &model, const TrainConfig &tc,
                           const SceneDataset &data, const std::filesystem::path &out_dir) {
  tc.validate();
  model.cfg.validate();
  tune_allocator();
  require(data.size() > 0, "train_stage: empty dataset");
  if (tc.stage == 2)
    require(model.cfg.mask_channel,
            "stage-2 training requires a stage-1 checkpoint expanded for masks");
  else
    require(!model.cfg.mask_channel, "stage-1 training uses the 9-channel patchifier");

  std::filesystem::create_directories(out_dir);
  const FeatureBank<T> bank = FeatureBank<T>::make();
  auto named = model.named_parameters();
  std::vector<Tensor<T> *> params;
  for (auto &[name, tensor] : named)
    params.push_back(tensor);
  Adam<T> opt(tc.lr);

  const int n_threads = std::max(
      1, std::min(tc.threads > 0 ? tc.threads : int(std::thread::hardware_concurrency()),
                  tc.batch_size));

  TrainResult<T> result;
  std::vector<MetricsRow> &rows = result.rows;

  auto save = [&](const std::string &name) {
    const auto path = out_dir / name;
    save_checkpoint(model.to_checkpoint(), path);
    return path;
  };

  for (int step = 0; step < tc.steps; ++step) {
    const std::uint64_t step_seed = derive_seed(tc.seed, 0x57e0 + std::uint64_t(step));

    struct BatchSlot {
      std::vector<Tensor<T>> grads;
      double loss = 0, mse = 0, feature = 0, psnr_sum = 0, masked_sum = 0;
      int psnr_count = 0, masked_count = 0;
      bool object_fallback = false;
    };
    std::vector<BatchSlot> slots(std::size_t(tc.batch_size));

    auto run_sample = [&](int b) {
      Rng rng(derive_seed(step_seed, std::uint64_t(b)));
      const SceneClip &clip = data.clip(std::size_t(rng.uniform_int(
          0, std::int64_t(data.size()) - 1)));
      SampleOptions so;
      so.with_masks = tc.stage == 2;
      so.n_supervision = tc.n_supervision;
      const TrainingSample sample = build_training_sample(clip, rng, so);
      slots[std::size_t(b)].object_fallback = sample.object_fallback;

      Graph<T> g;
      auto wv = bind_weights(g, model, true);
      auto fwd = forward_sample(g, wv, clip, sample, model.cfg, bank, tc);
      BatchSlot &slot = slots[std::size_t(b)];
      slot.loss = double(g.value(fwd.loss)[0]);
      slot.mse = double(g.value(fwd.mse)[0]);
      slot.feature = double(g.value(fwd.feature)[0]);
      if (std::isfinite(slot.loss))
        g.backward(fwd.loss);
      const auto leaves = wv.all();
      slot.grads.reserve(leaves.size());
      for (const auto &leaf : leaves)
        slot.grads.push_back(std::isfinite(slot.loss) ? g.grad(leaf)
                                                      : Tensor<T>::zeros(g.value(leaf).shape));

      // PSNR diagnostics on the rendered supervision views.
      for (std::size_t i = 0; i < fwd.renders.size(); ++i) {
        const int f = sample.supervision_indices[i];
        const Tensor<float> rendered = fwd.renders[i].template cast<float>();
        const Tensor<float> &target = clip.frames[std::size_t(f)].image;
        slot.psnr_sum += psnr(rendered, target);
        slot.psnr_count += 1;
        if (mask_area(sample.supervision_masks[i]) > 0) {
          slot.masked_sum += psnr(rendered, target, &sample.supervision_masks[i]);
          slot.masked_count += 1;
        }
      }
    };

    if (n_threads <= 1) {
      for (int b = 0; b < tc.batch_size; ++b)
        run_sample(b);
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < n_threads; ++t)
        pool.emplace_back([&, t] {
          for (int b = t; b < tc.batch_size; b += n_threads)
            run_sample(b);
        });
      for (auto &th : pool)
        th.join();
    }

    double loss = 0, mse_v = 0, feat = 0, psnr_sum = 0, masked_sum = 0;
    int psnr_n = 0, masked_n = 0, fallbacks = 0;
    for (const auto &slot : slots) {
      loss += slot.loss;
      mse_v += slot.mse;
      feat += slot.feature;
      psnr_sum += slot.psnr_sum;
      masked_sum += slot.masked_sum;
      psnr_n += slot.psnr_count;
      masked_n += slot.masked_count;
      fallbacks += slot.object_fallback ? 1 : 0;
    }
    if (fallbacks > 0)
      std::fprintf(stderr,
                   "step %d: %d sample(s) fell back from object to geometric masks\n",
                   step, fallbacks);
    loss /= tc.batch_size;
    mse_v /= tc.batch_size;
    feat /= tc.batch_size;

    if (!std::isfinite(loss)) {
      nlohmann::json dump{{"stage", tc.stage},
                          {"step", step},
                          {"seed", tc.seed},
                          {"step_seed", step_seed}};
      std::ofstream os(out_dir / "nan_dump.json");
      os << dump.dump(2) << "\n";
      fail("non-finite loss at step ", step, "; seed state written to ",
           (out_dir / "nan_dump.json").string());
    }

    // Fixed reduction order: sample index, then parameter index.
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<T> acc = Tensor<T>::zeros(params[p]->shape);
      for (int b = 0; b < tc.batch_size; ++b)
        for (std::int64_t k = 0; k < acc.size(); ++k)
          acc[k] += slots[std::size_t(b)].grads[p][k];
      for (std::int64_t k = 0; k < acc.size(); ++k)
        acc[k] /= T(tc.batch_size);
      grads.push_back(std::move(acc));
    }
    opt.step(params, grads);

    if (tc.log_every > 0 && (step % tc.log_every == 0 || step == tc.steps - 1)) {
      MetricsRow row;
      row.step = step;
      row.loss = loss;
      row.mse = mse_v;
      row.feature = feat;
      row.psnr_value = psnr_n ? psnr_sum / psnr_n : 0.0;
      row.masked_psnr =
          masked_n ? masked_sum / masked_n : std::numeric_limits<double>::quiet_NaN();
      rows.push_back(row);
      train_detail::write_metrics_csv(out_dir / "metrics.csv", rows);
    }
    if (tc.checkpoint_every > 0 && step > 0 && step % tc.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_%06d.ckpt", step);
      save(name);
    }
  }

  result.final_checkpoint = save("model_final.ckpt");
  {
    std::ofstream os(out_dir / "model.json");
    os << model.cfg.to_json().dump(2) << "\n";
  }
  train_detail::write_metrics_csv(out_dir / "metrics.csv", rows);
  return result;
}

// --- inference --------------------------------------------------------------

struct InpaintTiming {
  double tokenize_s = 0, transformer_s = 0, decode_s = 0;
  double total() const { return tokenize_s + transformer_s + decode_s; }
};

template <typename T> struct InpaintResult {
  std::vector<Gaussian3D> gaussians;
  InpaintTiming timing;
};

// One feed-forward pass over 4 posed views. The reference view's pixels are
// replaced by `ref_image` when given (it may come from any editing tool);
// masks must leave the reference empty.
template <typename T>
InpaintResult<T> infer_inpaint(const ModelWeights<T> &model,
                               const std::array<Camera, 4> &cams,
                               const std::array<Tensor<float>, 4> &images,
                               const MaskSet &masks,
                               const Tensor<float> *ref_image = nullptr) {
  const ModelConfig &cfg = model.cfg;
  cfg.validate();
  const int ref = masks.reference_index;
  require(ref >= 0 && ref < 4, "infer_inpaint: bad reference index ", ref);
  require(mask_area(masks.masks[std::size_t(ref)]) == 0,
          "infer_inpaint: reference view mask must be empty");
  for (int v = 0; v < 4; ++v) {
    require(images[std::size_t(v)].shape ==
                Shape{cfg.image_size, cfg.image_size, 3},
            "infer_inpaint: view ", v, " image shape ",
            shape_str(images[std::size_t(v)].shape), " does not match config");
    require(masks.masks[std::size_t(v)].shape == Shape{cfg.image_size, cfg.image_size},
            "infer_inpaint: view ", v, " mask misaligned with image");
  }
  if (ref_image)
    require(ref_image->shape == images[std::size_t(ref)].shape,
            "infer_inpaint: reference image shape mismatch");

  using Clock = std::chrono::steady_clock;
  Graph<T> g;
  auto wv = bind_weights(g, model, false);
  std::array<Tensor<T>, 4> rays;
  std::array<ViewInput<T>, 4> views;
  const auto t0 = Clock::now();
  std::vector<Var<T>> per_view;
  for (int v = 0; v < 4; ++v) {
    rays[std::size_t(v)] = plucker_rays(cams[std::size_t(v)]).cast<T>();
    const Tensor<float> &src =
        (v == ref && ref_image) ? *ref_image : images[std::size_t(v)];
    views[std::size_t(v)].image = src.cast<T>();
    views[std::size_t(v)].rays = rays[std::size_t(v)];
    views[std::size_t(v)].is_reference = v == ref;
    views[std::size_t(v)].mask = v == ref ? nullptr : &masks.masks[std::size_t(v)];
    per_view.push_back(tokenize(g, wv, views[std::size_t(v)], cfg));
  }
  Var<T> tokens = concat<T>(per_view, 0);
  const auto t1 = Clock::now();
  Var<T> transformed = transformer(g, wv, tokens, cfg);
  const auto t2 = Clock::now();
  auto raw_maps = decode_raw_maps(g, wv, transformed, cfg);
  InpaintResult<T> out;
  for (int v = 0; v < 4; ++v) {
    auto act = activate(g, raw_maps[std::size_t(v)], rays[std::size_t(v)],
                        cams[std::size_t(v)], cfg);
    auto gs = extract_gaussians(g, act);
    out.gaussians.insert(out.gaussians.end(), gs.begin(), gs.end());
  }
  const auto t3 = Clock::now();
  const auto secs = [](auto a, auto b) {
    return std::chrono::duration<double>(b - a).count();
  };
  out.timing.tokenize_s = secs(t0, t1);
  out.timing.transformer_s = secs(t1, t2);
  out.timing.decode_s = secs(t2, t3);
  return out;
}

} // namespace gilab
