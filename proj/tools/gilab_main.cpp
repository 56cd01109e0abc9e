// Command-line frontend: synthetic data generation, two-stage training,
// mask generation, inpainting inference, rendering, evaluation, and the
// finite-difference verification suite.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "gilab/benchmark.hpp"
#include "gilab/gradcheck.hpp"
#include "gilab/image_io.hpp"
#include "gilab/scene.hpp"
#include "gilab/train.hpp"

namespace fs = std::filesystem;
using namespace gilab;

namespace {

void write_manifest(const fs::path &out_dir, const std::string &command,
                    std::uint64_t seed, const nlohmann::json &config) {
  fs::create_directories(out_dir);
  nlohmann::json j{{"command", command},
                   {"version", kVersion},
                   {"seed", seed},
                   {"config", config}};
  std::ofstream os(out_dir / "manifest.json");
  os << j.dump(2) << "\n";
}

ModelConfig load_model_config(const fs::path &ckpt, const std::string &explicit_cfg) {
  fs::path cfg_path = explicit_cfg.empty() ? ckpt.parent_path() / "model.json"
                                           : fs::path(explicit_cfg);
  require(fs::exists(cfg_path), "model config not found at '", cfg_path.string(),
          "' (pass --model-config)");
  std::ifstream is(cfg_path);
  nlohmann::json j;
  is >> j;
  return ModelConfig::from_json(j);
}

ModelWeights<float> load_model(const fs::path &ckpt, const std::string &explicit_cfg) {
  require(fs::exists(ckpt), "checkpoint not found: '", ckpt.string(), "'");
  const ModelConfig cfg = load_model_config(ckpt, explicit_cfg);
  return ModelWeights<float>::from_checkpoint(load_checkpoint(ckpt), cfg);
}

struct SceneViews {
  std::array<Camera, 4> cams;
  std::array<Tensor<float>, 4> images;
  std::array<int, 4> frame_indices;
  int ref_slot = 0;
  std::vector<int> heldout;
};

// Validation-rule view selection over a stored clip.
SceneViews pick_views(const SceneClip &clip) {
  SceneViews v;
  const auto cams_all = clip.cameras();
  const ValidationViews vv = select_validation_views(cams_all);
  v.frame_indices = {vv.reference, vv.inputs[0], vv.inputs[1], vv.inputs[2]};
  std::sort(v.frame_indices.begin(), v.frame_indices.end());
  for (int i = 0; i < 4; ++i) {
    if (v.frame_indices[std::size_t(i)] == vv.reference)
      v.ref_slot = i;
    v.cams[std::size_t(i)] = clip.frames[std::size_t(v.frame_indices[std::size_t(i)])].camera;
    v.images[std::size_t(i)] = clip.frames[std::size_t(v.frame_indices[std::size_t(i)])].image;
  }
  for (int f = 0; f < clip.n_frames(); ++f)
    if (f != v.frame_indices[0] && f != v.frame_indices[1] && f != v.frame_indices[2] &&
        f != v.frame_indices[3])
      v.heldout.push_back(f);
  return v;
}

MaskSet load_or_make_masks(const SceneClip &clip, const SceneViews &views,
                           const std::string &mask_dir, const std::string &mask_type,
                           int count, std::uint64_t seed) {
  const int size = clip.image_size();
  if (!mask_dir.empty()) {
    MaskSet ms;
    ms.reference_index = views.ref_slot;
    ms.mask_type = MaskType::random;
    for (int v = 0; v < 4; ++v) {
      const fs::path p = fs::path(mask_dir) / ("mask_view" + std::to_string(v) + ".png");
      ms.masks[std::size_t(v)] = fs::exists(p) ? read_png_mask(p) : Mask({size, size});
      require(ms.masks[std::size_t(v)].shape == Shape{size, size},
              "mask '", p.string(), "' does not match the scene resolution");
    }
    require(mask_area(ms.masks[std::size_t(views.ref_slot)]) == 0,
            "reference view mask must be empty");
    return ms;
  }
  if (mask_type == "object") {
    const auto usable = usable_instance_tracks(clip, views.frame_indices);
    require(!usable.empty(), "no usable instance track in this scene; "
            "use --mask-type geometric or random");
    MaskSet ms;
    ms.mask_type = MaskType::object;
    ms.reference_index = views.ref_slot;
    for (int v = 0; v < 4; ++v)
      ms.masks[std::size_t(v)] =
          v == views.ref_slot
              ? Mask({size, size})
              : clip.instance_masks[std::size_t(views.frame_indices[std::size_t(v)])]
                                   [std::size_t(usable.front())];
    return ms;
  }
  if (mask_type == "geometric") {
    const Mask region = sample_ref_ellipses(seed, size, count);
    return gen_geometric_masks(
        region, clip.depth[std::size_t(views.frame_indices[std::size_t(views.ref_slot)])],
        views.cams, views.ref_slot);
  }
  require(mask_type == "random", "unknown mask type '", mask_type, "'");
  return gen_random_masks(seed, size, count, views.ref_slot);
}

int run_synth(std::uint64_t seed, int scenes, int frames, int size, int objects,
              const std::string &background, const std::string &out, int threads) {
  SynthConfig cfg;
  cfg.n_frames = frames;
  cfg.image_size = size;
  cfg.n_objects = objects;
  cfg.render_threads = std::max(1, threads);
  require(background == "smooth" || background == "banded", "unknown flag value '",
          background, "' for --background");
  cfg.background_style =
      background == "banded" ? BackgroundStyle::banded : BackgroundStyle::smooth;

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  for (int i = 0; i < scenes; ++i) {
    const SceneClip clip = gen_scene(derive_seed(seed, std::uint64_t(i)), cfg);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d", i);
    write_scene(clip, out_dir / name);
  }
  write_manifest(out_dir, "synth", seed,
                 {{"scenes", scenes},
                  {"frames", frames},
                  {"size", size},
                  {"objects", objects},
                  {"background", background}});
  std::cout << "wrote " << scenes << " scenes to " << out_dir.string() << "\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  tune_allocator();
  CLI::App app{"feed-forward 3D gaussian scene inpainting toolkit"};
  app.require_subcommand(1);

  // ---- synth ----
  auto *synth = app.add_subcommand("synth", "generate synthetic posed scene clips");
  std::uint64_t seed = 0;
  int scenes = 10, frames = 15, size = 64, objects = 3, threads = 0;
  std::string out, background = "smooth";
  synth->add_option("--seed", seed, "rng seed");
  synth->add_option("--scenes", scenes, "number of scenes");
  synth->add_option("--frames", frames, "frames per clip");
  synth->add_option("--size", size, "image size");
  synth->add_option("--objects", objects, "foreground objects per scene");
  synth->add_option("--background", background, "background style: smooth|banded");
  synth->add_option("--threads", threads, "render worker threads");
  synth->add_option("--out", out, "output directory")->required();

  // ---- train / finetune ----
  auto add_train_opts = [](CLI::App *cmd, TrainConfig &tc, ModelConfig &mc,
                           std::string &data, std::string &out_opt) {
    cmd->add_option("--data", data, "scene dataset directory")->required();
    cmd->add_option("--out", out_opt, "output directory")->required();
    cmd->add_option("--steps", tc.steps, "optimizer steps");
    cmd->add_option("--batch", tc.batch_size, "batch size");
    cmd->add_option("--lr", tc.lr, "learning rate");
    cmd->add_option("--sup", tc.n_supervision, "supervision views per sample");
    cmd->add_option("--lambda", tc.feature_weight, "feature loss weight");
    cmd->add_option("--mse-weight", tc.mse_weight, "mse loss weight");
    cmd->add_option("--seed", tc.seed, "rng seed");
    cmd->add_option("--threads", tc.threads, "worker threads (0 = auto)");
    cmd->add_option("--log-every", tc.log_every, "metric logging interval");
    cmd->add_option("--ckpt-every", tc.checkpoint_every, "checkpoint interval");
    cmd->add_option("--dim", mc.token_dim, "token dimension");
    cmd->add_option("--blocks", mc.num_blocks, "transformer blocks");
    cmd->add_option("--heads", mc.num_heads, "attention heads");
    cmd->add_option("--patch", mc.patch_size, "patch size");
    cmd->add_option("--size", mc.image_size, "image size");
  };

  auto *train = app.add_subcommand("train", "stage-1 reconstruction pretraining");
  TrainConfig train_tc;
  ModelConfig train_mc;
  std::string train_data, train_out;
  add_train_opts(train, train_tc, train_mc, train_data, train_out);

  auto *finetune = app.add_subcommand("finetune", "stage-2 masked finetuning");
  TrainConfig ft_tc;
  ModelConfig ft_mc;
  std::string ft_data, ft_out, ft_init, ft_cfg, ft_encoding = "inpaint_views";
  add_train_opts(finetune, ft_tc, ft_mc, ft_data, ft_out);
  finetune->add_option("--init", ft_init, "stage-1 checkpoint")->required();
  finetune->add_option("--model-config", ft_cfg, "stage-1 model config json");
  finetune->add_option("--mask-encoding", ft_encoding,
                       "reference_only|all_views|inpaint_views");

  // ---- maskgen ----
  auto *maskgen = app.add_subcommand("maskgen", "generate masks for a scene's input views");
  std::string mg_scene, mg_out, mg_type = "random";
  std::uint64_t mg_seed = 0;
  int mg_count = 0;
  maskgen->add_option("--scene", mg_scene, "scene directory")->required();
  maskgen->add_option("--out", mg_out, "output directory")->required();
  maskgen->add_option("--type", mg_type, "object|geometric|random");
  maskgen->add_option("--count", mg_count, "regions per mask (0 = sample a plan)");
  maskgen->add_option("--seed", mg_seed, "rng seed");

  // ---- render ----
  auto *rendercmd = app.add_subcommand("render", "reconstruct a scene and render frames");
  std::string rd_scene, rd_ckpt, rd_out, rd_cfg, rd_frames = "all";
  std::uint64_t rd_seed = 0;
  rendercmd->add_option("--scene", rd_scene, "scene directory")->required();
  rendercmd->add_option("--ckpt", rd_ckpt, "model checkpoint")->required();
  rendercmd->add_option("--out", rd_out, "output directory")->required();
  rendercmd->add_option("--model-config", rd_cfg, "model config json");
  rendercmd->add_option("--frames", rd_frames, "'all' or comma-separated frame indices");
  rendercmd->add_option("--seed", rd_seed, "rng seed (manifest only)");

  // ---- inpaint ----
  auto *inpaint = app.add_subcommand("inpaint", "feed-forward 3D inpainting of a scene");
  std::string ip_scene, ip_ckpt, ip_out, ip_cfg, ip_maskdir, ip_type = "geometric", ip_ref;
  std::uint64_t ip_seed = 0;
  int ip_count = 2;
  inpaint->add_option("--scene", ip_scene, "scene directory")->required();
  inpaint->add_option("--ckpt", ip_ckpt, "model checkpoint")->required();
  inpaint->add_option("--out", ip_out, "output directory")->required();
  inpaint->add_option("--model-config", ip_cfg, "model config json");
  inpaint->add_option("--masks", ip_maskdir, "directory with mask_view%d.png");
  inpaint->add_option("--mask-type", ip_type, "object|geometric|random (when no --masks)");
  inpaint->add_option("--count", ip_count, "regions per generated mask");
  inpaint->add_option("--ref-image", ip_ref, "replacement RGB file for the reference view");
  inpaint->add_option("--seed", ip_seed, "rng seed");

  // ---- eval ----
  auto *evalcmd = app.add_subcommand("eval", "benchmark a checkpoint over held-out scenes");
  std::string ev_data, ev_ckpt, ev_out, ev_cfg, ev_protocol = "gt_reference";
  std::uint64_t ev_seed = 0;
  evalcmd->add_option("--data", ev_data, "scene dataset directory")->required();
  evalcmd->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  evalcmd->add_option("--out", ev_out, "report output directory")->required();
  evalcmd->add_option("--model-config", ev_cfg, "model config json");
  evalcmd->add_option("--protocol", ev_protocol, "gt_reference|reconstruction");
  evalcmd->add_option("--seed", ev_seed, "rng seed");

  // ---- gradcheck ----
  auto *gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suite");
  int gc_instances = 100;
  std::uint64_t gc_seed = 17;
  gradcheck->add_option("--instances", gc_instances, "random instances per op");
  gradcheck->add_option("--seed", gc_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    if (app.get_subcommands().empty())
      std::cerr << app.help();
    return 1;
  }

  try {
    if (*synth)
      return run_synth(seed, scenes, frames, size, objects, background, out, threads);

    if (*train || *finetune) {
      const bool stage2 = bool(*finetune);
      TrainConfig &tc = stage2 ? ft_tc : train_tc;
      ModelConfig &mc = stage2 ? ft_mc : train_mc;
      tc.stage = stage2 ? 2 : 1;
      const std::string &data_dir = stage2 ? ft_data : train_data;
      const std::string &out_dir = stage2 ? ft_out : train_out;

      SceneDataset data = SceneDataset::load_dir(data_dir);
      ModelWeights<float> model;
      if (stage2) {
        ModelWeights<float> s1 = load_model(ft_init, ft_cfg);
        require(!s1.cfg.mask_channel,
                "--init must point to a stage-1 checkpoint (9-channel patchifier)");
        model = expand_patchifier_for_masks(s1);
        model.cfg.mask_encoding = mask_encoding_from_name(ft_encoding);
      } else {
        mc.mask_channel = false;
        mc.validate();
        model = ModelWeights<float>::init(mc, tc.seed);
      }
      require(data.clip(0).image_size() == model.cfg.image_size,
              "dataset resolution ", data.clip(0).image_size(),
              " does not match model image size ", model.cfg.image_size);

      write_manifest(out_dir, stage2 ? "finetune" : "train", tc.seed,
                     {{"train", tc.to_json()},
                      {"model", model.cfg.to_json()},
                      {"data", data_dir}});
      const auto res = train_stage(model, tc, data, out_dir);
      std::cout << "finished " << tc.steps << " steps; checkpoint at "
                << res.final_checkpoint.string() << "\n";
      if (!res.rows.empty())
        std::cout << "final loss " << res.rows.back().loss << ", psnr "
                  << res.rows.back().psnr_value << "\n";
      return 0;
    }

    if (*maskgen) {
      const SceneClip clip = read_scene(mg_scene);
      const SceneViews views = pick_views(clip);
      int count = mg_count;
      std::string type = mg_type;
      if (count == 0) {
        const MaskPlan plan = sample_mask_plan(derive_seed(mg_seed, 0x9a51));
        count = plan.count;
        if (mg_type.empty())
          type = mask_type_name(plan.mask_type);
      }
      const MaskSet ms = load_or_make_masks(clip, views, "", type, count, mg_seed);
      fs::create_directories(mg_out);
      for (int v = 0; v < 4; ++v)
        write_png_mask(fs::path(mg_out) / ("mask_view" + std::to_string(v) + ".png"),
                       ms.masks[std::size_t(v)]);
      nlohmann::json plan{{"type", mask_type_name(ms.mask_type)},
                          {"count", count},
                          {"reference_slot", views.ref_slot},
                          {"input_frames", views.frame_indices}};
      std::ofstream os(fs::path(mg_out) / "plan.json");
      os << plan.dump(2) << "\n";
      write_manifest(mg_out, "maskgen", mg_seed, plan);
      std::cout << "wrote masks for input frames of " << mg_scene << " to " << mg_out
                << "\n";
      return 0;
    }

    if (*rendercmd) {
      const SceneClip clip = read_scene(rd_scene);
      const auto model = load_model(rd_ckpt, rd_cfg);
      const SceneViews views = pick_views(clip);
      MaskSet empty;
      empty.reference_index = views.ref_slot;
      for (int v = 0; v < 4; ++v)
        empty.masks[std::size_t(v)] = Mask({clip.image_size(), clip.image_size()});
      const auto inp = infer_inpaint(model, views.cams, views.images, empty);

      std::vector<int> wanted;
      if (rd_frames == "all") {
        for (int f = 0; f < clip.n_frames(); ++f)
          wanted.push_back(f);
      } else {
        std::stringstream ss(rd_frames);
        std::string tok;
        while (std::getline(ss, tok, ','))
          wanted.push_back(std::stoi(tok));
      }
      fs::create_directories(rd_out);
      RenderOptions ropts;
      ropts.far = model.cfg.far;
      for (int f : wanted) {
        require(f >= 0 && f < clip.n_frames(), "frame ", f, " out of range");
        const auto img = render(inp.gaussians, clip.frames[std::size_t(f)].camera, ropts);
        Tensor<float> rgb({clip.image_size(), clip.image_size(), 3});
        for (std::int64_t i = 0; i < rgb.size(); ++i)
          rgb[i] = float(std::clamp(img.rgb[i], 0.0, 1.0));
        char name[32];
        std::snprintf(name, sizeof(name), "%04d.png", f);
        write_png_rgb(fs::path(rd_out) / name, rgb);
        std::snprintf(name, sizeof(name), "%04d.gidpth", f);
        write_depth(fs::path(rd_out) / name, img.depth.cast<float>());
      }
      write_manifest(rd_out, "render", rd_seed,
                     {{"scene", rd_scene}, {"ckpt", rd_ckpt}, {"frames", rd_frames}});
      std::cout << "rendered " << wanted.size() << " frames to " << rd_out << "\n";
      return 0;
    }

    if (*inpaint) {
      const SceneClip clip = read_scene(ip_scene);
      const auto model = load_model(ip_ckpt, ip_cfg);
      SceneViews views = pick_views(clip);
      const MaskSet ms =
          load_or_make_masks(clip, views, ip_maskdir, ip_type, ip_count, ip_seed);
      for (int v = 0; v < 4; ++v)
        if (v != views.ref_slot)
          views.images[std::size_t(v)] =
              apply_mask(views.images[std::size_t(v)], ms.masks[std::size_t(v)]);

      Tensor<float> ref_replacement;
      const Tensor<float> *ref_ptr = nullptr;
      if (!ip_ref.empty()) {
        ref_replacement = read_png_rgb(ip_ref);
        require(ref_replacement.shape ==
                    Shape{clip.image_size(), clip.image_size(), 3},
                "--ref-image must be ", clip.image_size(), "x", clip.image_size(), " RGB");
        ref_ptr = &ref_replacement;
      }
      const auto inp = infer_inpaint(model, views.cams, views.images, ms, ref_ptr);

      fs::create_directories(ip_out);
      RenderOptions ropts;
      ropts.far = model.cfg.far;
      for (int f : views.heldout) {
        const auto img = render(inp.gaussians, clip.frames[std::size_t(f)].camera, ropts);
        Tensor<float> rgb({clip.image_size(), clip.image_size(), 3});
        for (std::int64_t i = 0; i < rgb.size(); ++i)
          rgb[i] = float(std::clamp(img.rgb[i], 0.0, 1.0));
        char name[32];
        std::snprintf(name, sizeof(name), "%04d.png", f);
        write_png_rgb(fs::path(ip_out) / name, rgb);
      }
      nlohmann::json timing{{"tokenize_s", inp.timing.tokenize_s},
                            {"transformer_s", inp.timing.transformer_s},
                            {"decode_s", inp.timing.decode_s},
                            {"total_s", inp.timing.total()},
                            {"gaussians", inp.gaussians.size()}};
      std::ofstream os(fs::path(ip_out) / "timing.json");
      os << timing.dump(2) << "\n";
      write_manifest(ip_out, "inpaint", ip_seed,
                     {{"scene", ip_scene},
                      {"ckpt", ip_ckpt},
                      {"mask_type", ip_type},
                      {"masks", ip_maskdir},
                      {"count", ip_count},
                      {"ref_image", ip_ref}});
      std::cout << "inpainted scene; timing " << timing.dump() << "\n";
      return 0;
    }

    if (*evalcmd) {
      const auto model = load_model(ev_ckpt, ev_cfg);
      SceneDataset data = SceneDataset::load_dir(ev_data);
      require(ev_protocol == "gt_reference" || ev_protocol == "reconstruction",
              "unknown flag value '", ev_protocol, "' for --protocol");
      const EvalReport report = run_benchmark(
          model, data,
          ev_protocol == "gt_reference" ? EvalProtocol::gt_reference
                                        : EvalProtocol::reconstruction,
          ev_seed);
      fs::create_directories(ev_out);
      std::ofstream os(fs::path(ev_out) / "report.json");
      os << report.to_json().dump(2) << "\n";
      write_manifest(ev_out, "eval", ev_seed,
                     {{"data", ev_data}, {"ckpt", ev_ckpt}, {"protocol", ev_protocol}});
      std::cout << report.table();
      return 0;
    }

    if (*gradcheck) {
      bool ok = true;
      for (const auto &r : run_op_gradient_checks(gc_instances, gc_seed)) {
        const bool pass = r.max_rel_err < 1e-4;
        ok = ok && pass;
        std::printf("%-16s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                    pass ? "ok" : "FAIL");
      }
      const double renderer_err = run_renderer_fd_check(3, gc_seed);
      std::printf("%-16s max rel err %.3e  %s\n", "renderer", renderer_err,
                  renderer_err < 1e-3 ? "ok" : "FAIL");
      ok = ok && renderer_err < 1e-3;
      const double e2e_err = run_model_e2e_fd_check();
      std::printf("%-16s max rel err %.3e  %s\n", "model_e2e", e2e_err,
                  e2e_err < 1e-3 ? "ok" : "FAIL");
      ok = ok && e2e_err < 1e-3;
      return ok ? 0 : 2;
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
