#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gilab/metrics.hpp"
#include "gilab/train.hpp"

namespace gilab {

enum class EvalProtocol { gt_reference, reconstruction };

inline const char *protocol_name(EvalProtocol p) {
  return p == EvalProtocol::gt_reference ? "gt_reference" : "reconstruction";
}

struct SceneEval {
  std::string name;
  double psnr_value = 0, ssim_value = 0;
  std::optional<double> m_psnr, m_ssim;
  double infer_seconds = 0;
  MaskType mask_type = MaskType::geometric;
};

struct EvalReport {
  std::vector<SceneEval> scenes;
  double psnr_value = 0, ssim_value = 0;
  std::optional<double> m_psnr, m_ssim;
  double mean_infer_seconds = 0;
  std::string config_fingerprint;
  std::string protocol;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["protocol"] = protocol;
    j["config_fingerprint"] = config_fingerprint;
    j["aggregate"] = {{"psnr", psnr_value}, {"ssim", ssim_value}};
    if (m_psnr)
      j["aggregate"]["m_psnr"] = *m_psnr;
    if (m_ssim)
      j["aggregate"]["m_ssim"] = *m_ssim;
    j["aggregate"]["mean_infer_seconds"] = mean_infer_seconds;
    j["scenes"] = nlohmann::json::array();
    for (const auto &s : scenes) {
      nlohmann::json js{{"name", s.name},
                        {"psnr", s.psnr_value},
                        {"ssim", s.ssim_value},
                        {"infer_seconds", s.infer_seconds},
                        {"mask_type", mask_type_name(s.mask_type)}};
      if (s.m_psnr)
        js["m_psnr"] = *s.m_psnr;
      if (s.m_ssim)
        js["m_ssim"] = *s.m_ssim;
      j["scenes"].push_back(js);
    }
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    os << "scene                 psnr    m_psnr   ssim    m_ssim   infer_s\n";
    auto line = [&](const std::string &name, double p, std::optional<double> mp, double s,
                    std::optional<double> ms, double t) {
      os.width(20);
      os << std::left << name << std::right << "  ";
      os.width(6);
      os << p << "  ";
      os.width(6);
      if (mp)
        os << *mp;
      else
        os << "-";
      os << "  ";
      os.width(6);
      os << s << "  ";
      os.width(6);
      if (ms)
        os << *ms;
      else
        os << "-";
      os << "  ";
      os.width(8);
      os << t << "\n";
    };
    for (const auto &s : scenes)
      line(s.name, s.psnr_value, s.m_psnr, s.ssim_value, s.m_ssim, s.infer_seconds);
    line("aggregate", psnr_value, m_psnr, ssim_value, m_ssim, mean_infer_seconds);
    return os.str();
  }
};

namespace bench_detail {

inline std::string fingerprint(const nlohmann::json &j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

} // namespace bench_detail

// Evaluate one checkpointed model over held-out scenes. Views are chosen by
// the validation rule (reference nearest the mean, inputs spanning the
// largest triangle); the gt_reference protocol masks an object instance (or
// a seeded geometric region when no instance track survives filtering) in
// the inpaint views and feeds the ground-truth reference frame.
template <typename T>
EvalReport run_benchmark(const ModelWeights<T> &model, const SceneDataset &data,
                         EvalProtocol protocol, std::uint64_t seed = 0) {
  EvalReport report;
  report.protocol = protocol_name(protocol);
  report.config_fingerprint = bench_detail::fingerprint(model.cfg.to_json());

  for (std::size_t si = 0; si < data.size(); ++si) {
    const SceneClip &clip = data.clip(si);
    const auto cams_all = clip.cameras();
    const ValidationViews vv = select_validation_views(cams_all);

    std::array<int, 4> frame_idx = {vv.reference, vv.inputs[0], vv.inputs[1], vv.inputs[2]};
    std::sort(frame_idx.begin(), frame_idx.end());
    int ref_slot = 0;
    for (int v = 0; v < 4; ++v)
      if (frame_idx[std::size_t(v)] == vv.reference)
        ref_slot = v;

    std::array<Camera, 4> cams;
    std::array<Tensor<float>, 4> images;
    for (int v = 0; v < 4; ++v) {
      cams[std::size_t(v)] = clip.frames[std::size_t(frame_idx[std::size_t(v)])].camera;
      images[std::size_t(v)] = clip.frames[std::size_t(frame_idx[std::size_t(v)])].image;
    }
    const int size = clip.image_size();

    MaskSet masks;
    masks.reference_index = ref_slot;
    std::vector<Mask> heldout_masks; // indexed like heldout frames below
    std::vector<int> heldout;
    for (int f = 0; f < clip.n_frames(); ++f)
      if (f != frame_idx[0] && f != frame_idx[1] && f != frame_idx[2] && f != frame_idx[3])
        heldout.push_back(f);

    if (protocol == EvalProtocol::gt_reference) {
      const auto usable = usable_instance_tracks(clip, frame_idx);
      if (!usable.empty()) {
        const int id = usable.front();
        masks.mask_type = MaskType::object;
        for (int v = 0; v < 4; ++v) {
          masks.masks[std::size_t(v)] =
              v == ref_slot
                  ? Mask({size, size})
                  : clip.instance_masks[std::size_t(frame_idx[std::size_t(v)])]
                                       [std::size_t(id)];
        }
        for (int f : heldout)
          heldout_masks.push_back(clip.instance_masks[std::size_t(f)][std::size_t(id)]);
      } else {
        masks.mask_type = MaskType::geometric;
        const Mask region = sample_ref_ellipses(derive_seed(seed, si), size, 2);
        const Tensor<float> &depth = clip.depth[std::size_t(frame_idx[std::size_t(ref_slot)])];
        std::array<Camera, 4> warp_cams = cams;
        masks = gen_geometric_masks(region, depth, warp_cams, ref_slot);
        for (int f : heldout)
          heldout_masks.push_back(morph_close(
              warp_mask(region, depth, cams[std::size_t(ref_slot)],
                        clip.frames[std::size_t(f)].camera)));
      }
      for (int v = 0; v < 4; ++v)
        if (v != ref_slot)
          images[std::size_t(v)] = apply_mask(images[std::size_t(v)],
                                              masks.masks[std::size_t(v)]);
    } else {
      masks.mask_type = MaskType::random;
      for (int v = 0; v < 4; ++v)
        masks.masks[std::size_t(v)] = Mask({size, size});
      for (std::size_t i = 0; i < heldout.size(); ++i)
        heldout_masks.emplace_back(Shape{size, size});
    }

    const auto inp = infer_inpaint(model, cams, images, masks);

    SceneEval se;
    se.name = "scene_" + std::to_string(si);
    se.mask_type = masks.mask_type;
    se.infer_seconds = inp.timing.total();
    RenderOptions ropts;
    ropts.far = model.cfg.far;
    double psnr_sum = 0, ssim_sum = 0, mp_sum = 0, ms_sum = 0;
    int mp_n = 0;
    for (std::size_t i = 0; i < heldout.size(); ++i) {
      const int f = heldout[i];
      const auto out = render(inp.gaussians, clip.frames[std::size_t(f)].camera, ropts);
      Tensor<float> rendered({size, size, 3});
      for (std::int64_t k = 0; k < rendered.size(); ++k)
        rendered[k] = float(std::clamp(out.rgb[k], 0.0, 1.0));
      const Tensor<float> &target = clip.frames[std::size_t(f)].image;
      psnr_sum += psnr(rendered, target);
      ssim_sum += ssim(rendered, target);
      if (mask_area(heldout_masks[i]) > 0) {
        mp_sum += psnr(rendered, target, &heldout_masks[i]);
        ms_sum += ssim(rendered, target, &heldout_masks[i]);
        ++mp_n;
      }
    }
    se.psnr_value = psnr_sum / double(heldout.size());
    se.ssim_value = ssim_sum / double(heldout.size());
    if (mp_n > 0) {
      se.m_psnr = mp_sum / mp_n;
      se.m_ssim = ms_sum / mp_n;
    }
    report.scenes.push_back(std::move(se));
  }

  double p = 0, s = 0, mp = 0, ms = 0, t = 0;
  int mp_n = 0;
  for (const auto &se : report.scenes) {
    p += se.psnr_value;
    s += se.ssim_value;
    t += se.infer_seconds;
    if (se.m_psnr) {
      mp += *se.m_psnr;
      ms += *se.m_ssim;
      ++mp_n;
    }
  }
  const double n = double(report.scenes.size());
  report.psnr_value = p / n;
  report.ssim_value = s / n;
  report.mean_infer_seconds = t / n;
  if (mp_n > 0) {
    report.m_psnr = mp / mp_n;
    report.m_ssim = ms / mp_n;
  }
  return report;
}

} // namespace gilab
