// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/diffusion.hpp"
#include "gsd/distillation.hpp"
#include "gsd/guidance.hpp"
#include "gsd/io.hpp"
#include "gsd/metrics.hpp"
#include "gsd/optimizer.hpp"
#include "gsd/rasterizer.hpp"
#include "gsd/scene.hpp"

namespace gsd {

/// Builds the denoiser used for one trajectory batch; the seed makes any
/// internal randomness reproducible.
using DenoiserFactory = std::function<std::shared_ptr<const Denoiser>(const Trajectory&, std::uint64_t seed)>;

struct GuidanceSettings {
  double rho = 1.0;
  double eta_depth = 1.0;
  double eta_feature = 1.0;
  double eta_pixel = 0.0;
  bool on_x0_estimate = false;
  std::vector<int> depth_frames;  // empty: every frame

  GuidanceSpec spec() const {
    GuidanceSpec s;
    s.rho = RhoSchedule::constant(rho);
    s.apply_to_x0_estimate = on_x0_estimate;
    if (eta_depth > 0.0) s.terms.push_back({GuidanceKind::depth_warp, eta_depth, depth_frames});
    if (eta_feature > 0.0) s.terms.push_back({GuidanceKind::feature, eta_feature, {}});
    if (eta_pixel > 0.0) s.terms.push_back({GuidanceKind::pixel, eta_pixel, {}});
    s.validate();
    return s;
  }
};

struct TrainConfig {
  int iterations = 10000;
  std::uint64_t seed = 0;
  DistillationConfig distill;
  GuidanceSettings guidance;
  int gsd_every = 10;
  LearningRates lr;
  bool position_lr_by_extent = true;  // position step size is lr.position * scene extent
  DensifyConfig densify;
  int eval_every = 500;
  double divergence_drop_db = 5.0;
  double divergence_ceiling_db = 40.0;  // guard PSNR is clipped here

  void validate(const NoiseSchedule& schedule) const {
    require(iterations >= 0, "iterations must be >= 0");
    require(gsd_every >= 1, "gsd_every must be >= 1");
    require(eval_every >= 1, "eval_every must be >= 1");
    require(divergence_drop_db > 0.0, "divergence threshold must be positive");
    distill.validate(schedule);
  }
};

struct SceneData {
  std::vector<Camera> train_cameras;
  Clip train_images;
  Clip train_mono_depth;  // per training view; may be empty
  std::vector<Camera> test_cameras;
  Clip test_images;
  GaussianCloud initial;
  double extent = 1.0;
  NoiseSchedule schedule = make_schedule();
  DenoiserFactory denoiser_factory;
  std::shared_ptr<const FeatureExtractor> extractor;

  void validate(DistillMode mode) const {
    require(!train_cameras.empty(), "scene data needs at least one training view");
    require(train_images.size() == train_cameras.size(), "training image count differs from camera count");
    require(train_mono_depth.empty() || train_mono_depth.size() == train_cameras.size(),
            "monocular depth count differs from camera count");
    require(test_images.size() == test_cameras.size(), "test image count differs from camera count");
    for (std::size_t v = 0; v < train_cameras.size(); ++v) {
      train_cameras[v].validate();
      require(train_images[v].height == train_cameras[v].height && train_images[v].width == train_cameras[v].width &&
                  train_images[v].channels == 3,
              "training image does not match its camera");
    }
    initial.validate();
    require(!initial.empty(), "initial cloud is empty");
    if (mode != DistillMode::none) {
      require(train_cameras.size() >= 2, "distillation needs at least two training views");
      require(static_cast<bool>(denoiser_factory), "distillation needs a denoiser");
    }
  }
};

struct MetricsRow {
  int iteration = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double loss_rgb = 0.0;
  double loss_depth = 0.0;
  bool gsd_active = false;
};

struct TrainResult {
  GaussianCloud cloud;
  std::vector<MetricsRow> log;
  bool aborted = false;
  std::string diagnostics;
  int distill_steps = 0;
  int guidance_fallbacks = 0;
};

struct EvalMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  Clip renders;  // float32-rounded, as dumped
};

/// Mean PSNR / SSIM over views, computed on float32-rounded images so the
/// numbers can be recomputed from dumped renders exactly.
inline EvalMetrics evaluate_views(const GaussianCloud& cloud, const std::vector<Camera>& cams, const Clip& gt) {
  EvalMetrics out;
  if (cams.empty()) return out;
  for (std::size_t v = 0; v < cams.size(); ++v) {
    Image r = io::as_stored(render(cloud, cams[v]).rgb);
    const Image g = io::as_stored(gt[v]);
    out.psnr += psnr(r, g);
    out.ssim += ssim(r, g);
    out.renders.push_back(std::move(r));
  }
  out.psnr /= static_cast<double>(cams.size());
  out.ssim /= static_cast<double>(cams.size());
  return out;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "iteration,psnr,ssim,loss_rgb,loss_depth,gsd_active";

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows)
    os << r.iteration << ',' << r.psnr << ',' << r.ssim << ',' << r.loss_rgb << ',' << r.loss_depth << ','
       << (r.gsd_active ? 1 : 0) << '\n';
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  write_metrics_csv(os, rows);
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw ValidationError("metrics CSV: bad header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    MetricsRow r;
    int active = 0;
    if (!(ls >> r.iteration >> r.psnr >> r.ssim >> r.loss_rgb >> r.loss_depth >> active))
      throw ValidationError("metrics CSV: malformed row");
    r.gsd_active = active != 0;
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  return read_metrics_csv(is);
}

// ---------------------------------------------------------------------------
// Checkpoints: scene text file plus Adam moments as float32 dumps.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir, const GaussianCloud& cloud,
                            const OptimizerState& state) {
  std::filesystem::create_directories(dir);
  io::write_scene(dir / "cloud.txt", cloud);
  for (Family f : kFamilies) {
    for (int which = 0; which < 2; ++which) {
      const auto& v = (which == 0 ? state.first_moment : state.second_moment).family(f);
      Image img(1, static_cast<int>(v.size()), 1);
      img.data = v;
      io::write_dump(dir / (std::string(which == 0 ? "m1_" : "m2_") + family_name(f) + ".gsdf"), img);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace train_detail {

struct DistillStep {
  CloudGradients grads;
  bool fell_back = false;
};

inline DistillStep distill_step(const GaussianCloud& cloud, const SceneData& data, const TrainConfig& cfg,
                                const GuidanceSpec& spec, std::mt19937_64& rng) {
  const DistillationConfig& dc = cfg.distill;
  const int views = static_cast<int>(data.train_cameras.size());
  std::uniform_int_distribution<int> pick(0, views - 1), pick_other(0, views - 2);
  const int j = pick(rng);
  int k = pick_other(rng);
  if (k >= j) ++k;
  const Trajectory traj = interpolate_trajectory(data.train_cameras[j], data.train_cameras[k], dc.frames_n,
                                                 dc.anchor_s);
  Clip frames, depths, alphas;
  for (const Camera& pose : traj.poses) {
    RenderedFrame f = render(cloud, pose);
    frames.push_back(std::move(f.rgb));
    depths.push_back(std::move(f.depth));
    alphas.push_back(std::move(f.alpha));
  }
  const auto denoiser = data.denoiser_factory(traj, rng());
  require(static_cast<bool>(denoiser), "denoiser factory returned nothing");
  std::uniform_int_distribution<int> pick_t(dc.t_min, dc.t_max);
  const int t = pick_t(rng);
  const std::uint64_t aux_seed = rng();  // drawn in every mode so arms stay paired
  const Image& condition = data.train_images[j];

  DistillationGradient g;
  g.t = t;
  g.tau = dc.tau;
  switch (dc.mode) {
    case DistillMode::sds: {
      Clip noise = frames;
      std::mt19937_64 noise_rng(aux_seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (Image& f : noise)
        for (double& v : f.data) v = normal(noise_rng);
      g.rgb = sds_gradient(frames, *denoiser, data.schedule, t, noise, condition, dc.omega);
      break;
    }
    case DistillMode::sds_ddim:
      g.rgb = sds_ddim_gradient(frames, *denoiser, data.schedule, t, dc.tau, condition, dc.omega,
                                dc.inversion_stride);
      break;
    case DistillMode::gsd: {
      GuidanceContext ctx;
      ctx.anchor_frame = traj.anchor_index();
      ctx.anchor_target = &data.train_images[k];
      ctx.extractor = data.extractor.get();
      ctx.rendered_depth = depths;
      ctx.rendered_alpha = alphas;
      ctx.fd_seed = aux_seed;
      if (const GuidanceTerm* term = spec.find(GuidanceKind::depth_warp); term && !data.train_mono_depth.empty()) {
        const Image& mono = data.train_mono_depth[j];
        std::vector<std::uint8_t> valid(mono.size(), 0);
        for (std::size_t p = 0; p < mono.size(); ++p)
          valid[p] = mono.data[p] > 0.0 && alphas[0].data[p] > kDepthLossAlpha;
        try {
          const DepthAlignment aligned = scale_relative_depth(mono, depths[0], valid);
          Image src = aligned.depth;
          for (std::size_t p = 0; p < src.size(); ++p)
            if (!(mono.data[p] > 0.0)) src.data[p] = 0.0;
          ctx.depth_targets = build_depth_targets(src, traj, term->target_frames);
        } catch (const ValidationError& e) {
          log::debug(std::string("depth guidance skipped: ") + e.what());
        }
      }
      g = gsd_gradient(frames, traj, *denoiser, data.schedule, spec, ctx, t, dc.tau, condition, dc.omega,
                       dc.inversion_stride);
      break;
    }
    case DistillMode::none:
      break;
  }
  DistillStep out{CloudGradients(cloud), g.fell_back};
  if (g.rgb.empty()) return out;
  if (!g.finite()) {
    log::warn("distillation produced a non-finite adjoint; step skipped");
    return out;
  }
  const double scale = dc.lambda_gsd / static_cast<double>(frames.front().pixels());
  for (std::size_t f = 0; f < traj.size(); ++f) {
    Image d_rgb = g.rgb[f];
    for (double& v : d_rgb.data) v *= scale;
    Image d_depth;
    if (!g.depth.empty()) {
      d_depth = g.depth[f];
      for (double& v : d_depth.data) v *= scale;
    }
    out.grads += render_backward(cloud, traj.poses[f], d_rgb, d_depth);
  }
  return out;
}

}  // namespace train_detail

/// Runs the optimization loop. Returns early with aborted = true when a
/// training view's PSNR falls more than divergence_drop_db below its running
/// maximum since the last densification event, with PSNR clipped at
/// divergence_ceiling_db. Densification stops at half
/// the iterations unless densify.until is set.
inline TrainResult train(const TrainConfig& cfg, const SceneData& data) {
  cfg.validate(data.schedule);
  data.validate(cfg.distill.mode);
  const GuidanceSpec spec = cfg.guidance.spec();
  const bool has_depth = !data.train_mono_depth.empty();

  TrainResult result;
  result.cloud = data.initial;
  GaussianCloud& cloud = result.cloud;
  LearningRates lr = cfg.lr;
  if (cfg.position_lr_by_extent) lr.position *= data.extent;
  OptimizerState state(cloud, lr);
  // Independent streams: view order, distillation sampling, densification.
  std::seed_seq seeds{cfg.seed, cfg.seed >> 32};
  std::array<std::uint64_t, 3> stream{};
  {
    std::array<std::uint32_t, 6> words{};
    seeds.generate(words.begin(), words.end());
    for (int i = 0; i < 3; ++i) stream[i] = (std::uint64_t{words[2 * i]} << 32) | words[2 * i + 1];
  }
  std::mt19937_64 order_rng(stream[0]), distill_rng(stream[1]), densify_rng(stream[2]);
  DensifyConfig densify = cfg.densify;
  if (densify.until < 0) densify.until = cfg.iterations / 2;

  const int views = static_cast<int>(data.train_cameras.size());
  std::vector<double> best_psnr(views, -std::numeric_limits<double>::infinity());
  std::vector<int> order(views);
  std::iota(order.begin(), order.end(), 0);

  auto record = [&](int iteration, double loss_rgb, double loss_depth, bool gsd_active) {
    const EvalMetrics m = evaluate_views(cloud, data.test_cameras, data.test_images);
    result.log.push_back({iteration, m.psnr, m.ssim, loss_rgb, loss_depth, gsd_active});
  };

  {
    double l_rgb = 0.0, l_depth = 0.0;
    for (int v = 0; v < views; ++v) {
      const RenderedFrame f = render(cloud, data.train_cameras[v]);
      const TotalLoss l = total_loss(f, data.train_images[v], has_depth ? &data.train_mono_depth[v] : nullptr,
                                     cfg.distill.lambda_depth);
      l_rgb += l.rgb;
      l_depth += l.depth;
    }
    record(0, l_rgb / views, l_depth / views, schedule_gate(0, cfg.distill, has_depth).gsd);
  }

  double sum_rgb = 0.0, sum_depth = 0.0;
  int since = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const int slot = (it - 1) % views;
    if (slot == 0) std::shuffle(order.begin(), order.end(), order_rng);
    const int v = order[slot];
    const GateFlags gate = schedule_gate(it, cfg.distill, has_depth);

    const RenderedFrame frame = render(cloud, data.train_cameras[v]);
    const double view_psnr = std::min(psnr(frame.rgb, data.train_images[v]), cfg.divergence_ceiling_db);
    best_psnr[v] = std::max(best_psnr[v], view_psnr);
    if (view_psnr < best_psnr[v] - cfg.divergence_drop_db) {
      std::ostringstream os;
      os << "divergence at iteration " << it << ": training view " << v << " PSNR " << view_psnr
         << " dB fell more than " << cfg.divergence_drop_db << " dB below its best " << best_psnr[v] << " dB ("
         << cloud.size() << " Gaussians, " << result.distill_steps << " distillation steps)";
      result.aborted = true;
      result.diagnostics = os.str();
      log::warn(result.diagnostics);
      record(it, since ? sum_rgb / since : 0.0, since ? sum_depth / since : 0.0, gate.gsd);
      return result;
    }
    const TotalLoss loss = total_loss(frame, data.train_images[v],
                                      gate.depth && has_depth ? &data.train_mono_depth[v] : nullptr,
                                      cfg.distill.lambda_depth);
    sum_rgb += loss.rgb;
    sum_depth += loss.depth;
    ++since;

    BackwardStats stats;
    CloudGradients grads = render_backward(cloud, data.train_cameras[v], loss.d_rgb, loss.d_depth, &stats);
    state.record_screen_gradients(stats);

    if (gate.gsd && it % cfg.gsd_every == 0) {
      const auto step = train_detail::distill_step(cloud, data, cfg, spec, distill_rng);
      grads += step.grads;
      ++result.distill_steps;
      result.guidance_fallbacks += step.fell_back;
    }

    adam_step(cloud, grads, state);
    if (densify_and_prune(cloud, state, it, densify, data.extent, densify_rng).acted)
      std::fill(best_psnr.begin(), best_psnr.end(), -std::numeric_limits<double>::infinity());

    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      record(it, sum_rgb / since, sum_depth / since, gate.gsd);
      sum_rgb = sum_depth = 0.0;
      since = 0;
    }
  }
  return result;
}

}  // namespace gsd
