// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/config.hpp"
#include "gsd/external.hpp"
#include "gsd/io.hpp"
#include "gsd/synthetic.hpp"
#include "gsd/train.hpp"

namespace gsd {

struct ExperimentReport {
  std::string name;
  TrainResult result;
  double final_psnr = 0.0;
  double final_ssim = 0.0;
  double seconds = 0.0;
  std::size_t final_gaussians = 0;
};

inline SyntheticOptions synthetic_options(const ExperimentConfig& c) {
  SyntheticOptions o;
  o.seed = c.seed;
  o.n_gaussians = c.gaussians;
  o.n_views = c.total_views;
  o.resolution = c.resolution;
  o.sh_degree = c.sh_degree;
  o.arc_degrees = c.arc_degrees;
  return o;
}

/// Denoiser factory for the analytic prior: per trajectory, the clean-data
/// mean is the GT cloud rendered at independently jittered trajectory poses.
inline DenoiserFactory analytic_prior_factory(std::shared_ptr<const GaussianCloud> gt, NoiseSchedule schedule,
                                              double var, double jitter_rad, double jitter_offset) {
  return [gt = std::move(gt), schedule = std::move(schedule), var, jitter_rad, jitter_offset](
             const Trajectory& traj, std::uint64_t seed) -> std::shared_ptr<const Denoiser> {
    std::mt19937_64 rng(seed);
    Clip mean;
    for (const Camera& pose : traj.poses) mean.push_back(render(*gt, jitter_camera(pose, jitter_rad, jitter_offset, rng)).rgb);
    return std::make_shared<AnalyticGaussianDenoiser>(std::move(mean), var, schedule);
  };
}

/// Scene data for one experiment: sparse training views, held-out views,
/// monocular depth stand-ins, initial cloud, prior and extractor.
inline SceneData build_scene_data(const ExperimentConfig& c, const SyntheticScene& scene) {
  SceneData data;
  const auto train_ids = sparse_train_views(scene, c.views);
  for (int v : train_ids) {
    data.train_cameras.push_back(scene.cameras[v]);
    data.train_images.push_back(scene.gt_images[v]);
  }
  for (int v : scene.test_views) {
    data.test_cameras.push_back(scene.cameras[v]);
    data.test_images.push_back(scene.gt_images[v]);
  }
  std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  switch (c.depth_source) {
    case DepthSourceKind::synthetic:
      for (int v : train_ids) data.train_mono_depth.push_back(corrupt_depth(scene.gt_depths[v], scene.gt_alphas[v], rng));
      break;
    case DepthSourceKind::external: {
      const external::ExternalDepthEstimator est(external::Exchange::from_environment());
      for (const Image& img : data.train_images) data.train_mono_depth.push_back(est.estimate(img));
      break;
    }
    case DepthSourceKind::none:
      break;
  }
  const int n0 = c.init_points > 0 ? c.init_points : static_cast<int>(scene.gt_cloud.size());
  data.initial = make_initial_cloud(scene, n0, c.floaters, rng, c.sh_degree, c.init_jitter);
  data.extent = scene.extent;
  data.schedule = make_schedule();
  if (c.train.distill.mode != DistillMode::none) {
    if (c.denoiser == DenoiserKind::analytic) {
      const double deg = std::numbers::pi / 180.0;
      data.denoiser_factory =
          analytic_prior_factory(std::make_shared<const GaussianCloud>(scene.gt_cloud), data.schedule, c.prior_var,
                                 c.prior_jitter_deg * deg, c.prior_jitter_offset * scene.extent);
    } else {
      auto shared = std::make_shared<const external::ExternalDenoiser>(external::Exchange::from_environment());
      data.denoiser_factory = [shared](const Trajectory&, std::uint64_t) -> std::shared_ptr<const Denoiser> {
        return shared;
      };
    }
  }
  switch (c.feature_source) {
    case FeatureSourceKind::builtin: data.extractor = std::make_shared<PatchFeatureExtractor>(); break;
    case FeatureSourceKind::identity: data.extractor = std::make_shared<IdentityExtractor>(); break;
    case FeatureSourceKind::external:
      data.extractor = std::make_shared<external::ExternalFeatureExtractor>(external::Exchange::from_environment());
      break;
  }
  return data;
}

inline std::string two_digits(std::size_t i) {
  std::ostringstream os;
  os << std::setw(2) << std::setfill('0') << i;
  return os.str();
}

/// Writes metrics.csv, test renders (PPM + float dumps of rgb, depth and
/// alpha), the final cloud and a summary table into dir.
inline void write_artifacts(const std::filesystem::path& dir, const ExperimentConfig& c, const SceneData& data,
                            const ExperimentReport& report) {
  std::filesystem::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", report.result.log);
  io::write_scene(dir / "cloud.txt", report.result.cloud, data.test_cameras);
  if (c.write_images) {
    for (std::size_t v = 0; v < data.test_cameras.size(); ++v) {
      const RenderedFrame f = render(report.result.cloud, data.test_cameras[v]);
      const std::string stem = "test_" + two_digits(v);
      io::write_ppm(dir / (stem + ".ppm"), f.rgb);
      io::write_dump(dir / (stem + "_rgb.gsdf"), f.rgb);
      io::write_dump(dir / (stem + "_depth.gsdf"), f.depth);
      io::write_dump(dir / (stem + "_alpha.gsdf"), f.alpha);
      io::write_dump(dir / ("gt_" + two_digits(v) + "_rgb.gsdf"), data.test_images[v]);
    }
  }
  std::ofstream md(dir / "summary.md");
  md << std::fixed << std::setprecision(3);
  md << "| run | mode | views | PSNR | SSIM | Gaussians | status |\n|---|---|---|---|---|---|---|\n";
  md << "| " << (report.name.empty() ? "run" : report.name) << " | " << mode_name(c.train.distill.mode) << " | "
     << c.views << " | " << report.final_psnr << " | " << report.final_ssim << " | " << report.final_gaussians
     << " | " << (report.result.aborted ? "aborted" : "ok") << " |\n";
  if (report.result.aborted) md << "\nDiagnostics: " << report.result.diagnostics << '\n';
}

/// Builds the scene, trains, and (when c.out is set) writes artifacts.
inline ExperimentReport run_experiment(const ExperimentConfig& c, const std::string& name = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const SyntheticScene scene = make_synthetic_scene(synthetic_options(c));
  const SceneData data = build_scene_data(c, scene);
  ExperimentReport report;
  report.name = name;
  report.result = train(c.train, data);
  const EvalMetrics final_eval = evaluate_views(report.result.cloud, data.test_cameras, data.test_images);
  report.final_psnr = final_eval.psnr;
  report.final_ssim = final_eval.ssim;
  report.final_gaussians = report.result.cloud.size();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!c.out.empty()) write_artifacts(c.out, c, data, report);
  return report;
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

struct Arm {
  std::string name;
  ExperimentConfig config;
};

/// Named grids: "guidance" (no guidance / pixel / feature), "trajectory"
/// (limited / extended), "method" (sds_ddim / gsd) and "views" (3 / 6 / 9).
inline std::vector<Arm> ablation_arms(const ExperimentConfig& base, const std::string& grid) {
  std::vector<Arm> arms;
  auto arm = [&](std::string name, auto&& edit) {
    Arm a{std::move(name), base};
    edit(a.config);
    if (!base.out.empty()) a.config.out = base.out / a.name;
    arms.push_back(std::move(a));
  };
  if (grid == "guidance") {
    arm("no_guidance", [](ExperimentConfig& c) { c.train.distill.mode = DistillMode::sds_ddim; });
    arm("pixel", [](ExperimentConfig& c) {
      c.train.distill.mode = DistillMode::gsd;
      c.train.guidance.eta_pixel = 1.0;
      c.train.guidance.eta_feature = 0.0;
    });
    arm("feature", [](ExperimentConfig& c) {
      c.train.distill.mode = DistillMode::gsd;
      c.train.guidance.eta_pixel = 0.0;
      c.train.guidance.eta_feature = std::max(c.train.guidance.eta_feature, 1.0);
    });
  } else if (grid == "trajectory") {
    arm("limited", [](ExperimentConfig& c) { c.train.distill.anchor_s = c.train.distill.frames_n; });
    arm("extended", [](ExperimentConfig&) {});
  } else if (grid == "method") {
    arm("sds_ddim", [](ExperimentConfig& c) { c.train.distill.mode = DistillMode::sds_ddim; });
    arm("gsd", [](ExperimentConfig& c) { c.train.distill.mode = DistillMode::gsd; });
  } else if (grid == "views") {
    for (int v : {3, 6, 9})
      arm("views_" + std::to_string(v), [v](ExperimentConfig& c) { c.views = v; });
  } else {
    throw ValidationError("unknown ablation grid '" + grid + "' (expected guidance, trajectory, method or views)");
  }
  return arms;
}

inline std::string ablation_table(const std::vector<ExperimentReport>& reports) {
  std::ostringstream md;
  md << std::fixed << std::setprecision(3);
  md << "| arm | PSNR | SSIM | Gaussians | seconds | status |\n|---|---|---|---|---|---|\n";
  for (const auto& r : reports)
    md << "| " << r.name << " | " << r.final_psnr << " | " << r.final_ssim << " | " << r.final_gaussians << " | "
       << std::setprecision(1) << r.seconds << std::setprecision(3) << " | "
       << (r.result.aborted ? "aborted" : "ok") << " |\n";
  return md.str();
}

inline std::vector<ExperimentReport> run_ablation(const ExperimentConfig& base, const std::string& grid) {
  std::vector<ExperimentReport> reports;
  for (const Arm& a : ablation_arms(base, grid)) reports.push_back(run_experiment(a.config, a.name));
  if (!base.out.empty()) {
    std::filesystem::create_directories(base.out);
    std::ofstream(base.out / "ablation.md") << ablation_table(reports);
  }
  return reports;
}

}  // namespace gsd
