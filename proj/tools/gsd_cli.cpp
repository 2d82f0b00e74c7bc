// SPDX-License-Identifier: Apache-2.0
//
// gsd: command-line front end.
//
//   gsd synth        --seed 3 --out DIR
//   gsd train        --config run.cfg --views 3 --mode gsd --out DIR
//   gsd eval         --run DIR
//   gsd ablate       --grid method --out DIR
//   gsd invert-demo  --t 600 --out strip.ppm
//
// Exit status: 0 success, 2 invalid input, 3 training aborted, 1 other failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gsd/gsd.hpp"

namespace fs = std::filesystem;
using namespace gsd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitAborted = 3;

// Flags shared by every experiment-running subcommand. Precedence, lowest
// first: built-in defaults, --config file, named flags, --set overrides.
struct ExperimentFlags {
  std::string config_path;
  std::optional<int> views;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<int> resolution;
  std::optional<int> gaussians;
  std::string out;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Text config of 'key = value' lines")->check(CLI::ExistingFile);
    cmd->add_option("--views", views, "Number of training views");
    cmd->add_option("--mode", mode, "Distillation mode: none, sds, sds_ddim or gsd");
    cmd->add_option("--seed", seed, "Scene and training seed");
    cmd->add_option("--iterations", iterations, "Optimization iterations");
    cmd->add_option("--resolution", resolution, "Image side length in pixels");
    cmd->add_option("--gaussians", gaussians, "Ground-truth Gaussian count");
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--set", overrides, "Extra 'key=value' config override (repeatable)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c;
    if (!config_path.empty()) c = load_config(config_path, c);
    if (views) c.views = *views;
    if (mode) c.train.distill.mode = parse_mode(*mode);
    if (seed) apply_config_value(c, "seed", std::to_string(*seed));
    if (iterations) c.train.iterations = *iterations;
    if (resolution) c.resolution = *resolution;
    if (gaussians) c.gaussians = *gaussians;
    if (!out.empty()) c.out = out;
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      apply_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

int run_synth(const ExperimentFlags& flags) {
  const ExperimentConfig c = flags.resolve();
  require(!c.out.empty(), "synth needs --out");
  const SyntheticScene scene = make_synthetic_scene(synthetic_options(c));
  fs::create_directories(c.out);
  io::write_scene(c.out / "scene.txt", scene.gt_cloud, scene.cameras);
  for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
    const std::string stem = "view_" + two_digits(v);
    io::write_ppm(c.out / (stem + ".ppm"), scene.gt_images[v]);
    io::write_dump(c.out / (stem + "_rgb.gsdf"), scene.gt_images[v]);
    io::write_dump(c.out / (stem + "_depth.gsdf"), scene.gt_depths[v]);
  }
  std::ofstream split(c.out / "split.txt");
  split << "test";
  for (int v : scene.test_views) split << ' ' << v;
  split << "\ntrain";
  for (int v : sparse_train_views(scene, c.views)) split << ' ' << v;
  split << '\n';
  std::cout << "wrote " << scene.cameras.size() << " views of " << scene.gt_cloud.size() << " Gaussians to "
            << c.out.string() << '\n';
  return kExitOk;
}

void print_report(const ExperimentReport& r) {
  std::cout << std::fixed << std::setprecision(4) << (r.name.empty() ? "run" : r.name) << ": PSNR "
            << r.final_psnr << " dB, SSIM " << r.final_ssim << ", " << r.final_gaussians << " Gaussians, "
            << std::setprecision(1) << r.seconds << " s";
  if (r.result.aborted) std::cout << " [aborted: " << r.result.diagnostics << "]";
  std::cout << '\n';
}

int run_train(const ExperimentFlags& flags) {
  const ExperimentConfig c = flags.resolve();
  const ExperimentReport r = run_experiment(c, "train");
  print_report(r);
  return r.result.aborted ? kExitAborted : kExitOk;
}

int run_ablate(const ExperimentFlags& flags, const std::string& grid) {
  const ExperimentConfig c = flags.resolve();
  const auto reports = run_ablation(c, grid);
  std::cout << ablation_table(reports);
  const bool any_aborted =
      std::any_of(reports.begin(), reports.end(), [](const ExperimentReport& r) { return r.result.aborted; });
  return any_aborted ? kExitAborted : kExitOk;
}

// Recomputes held-out metrics from the dumped renders of a finished run and
// compares them with the last metrics.csv row.
int run_eval(const fs::path& dir) {
  require(fs::is_directory(dir), "eval: no such run directory " + dir.string());
  double psnr_sum = 0.0, ssim_sum = 0.0;
  int views = 0;
  for (;; ++views) {
    const fs::path render_path = dir / ("test_" + two_digits(views) + "_rgb.gsdf");
    const fs::path gt_path = dir / ("gt_" + two_digits(views) + "_rgb.gsdf");
    if (!fs::exists(render_path) || !fs::exists(gt_path)) break;
    const Image r = io::read_dump(render_path), g = io::read_dump(gt_path);
    psnr_sum += psnr(r, g);
    ssim_sum += ssim(r, g);
  }
  require(views > 0, "eval: no test_XX_rgb.gsdf / gt_XX_rgb.gsdf pairs in " + dir.string());
  const double p = psnr_sum / views, s = ssim_sum / views;
  std::cout << std::setprecision(12) << "views " << views << " PSNR " << p << " SSIM " << s << '\n';
  if (fs::exists(dir / "metrics.csv")) {
    const auto rows = read_metrics_csv(dir / "metrics.csv");
    if (!rows.empty()) {
      const double dp = std::abs(rows.back().psnr - p), ds = std::abs(rows.back().ssim - s);
      std::cout << "logged PSNR " << rows.back().psnr << " SSIM " << rows.back().ssim << " (|dPSNR| " << dp
                << ", |dSSIM| " << ds << ")\n";
      if (dp > 1e-9 || ds > 1e-9) {
        std::cerr << "eval: recomputed metrics differ from the log\n";
        return kExitFailure;
      }
    }
  }
  return kExitOk;
}

// Inverts one rendered view with the analytic prior and writes the visited
// states side by side; each state is min/max normalized for display.
int run_invert_demo(std::uint64_t seed, int t, int stride, int resolution, const fs::path& out) {
  ExperimentConfig c;
  c.seed = seed;
  c.resolution = resolution;
  c.validate();
  const SyntheticScene scene = make_synthetic_scene(synthetic_options(c));
  const NoiseSchedule schedule = make_schedule();
  require(t >= 2 && t <= schedule.T(), "invert-demo: t must be in [2, T]");
  const Camera& cam = scene.cameras[scene.train_pool.front()];
  std::mt19937_64 rng(seed);
  const Image prior_mean = render(scene.gt_cloud, jitter_camera(cam, std::numbers::pi / 90.0, 0.0, rng)).rgb;
  const AnalyticGaussianDenoiser den(Clip{prior_mean}, c.prior_var, schedule);
  const InversionResult inv = ddim_invert(Clip{scene.gt_images[scene.train_pool.front()]}, t, std::min(stride, t - 1),
                                          den, schedule, Image{}, stride, true);
  const int h = resolution, w = resolution;
  const int n = static_cast<int>(inv.states.size());
  Image strip(h, w * n, 3);
  for (int k = 0; k < n; ++k) {
    const Image& s = inv.states[k].front();
    const auto [lo, hi] = std::minmax_element(s.data.begin(), s.data.end());
    const double span = std::max(*hi - *lo, 1e-12);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch) strip(y, k * w + x, ch) = (s(y, x, ch) - *lo) / span;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_ppm(out, strip);
  std::cout << "wrote " << n << " states (timesteps";
  for (int ts : inv.timesteps) std::cout << ' ' << ts;
  std::cout << ") to " << out.string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view Gaussian splatting with guided score distillation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings");

  ExperimentFlags synth_flags, train_flags, ablate_flags;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic scene and its ground-truth views");
  synth_flags.attach(synth);
  CLI::App* train_cmd = app.add_subcommand("train", "Train one configuration and write its artifacts");
  train_flags.attach(train_cmd);
  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation grid: guidance, trajectory, method or views");
  ablate_flags.attach(ablate);
  std::string grid = "method";
  ablate->add_option("--grid", grid, "Grid name")->check(CLI::IsMember({"guidance", "trajectory", "method", "views"}));

  CLI::App* eval = app.add_subcommand("eval", "Recompute held-out metrics from a run directory");
  std::string run_dir;
  eval->add_option("--run", run_dir, "Run directory written by train")->required();

  CLI::App* demo = app.add_subcommand("invert-demo", "Write a DDIM inversion trajectory as an image strip");
  std::uint64_t demo_seed = 0;
  int demo_t = 600, demo_stride = 100, demo_resolution = 64;
  std::string demo_out = "inversion.ppm";
  demo->add_option("--seed", demo_seed, "Scene seed");
  demo->add_option("--t", demo_t, "Final timestep");
  demo->add_option("--stride", demo_stride, "Inversion stride");
  demo->add_option("--resolution", demo_resolution, "Image side length");
  demo->add_option("--out", demo_out, "Output PPM path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  std::optional<log::ScopedSink> filter;
  if (quiet)
    filter.emplace([](log::Level level, const std::string& msg) {
      if (level == log::Level::warn) std::clog << "[gsd warn] " << msg << '\n';
    });

  try {
    if (*synth) return run_synth(synth_flags);
    if (*train_cmd) return run_train(train_flags);
    if (*ablate) return run_ablate(ablate_flags, grid);
    if (*eval) return run_eval(run_dir);
    if (*demo) return run_invert_demo(demo_seed, demo_t, demo_stride, demo_resolution, demo_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const TrainingAbort& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitAborted;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
