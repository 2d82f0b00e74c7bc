// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <type_traits>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/distillation.hpp"
#include "gsd/train.hpp"

namespace gsd {

enum class DepthSourceKind { synthetic, external, none };
enum class FeatureSourceKind { builtin, identity, external };
enum class DenoiserKind { analytic, external };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int gaussians = 200;
  int resolution = 64;
  int views = 3;
  int total_views = 24;
  double arc_degrees = 120.0;
  int init_points = -1;  // -1: one per GT Gaussian
  double floaters = 0.1;
  double init_jitter = 0.02;  // in units of the scene extent
  int sh_degree = 1;
  int max_resolution = 128;
  TrainConfig train;

  // Analytic prior: GT rendered at jittered trajectory poses, variance prior_var.
  DenoiserKind denoiser = DenoiserKind::analytic;
  double prior_var = 0.05;
  double prior_jitter_deg = 2.0;
  double prior_jitter_offset = 0.02;  // in units of the scene extent

  DepthSourceKind depth_source = DepthSourceKind::synthetic;
  FeatureSourceKind feature_source = FeatureSourceKind::builtin;

  std::filesystem::path out;
  bool write_images = true;

  ExperimentConfig() {
    train.iterations = 10000;
    train.seed = 0;
    train.densify.grad_threshold = 2e-3;
  }

  void validate() const {
    require(gaussians >= 1, "gaussians must be >= 1");
    require(views >= 1, "views must be >= 1");
    require(total_views >= 4, "total_views must be >= 4");
    require(resolution >= 16, "resolution must be >= 16");
    require(resolution <= max_resolution,
            "resolution exceeds the desk-scale limit; raise max_resolution to override");
    require(sh_degree == 1 || sh_degree == 2, "sh_degree must be 1 or 2");
    require(prior_var >= 0.0, "prior_var must be >= 0");
    require(floaters >= 0.0, "floaters must be >= 0");
    require(init_jitter >= 0.0, "init_jitter must be >= 0");
    require(arc_degrees > 0.0 && arc_degrees <= 360.0, "arc_degrees must be in (0, 360]");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    std::istringstream is(value);
    is >> out;
    if (!is || is.peek() != std::char_traits<char>::eof())
      throw ValidationError("config key '" + key + "': bad number '" + value + "'");
  } else {
    const char* last = value.data() + value.size();
    const auto r = std::from_chars(value.data(), last, out);
    if (r.ec != std::errc() || r.ptr != last)
      throw ValidationError("config key '" + key + "': bad integer '" + value + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
  if (value == "0" || value == "false" || value == "no" || value == "off") return false;
  throw ValidationError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::string item;
  std::istringstream is(value);
  while (std::getline(is, item, ','))
    if (!trim(item).empty()) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

}  // namespace config_detail

/// Applies one `key = value` setting. Unknown keys are validation errors.
inline void apply_config_value(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  using namespace config_detail;
  const std::string value = trim(raw);
  auto num = [&](auto& field) { field = parse_number<std::decay_t<decltype(field)>>(key, value); };
  TrainConfig& t = c.train;
  DistillationConfig& d = t.distill;
  GuidanceSettings& g = t.guidance;

  if (key == "mode") d.mode = parse_mode(value);
  else if (key == "omega") d.omega.kind = parse_omega(value).kind;
  else if (key == "omega_scale") num(d.omega.scale);
  else if (key == "t_min") num(d.t_min);
  else if (key == "t_max") num(d.t_max);
  else if (key == "tau") num(d.tau);
  else if (key == "frames_n") num(d.frames_n);
  else if (key == "anchor_s") num(d.anchor_s);
  else if (key == "rho") num(g.rho);
  else if (key == "eta_depth") num(g.eta_depth);
  else if (key == "eta_feature") num(g.eta_feature);
  else if (key == "eta_pixel") num(g.eta_pixel);
  else if (key == "guidance_on_x0") g.on_x0_estimate = parse_bool(key, value);
  else if (key == "depth_frames") g.depth_frames = parse_int_list(key, value);
  else if (key == "lambda_depth") num(d.lambda_depth);
  else if (key == "lambda_gsd") num(d.lambda_gsd);
  else if (key == "gsd_start_iter") num(d.activation_iteration);
  else if (key == "inversion_stride") num(d.inversion_stride);
  else if (key == "gsd_every") num(t.gsd_every);
  else if (key == "iterations") num(t.iterations);
  else if (key == "eval_every") num(t.eval_every);
  else if (key == "divergence_db") num(t.divergence_drop_db);
  else if (key == "divergence_ceiling_db") num(t.divergence_ceiling_db);
  else if (key == "lr_position") num(t.lr.position);
  else if (key == "lr_rotation") num(t.lr.rotation);
  else if (key == "lr_scale") num(t.lr.log_scale);
  else if (key == "lr_opacity") num(t.lr.opacity_logit);
  else if (key == "lr_sh") num(t.lr.sh);
  else if (key == "densify_start") num(t.densify.start);
  else if (key == "densify_every") num(t.densify.every);
  else if (key == "densify_until") num(t.densify.until);
  else if (key == "densify_grad") num(t.densify.grad_threshold);
  else if (key == "prune_opacity") num(t.densify.prune_opacity);
  else if (key == "max_gaussians") num(t.densify.max_gaussians);
  else if (key == "seed") {
    num(c.seed);
    t.seed = c.seed;
  } else if (key == "gaussians") num(c.gaussians);
  else if (key == "resolution") num(c.resolution);
  else if (key == "views") num(c.views);
  else if (key == "total_views") num(c.total_views);
  else if (key == "arc_degrees") num(c.arc_degrees);
  else if (key == "init_points") num(c.init_points);
  else if (key == "floaters") num(c.floaters);
  else if (key == "init_jitter") num(c.init_jitter);
  else if (key == "sh_degree") num(c.sh_degree);
  else if (key == "max_resolution") num(c.max_resolution);
  else if (key == "prior_var") num(c.prior_var);
  else if (key == "prior_jitter_deg") num(c.prior_jitter_deg);
  else if (key == "prior_jitter_offset") num(c.prior_jitter_offset);
  else if (key == "denoiser") {
    if (value == "analytic") c.denoiser = DenoiserKind::analytic;
    else if (value == "external") c.denoiser = DenoiserKind::external;
    else throw ValidationError("denoiser must be analytic or external");
  } else if (key == "depth_source") {
    if (value == "synthetic") c.depth_source = DepthSourceKind::synthetic;
    else if (value == "external") c.depth_source = DepthSourceKind::external;
    else if (value == "none") c.depth_source = DepthSourceKind::none;
    else throw ValidationError("depth_source must be synthetic, external or none");
  } else if (key == "feature_source") {
    if (value == "builtin") c.feature_source = FeatureSourceKind::builtin;
    else if (value == "identity") c.feature_source = FeatureSourceKind::identity;
    else if (value == "external") c.feature_source = FeatureSourceKind::external;
    else throw ValidationError("feature_source must be builtin, identity or external");
  } else if (key == "out") c.out = value;
  else if (key == "write_images") c.write_images = parse_bool(key, value);
  else throw ValidationError("unknown config key '" + key + "'");
}

/// Reads `key = value` lines; '#' starts a comment.
inline void apply_config(ExperimentConfig& c, std::istream& is) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << "config line " << lineno << ": expected 'key = value'";
      throw ValidationError(os.str());
    }
    try {
      apply_config_value(c, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ValidationError& e) {
      std::ostringstream os;
      os << "config line " << lineno << ": " << e.what();
      throw ValidationError(os.str());
    }
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path.string());
  apply_config(base, is);
  return base;
}

}  // namespace gsd
