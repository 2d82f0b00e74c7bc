// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/rasterizer.hpp"
#include "gsd/scene.hpp"

namespace gsd {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-15;

struct LearningRates {
  double position = 1.6e-3;
  double rotation = 1e-3;
  double log_scale = 5e-3;
  double opacity_logit = 5e-2;
  double sh = 2.5e-3;

  double operator[](Family f) const {
    switch (f) {
      case Family::position: return position;
      case Family::rotation: return rotation;
      case Family::log_scale: return log_scale;
      case Family::opacity_logit: return opacity_logit;
      case Family::sh: return sh;
    }
    return 0.0;
  }
};

/// Adam moments, step counter and densification statistics. Every per-
/// Gaussian array tracks the cloud length.
struct OptimizerState {
  LearningRates lr;
  CloudGradients first_moment;
  CloudGradients second_moment;
  long step = 0;
  std::vector<double> grad_accum;  // summed screen-space gradient norms
  std::vector<int> grad_count;     // views in which the Gaussian was visible

  OptimizerState() = default;
  explicit OptimizerState(const GaussianCloud& cloud, LearningRates rates = {})
      : lr(rates), first_moment(cloud), second_moment(cloud),
        grad_accum(cloud.size(), 0.0), grad_count(cloud.size(), 0) {}

  bool tracks(const GaussianCloud& cloud) const {
    return first_moment.size() == cloud.size() && second_moment.size() == cloud.size() &&
           grad_accum.size() == cloud.size() && grad_count.size() == cloud.size() &&
           first_moment.sh_degree == cloud.sh_degree;
  }

  void record_screen_gradients(const BackwardStats& stats) {
    require(stats.screen_grad.size() == grad_accum.size(), "densify statistics length mismatch");
    for (std::size_t i = 0; i < grad_accum.size(); ++i)
      if (stats.visible[i]) {
        grad_accum[i] += stats.screen_grad[i];
        ++grad_count[i];
      }
  }
};

/// One bias-corrected Adam update on every family, then quaternion
/// renormalization. Non-finite gradients skip the step and return false.
inline bool adam_step(GaussianCloud& cloud, const CloudGradients& grads, OptimizerState& state) {
  require(state.tracks(cloud), "adam_step: optimizer state does not track the cloud");
  require(grads.size() == cloud.size() && grads.sh_degree == cloud.sh_degree, "adam_step: gradient shape mismatch");
  if (!grads.finite()) {
    log::warn("adam_step: non-finite gradients; step skipped");
    return false;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (Family f : kFamilies) {
    auto& p = cloud.family(f);
    const auto& g = grads.family(f);
    auto& m = state.first_moment.family(f);
    auto& v = state.second_moment.family(f);
    const double lr = state.lr[f];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g[k];
      v[k] = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
    }
  }
  cloud.normalize_rotations();
  return true;
}

struct DensifyConfig {
  int start = 500;
  int every = 100;
  int until = -1;                    // last eligible iteration; -1 means no limit
  double grad_threshold = 2e-4;      // mean screen-space gradient norm
  double prune_opacity = 0.005;
  double split_factor = 1.6;
  double clone_scale_fraction = 0.01;  // clone when max scale <= fraction * scene extent
  std::size_t max_gaussians = 0;     // 0 means no cap
};

struct DensifyReport {
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
  bool acted = false;
};

inline bool densify_due(int iteration, const DensifyConfig& cfg) {
  return iteration >= cfg.start && cfg.every > 0 && iteration % cfg.every == 0 &&
         (cfg.until < 0 || iteration <= cfg.until);
}

/// Clones small high-gradient Gaussians, splits large ones into two samples
/// with scales divided by split_factor, and prunes low-opacity ones. Acts only
/// on eligible iterations; statistics reset afterwards.
inline DensifyReport densify_and_prune(GaussianCloud& cloud, OptimizerState& state, int iteration,
                                       const DensifyConfig& cfg, double scene_extent, std::mt19937_64& rng) {
  require(state.tracks(cloud), "densify_and_prune: optimizer state does not track the cloud");
  DensifyReport report;
  if (!densify_due(iteration, cfg)) return report;
  report.acted = true;
  const std::size_t n0 = cloud.size();

  std::vector<std::uint8_t> clone(n0, 0), split(n0, 0);
  for (std::size_t i = 0; i < n0; ++i) {
    if (state.grad_count[i] == 0) continue;
    const double mean_grad = state.grad_accum[i] / state.grad_count[i];
    if (!(mean_grad >= cfg.grad_threshold)) continue;
    const double max_scale = cloud.scale(i).maxCoeff();
    (max_scale <= cfg.clone_scale_fraction * scene_extent ? clone[i] : split[i]) = 1;
  }

  GaussianCloud next(cloud.sh_degree);
  CloudGradients m1(next), m2(next);
  auto keep = [&](const GaussianCloud& src, std::size_t i, bool copy_moments) {
    next.append_from(src, i);
    if (copy_moments && i < n0) {
      m1.append_from(state.first_moment, i);
      m2.append_from(state.second_moment, i);
    } else {
      m1.resize(next.size());
      m2.resize(next.size());
    }
  };
  auto room = [&] { return cfg.max_gaussians == 0 || next.size() < cfg.max_gaussians; };

  std::normal_distribution<double> normal(0.0, 1.0);
  GaussianCloud spawned(cloud.sh_degree);
  for (std::size_t i = 0; i < n0; ++i) {
    if (split[i]) {
      const Vec3 s = cloud.scale(i);
      const Mat3 r = rotation_from_quat(cloud.quat(i));
      for (int c = 0; c < 2; ++c) {
        const Vec3 offset = r * Vec3(s[0] * normal(rng), s[1] * normal(rng), s[2] * normal(rng));
        spawned.append_from(cloud, i);
        const std::size_t j = spawned.size() - 1;
        spawned.set_mean(j, cloud.mean(i) + offset);
        spawned.set_scale(j, s / cfg.split_factor);
      }
    } else if (clone[i]) {
      spawned.append_from(cloud, i);
    }
  }

  // Originals first (split parents are replaced by their children).
  for (std::size_t i = 0; i < n0; ++i) {
    if (split[i]) {
      ++report.split;
      continue;
    }
    if (cloud.opacity(i) < cfg.prune_opacity) {
      ++report.pruned;
      continue;
    }
    keep(cloud, i, true);
  }
  for (std::size_t j = 0; j < spawned.size(); ++j) {
    if (!room()) break;
    if (spawned.opacity(j) < cfg.prune_opacity) continue;
    keep(spawned, j, false);
  }
  for (std::size_t i = 0; i < n0; ++i) report.cloned += clone[i];

  if (next.empty()) {
    log::warn("densify_and_prune: pruning would empty the cloud; structure left unchanged");
    std::fill(state.grad_accum.begin(), state.grad_accum.end(), 0.0);
    std::fill(state.grad_count.begin(), state.grad_count.end(), 0);
    return DensifyReport{0, 0, 0, true};
  }
  cloud = std::move(next);
  state.first_moment = std::move(m1);
  state.second_moment = std::move(m2);
  state.grad_accum.assign(cloud.size(), 0.0);
  state.grad_count.assign(cloud.size(), 0);
  std::ostringstream os;
  os << "densify @" << iteration << ": cloned " << report.cloned << ", split " << report.split << ", pruned "
     << report.pruned << ", now " << cloud.size();
  log::debug(os.str());
  return report;
}

}  // namespace gsd
