// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/diffusion.hpp"
#include "gsd/guidance.hpp"
#include "gsd/metrics.hpp"
#include "gsd/rasterizer.hpp"

namespace gsd {

/// `none` disables distillation entirely (plain RGB + depth training).
enum class DistillMode { none, sds, sds_ddim, gsd };

inline const char* mode_name(DistillMode m) {
  switch (m) {
    case DistillMode::none: return "none";
    case DistillMode::sds: return "sds";
    case DistillMode::sds_ddim: return "sds_ddim";
    case DistillMode::gsd: return "gsd";
  }
  return "?";
}

inline DistillMode parse_mode(const std::string& s) {
  if (s == "none") return DistillMode::none;
  if (s == "sds") return DistillMode::sds;
  if (s == "sds_ddim") return DistillMode::sds_ddim;
  if (s == "gsd") return DistillMode::gsd;
  throw ValidationError("unknown mode '" + s + "' (expected none, sds, sds_ddim or gsd)");
}

/// omega(t) = scale * (1 - alphabar_t) or scale * 1.
struct OmegaWeight {
  enum class Kind { one_minus_alphabar, constant } kind = Kind::one_minus_alphabar;
  double scale = 1.0;

  double operator()(int t, const NoiseSchedule& schedule) const {
    return kind == Kind::constant ? scale : scale * (1.0 - schedule[t]);
  }
};

inline OmegaWeight parse_omega(const std::string& s) {
  if (s == "one_minus_alphabar" || s == "1-alphabar") return {OmegaWeight::Kind::one_minus_alphabar, 1.0};
  if (s == "constant" || s == "1") return {OmegaWeight::Kind::constant, 1.0};
  throw ValidationError("unknown omega '" + s + "' (expected one_minus_alphabar or constant)");
}

struct DistillationConfig {
  DistillMode mode = DistillMode::gsd;
  OmegaWeight omega;
  int t_min = 200;  // timesteps, inclusive
  int t_max = 600;
  int tau = 100;
  int frames_n = 5;
  int anchor_s = 3;
  int activation_iteration = 3000;
  double lambda_depth = 0.05;
  double lambda_gsd = 0.5;
  int inversion_stride = 25;

  void validate(const NoiseSchedule& schedule) const {
    require(activation_iteration >= 0, "gsd_start_iter must be >= 0");
    require(t_min >= 1 && t_min <= t_max && t_max <= schedule.T(), "need 1 <= t_min <= t_max <= T");
    require(tau >= 1 && tau < t_min, "need 1 <= tau < t_min");
    require(frames_n >= 2 && anchor_s >= 2 && anchor_s <= frames_n, "need 2 <= anchor_s <= frames_n");
    require(lambda_depth >= 0.0 && lambda_gsd >= 0.0, "loss weights must be >= 0");
    require(inversion_stride >= 1, "inversion stride must be >= 1");
  }
};

/// Image-space distillation adjoint for one trajectory batch.
struct DistillationGradient {
  Clip rgb;
  Clip depth;  // adjoint on the attached depth channel (GSD depth guidance)
  int t = 0;
  int tau = 0;
  int view_j = -1;
  int view_k = -1;
  bool fell_back = false;

  bool finite() const { return all_finite(rgb) && all_finite(depth); }
};

namespace distill_detail {

inline Clip weighted_difference(const Clip& a, const Clip& b, double omega) {
  Clip out = a;
  for (std::size_t f = 0; f < out.size(); ++f)
    for (std::size_t k = 0; k < out[f].size(); ++k) out[f].data[k] = omega * (a[f].data[k] - b[f].data[k]);
  return out;
}

inline Clip zero_depth(const Clip& like) {
  Clip z;
  for (const Image& f : like) z.emplace_back(f.height, f.width, 1);
  return z;
}

}  // namespace distill_detail

/// omega(t) (eps_hat(x_t, t, y) - eps) with x_t = sqrt(ab) x + sqrt(1 - ab) eps.
inline Clip sds_gradient(const Clip& x, const Denoiser& denoiser, const NoiseSchedule& schedule, int t,
                         const Clip& noise, const Image& condition, const OmegaWeight& omega = {}) {
  require(t >= 1 && t <= schedule.T(), "sds_gradient: t must lie in [1, T]");
  require(same_shape(x, noise), "sds_gradient: noise shape differs from the frames");
  const double sa = std::sqrt(schedule[t]), s1 = std::sqrt(1.0 - schedule[t]);
  Clip x_t = x;
  for (std::size_t f = 0; f < x.size(); ++f)
    for (std::size_t k = 0; k < x[f].size(); ++k) x_t[f].data[k] = sa * x[f].data[k] + s1 * noise[f].data[k];
  const Clip eps = ddim_detail::checked_predict(denoiser, x_t, t, condition);
  return distill_detail::weighted_difference(eps, noise, omega(t, schedule));
}

/// omega(t) (eps_hat(x_t, t) - eps_hat(x_{t-tau}, t - tau)) with both states
/// taken from one inversion run.
inline Clip sds_ddim_gradient(const Clip& x, const Denoiser& denoiser, const NoiseSchedule& schedule, int t, int tau,
                              const Image& condition, const OmegaWeight& omega = {}, int stride = 25) {
  const InversionResult inv = ddim_invert(x, t, tau, denoiser, schedule, condition, stride);
  const Clip eps_t = ddim_detail::checked_predict(denoiser, inv.x_t, t, condition);
  const Clip eps_m = ddim_detail::checked_predict(denoiser, inv.x_t_minus_tau, t - tau, condition);
  return distill_detail::weighted_difference(eps_t, eps_m, omega(t, schedule));
}

/// omega(t) (F_t - F_{t-tau}) with the same guidance applied at both ends.
/// Falls back to the unguided difference when the guidance context fails.
inline DistillationGradient gsd_gradient(const Clip& frames, const Trajectory& trajectory, const Denoiser& denoiser,
                                         const NoiseSchedule& schedule, const GuidanceSpec& spec,
                                         const GuidanceContext& context, int t, int tau, const Image& condition,
                                         const OmegaWeight& omega = {}, int stride = 25) {
  require(frames.size() == trajectory.size(), "gsd_gradient: frame count differs from the trajectory");
  DistillationGradient out;
  out.t = t;
  out.tau = tau;
  const InversionResult inv = ddim_invert(frames, t, tau, denoiser, schedule, condition, stride);
  const Clip eps_t = ddim_detail::checked_predict(denoiser, inv.x_t, t, condition);
  const Clip eps_m = ddim_detail::checked_predict(denoiser, inv.x_t_minus_tau, t - tau, condition);
  const double w = omega(t, schedule);
  try {
    const CorrectedNoise f_t = correct_noise(eps_t, inv.x_t, t, spec, context, schedule);
    const CorrectedNoise f_m = correct_noise(eps_m, inv.x_t_minus_tau, t - tau, spec, context, schedule);
    out.rgb = distill_detail::weighted_difference(f_t.rgb, f_m.rgb, w);
    out.depth = distill_detail::weighted_difference(f_t.depth, f_m.depth, w);
  } catch (const std::exception& e) {
    log::warn(std::string("gsd: guidance failed (") + e.what() + "); using the unguided difference");
    out.rgb = distill_detail::weighted_difference(eps_t, eps_m, w);
    out.depth = distill_detail::zero_depth(frames);
    out.fell_back = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training losses
// ---------------------------------------------------------------------------

inline constexpr double kL1Weight = 0.8;
inline constexpr double kDssimWeight = 0.2;
inline constexpr double kDepthLossAlpha = 0.5;  // rendered alpha needed for a pixel to enter L_depth

struct DepthLoss {
  double value = 0.0;
  Image grad;  // d value / d rendered depth
  bool valid = false;
};

/// 1 - pcc(rendered depth, monocular depth) over pixels with rendered alpha
/// above 0.5 and a positive monocular depth.
inline DepthLoss depth_loss(const Image& rendered_depth, const Image& rendered_alpha, const Image& mono_depth) {
  require(rendered_depth.same_shape(mono_depth) && rendered_depth.same_shape(rendered_alpha),
          "depth loss: shape mismatch");
  DepthLoss out;
  out.grad = Image(rendered_depth.height, rendered_depth.width, 1);
  std::vector<double> a, b;
  std::vector<std::size_t> where;
  for (std::size_t k = 0; k < mono_depth.size(); ++k)
    if (mono_depth.data[k] > 0.0 && rendered_alpha.data[k] > kDepthLossAlpha) {
      a.push_back(mono_depth.data[k]);
      b.push_back(rendered_depth.data[k]);
      where.push_back(k);
    }
  if (a.size() < 16) return out;
  double r = 0.0;
  try {
    r = pcc(a, b);
  } catch (const ValidationError&) {
    return out;
  }
  out.valid = true;
  out.value = 1.0 - r;
  const auto g = pcc_grad_b(a, b);
  for (std::size_t k = 0; k < where.size(); ++k) out.grad.data[where[k]] = -g[k];
  return out;
}

struct TotalLoss {
  double value = 0.0;
  double rgb = 0.0;    // L_RGB
  double depth = 0.0;  // L_depth (unweighted)
  double ssim = 0.0;
  Image d_rgb;
  Image d_depth;
};

/// L = L_RGB + lambda_depth L_depth with L_RGB = 0.8 mean|r - g| + 0.2 (1 - SSIM).
/// The GSD term enters as an adjoint elsewhere.
inline TotalLoss total_loss(const RenderedFrame& rendered, const Image& gt, const Image* mono_depth,
                            double lambda_depth) {
  require(rendered.rgb.same_shape(gt), "total_loss: render and ground truth differ in resolution");
  TotalLoss out;
  const double n = static_cast<double>(gt.size());
  out.d_rgb = Image(gt.height, gt.width, gt.channels);
  double l1 = 0.0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const double d = rendered.rgb.data[k] - gt.data[k];
    l1 += std::abs(d);
    out.d_rgb.data[k] = kL1Weight * feature_detail::sgn(d) / n;
  }
  l1 /= n;
  const SsimResult s = ssim_with_grad(rendered.rgb, gt);
  out.ssim = s.value;
  for (std::size_t k = 0; k < gt.size(); ++k) out.d_rgb.data[k] -= kDssimWeight * s.grad.data[k];
  out.rgb = kL1Weight * l1 + kDssimWeight * (1.0 - s.value);
  out.value = out.rgb;
  out.d_depth = Image(gt.height, gt.width, 1);
  if (mono_depth && lambda_depth > 0.0) {
    const DepthLoss dl = depth_loss(rendered.depth, rendered.alpha, *mono_depth);
    if (dl.valid) {
      out.depth = dl.value;
      out.value += lambda_depth * dl.value;
      for (std::size_t k = 0; k < dl.grad.size(); ++k) out.d_depth.data[k] = lambda_depth * dl.grad.data[k];
    }
  }
  return out;
}

struct GateFlags {
  bool gsd = false;
  bool depth = false;
};

inline GateFlags schedule_gate(int iteration, const DistillationConfig& cfg, bool has_depth_source = true) {
  require(iteration >= 0, "schedule_gate: iteration must be >= 0");
  return {cfg.mode != DistillMode::none && iteration >= cfg.activation_iteration, has_depth_source};
}

}  // namespace gsd
