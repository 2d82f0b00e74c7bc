// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"

namespace gsd {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Cumulative signal fractions alphabar_0..alphabar_T, alphabar_0 = 1.
struct NoiseSchedule {
  std::vector<double> alphabar;

  int T() const { return static_cast<int>(alphabar.size()) - 1; }
  double operator[](int t) const { return alphabar.at(static_cast<std::size_t>(t)); }
  double beta(int t) const { return 1.0 - alphabar.at(t) / alphabar.at(t - 1); }

  void validate() const {
    require(alphabar.size() >= 3, "noise schedule needs T >= 2");
    require(alphabar[0] == 1.0, "noise schedule must start at alphabar_0 = 1");
    for (int t = 1; t <= T(); ++t) {
      require(alphabar[t] > 0.0 && alphabar[t] < alphabar[t - 1], "alphabar must be strictly decreasing in (0, 1]");
      const double b = beta(t);
      require(b > 0.0 && b < 1.0, "derived beta_t must lie in (0, 1)");
    }
  }
};

/// Linear-beta schedule: beta_t runs linearly from beta_start (t = 1) to
/// beta_end (t = T).
inline NoiseSchedule make_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  require(T >= 2, "make_schedule: T must be >= 2");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.alphabar.resize(T + 1);
  s.alphabar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
    s.alphabar[t] = s.alphabar[t - 1] * (1.0 - beta);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Denoisers
// ---------------------------------------------------------------------------

/// Noise predictor eps_phi(x_t, t, y). Implementations must tolerate
/// concurrent predict() calls or report single_flight().
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Clip predict(const Clip& x_t, int t, const Image& condition) const = 0;
  virtual bool single_flight() const { return false; }
};

/// Exact posterior-mean noise predictor for clean data ~ Normal(m, s^2 I),
/// applied frame by frame. The condition image is ignored.
class AnalyticGaussianDenoiser final : public Denoiser {
 public:
  AnalyticGaussianDenoiser(Clip data_mean, double data_var, NoiseSchedule schedule)
      : mean_(std::move(data_mean)), var_(data_var), schedule_(std::move(schedule)) {
    require(var_ >= 0.0, "analytic denoiser: data variance must be >= 0");
    require(!mean_.empty(), "analytic denoiser: data mean is empty");
  }

  const Clip& data_mean() const { return mean_; }
  double data_var() const { return var_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Mean for frame f; a single-frame mean broadcasts over every frame.
  const Image& mean_frame(std::size_t f) const { return mean_.size() == 1 ? mean_[0] : mean_.at(f); }

  /// At t = 0 the input is clean and the prediction is its t -> 0 limit, zero.
  Clip predict(const Clip& x_t, int t, const Image& condition) const override;

 private:
  Clip mean_;
  double var_;
  NoiseSchedule schedule_;
};

/// eps_hat = (x_t - sqrt(ab) E[x_0 | x_t]) / sqrt(1 - ab), with the Gaussian
/// posterior mean E[x_0|x_t] = (sqrt(ab) s^2 x_t + (1 - ab) m) / (ab s^2 + 1 - ab).
inline Clip predict_analytic(const Clip& x_t, int t, const AnalyticGaussianDenoiser& den,
                             const NoiseSchedule& schedule) {
  require(t >= 1 && t <= schedule.T(), "predict_analytic: t must lie in [1, T]");
  require(den.data_mean().size() == 1 || den.data_mean().size() == x_t.size(),
          "predict_analytic: data mean frame count mismatch");
  const double ab = schedule[t];
  const double sab = std::sqrt(ab);
  const double s1 = std::sqrt(1.0 - ab);
  const double s2 = den.data_var();
  const double denom = ab * s2 + (1.0 - ab);
  Clip eps;
  eps.reserve(x_t.size());
  for (std::size_t f = 0; f < x_t.size(); ++f) {
    const Image& m = den.mean_frame(f);
    require(m.same_shape(x_t[f]), "predict_analytic: data mean shape mismatch");
    Image e(x_t[f].height, x_t[f].width, x_t[f].channels);
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double x = x_t[f].data[k];
      const double post = s2 == 0.0 ? m.data[k] : (sab * s2 * x + (1.0 - ab) * m.data[k]) / denom;
      e.data[k] = (x - sab * post) / s1;
    }
    eps.push_back(std::move(e));
  }
  return eps;
}

inline Clip AnalyticGaussianDenoiser::predict(const Clip& x_t, int t, const Image&) const {
  if (t == 0) {
    Clip zero;
    for (const Image& f : x_t) zero.emplace_back(f.height, f.width, f.channels);
    return zero;
  }
  return predict_analytic(x_t, t, *this, schedule_);
}

/// Wraps a denoiser with a mutex so single-flight models see one call at a time.
class SerializedDenoiser final : public Denoiser {
 public:
  explicit SerializedDenoiser(const Denoiser& inner) : inner_(inner) {}
  Clip predict(const Clip& x_t, int t, const Image& condition) const override {
    std::lock_guard lock(mutex_);
    return inner_.predict(x_t, t, condition);
  }

 private:
  const Denoiser& inner_;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// DDIM inversion
// ---------------------------------------------------------------------------

namespace ddim_detail {

inline Clip checked_predict(const Denoiser& den, const Clip& x, int t, const Image& condition) {
  Clip eps = den.predict(x, t, condition);
  if (!same_shape(eps, x)) {
    std::ostringstream os;
    os << "denoiser output shape differs from its input at timestep " << t;
    throw PropagationError(os.str());
  }
  if (!all_finite(eps)) {
    std::ostringstream os;
    os << "denoiser produced non-finite noise at timestep " << t;
    throw PropagationError(os.str());
  }
  return eps;
}

/// x_to = sqrt(ab_to) (x0_hat + sqrt(1 - ab_to)/sqrt(ab_to) eps), with
/// x0_hat = x_from / sqrt(ab_from) - sqrt(1 - ab_from) eps / sqrt(ab_from).
inline Clip transfer(const Clip& x_from, const Clip& eps, double ab_from, double ab_to) {
  const double sa_from = std::sqrt(ab_from), s1_from = std::sqrt(1.0 - ab_from);
  const double sa_to = std::sqrt(ab_to), s1_to = std::sqrt(1.0 - ab_to);
  Clip out = x_from;
  for (std::size_t f = 0; f < out.size(); ++f)
    for (std::size_t k = 0; k < out[f].size(); ++k) {
      const double e = eps[f].data[k];
      const double x0_hat = x_from[f].data[k] / sa_from - s1_from * e / sa_from;
      out[f].data[k] = sa_to * (x0_hat + s1_to / sa_to * e);
    }
  return out;
}

}  // namespace ddim_detail

/// One deterministic inversion step from t_prev to t_next (default t_prev + 1).
inline Clip ddim_invert_step(const Clip& x_prev, int t_prev, const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const Image& condition, int t_next = -1) {
  if (t_next < 0) t_next = t_prev + 1;
  require(t_prev >= 0 && t_prev < schedule.T(), "ddim_invert_step: t_prev must lie in [0, T-1]");
  require(t_next > t_prev && t_next <= schedule.T(), "ddim_invert_step: t_next must lie in (t_prev, T]");
  require(all_finite(x_prev), "ddim_invert_step: input must be finite");
  const Clip eps = ddim_detail::checked_predict(denoiser, x_prev, t_prev, condition);
  return ddim_detail::transfer(x_prev, eps, schedule[t_prev], schedule[t_next]);
}

/// Exact inverse of ddim_invert_step: finds x_prev with
/// ddim_invert_step(x_prev, t_prev -> t) == x_t by fixed-point iteration,
/// starting from the ordinary DDIM sampling update.
inline Clip ddim_forward_step(const Clip& x_t, int t, int t_prev, const Denoiser& denoiser,
                              const NoiseSchedule& schedule, const Image& condition, double tol = 1e-15,
                              int max_iter = 200) {
  require(t_prev >= 0 && t_prev < t && t <= schedule.T(), "ddim_forward_step: need 0 <= t_prev < t <= T");
  const double ab_t = schedule[t], ab_p = schedule[t_prev];
  // x_t = cx * x_prev + ce * eps(x_prev)
  const double cx = std::sqrt(ab_t) / std::sqrt(ab_p);
  const double ce = std::sqrt(1.0 - ab_t) - std::sqrt(ab_t) * std::sqrt(1.0 - ab_p) / std::sqrt(ab_p);

  Clip x = ddim_detail::transfer(x_t, ddim_detail::checked_predict(denoiser, x_t, t, condition), ab_t, ab_p);
  for (int it = 0; it < max_iter; ++it) {
    const Clip eps = ddim_detail::checked_predict(denoiser, x, t_prev, condition);
    double change = 0.0, scale = 0.0;
    for (std::size_t f = 0; f < x.size(); ++f)
      for (std::size_t k = 0; k < x[f].size(); ++k) {
        const double next = (x_t[f].data[k] - ce * eps[f].data[k]) / cx;
        change = std::max(change, std::abs(next - x[f].data[k]));
        scale = std::max(scale, std::abs(next));
        x[f].data[k] = next;
      }
    if (change <= tol * std::max(1.0, scale)) break;
  }
  return x;
}

/// Both ends of one deterministic inversion run.
struct InversionResult {
  Clip x_t;
  Clip x_t_minus_tau;
  std::vector<int> timesteps;  // visited timesteps, starting at 0
  std::vector<Clip> states;    // states at each visited timestep (when recorded)
};

/// Inverts x0 up to timestep t in strides of at most `stride`, landing
/// exactly on t - tau so both states come from the same trajectory.
inline InversionResult ddim_invert(const Clip& x0, int t, int tau, const Denoiser& denoiser,
                                   const NoiseSchedule& schedule, const Image& condition, int stride = 25,
                                   bool record_states = false) {
  require(tau > 0 && tau < t && t <= schedule.T(), "ddim_invert: need 0 < tau < t <= T");
  require(stride >= 1, "ddim_invert: stride must be >= 1");
  const int mid = t - tau;
  InversionResult res;
  res.timesteps.push_back(0);
  for (int cur = 0; cur < t;) {
    const int limit = cur < mid ? mid : t;
    cur = std::min(cur + stride, limit);
    res.timesteps.push_back(cur);
  }
  Clip x = x0;
  if (record_states) res.states.push_back(x);
  for (std::size_t k = 1; k < res.timesteps.size(); ++k) {
    x = ddim_invert_step(x, res.timesteps[k - 1], denoiser, schedule, condition, res.timesteps[k]);
    if (res.timesteps[k] == mid) res.x_t_minus_tau = x;
    if (record_states) res.states.push_back(x);
  }
  res.x_t = std::move(x);
  return res;
}

}  // namespace gsd
