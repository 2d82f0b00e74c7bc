// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gsd/diffusion.hpp"
#include "oracles.hpp"

using namespace gsd;

namespace {

Clip random_clip(std::mt19937_64& rng, int frames, int h, int w, double lo = -1.0, double hi = 1.0) {
  Clip clip;
  for (int f = 0; f < frames; ++f) clip.push_back(oracle::random_image(rng, h, w, 3, lo, hi));
  return clip;
}

double relative_error(const Clip& got, const Clip& want) {
  long double num = 0, den = 0;
  for (std::size_t f = 0; f < want.size(); ++f)
    for (std::size_t k = 0; k < want[f].size(); ++k) {
      const long double d = got[f].data[k] - want[f].data[k];
      num += d * d;
      den += static_cast<long double>(want[f].data[k]) * want[f].data[k];
    }
  return static_cast<double>(std::sqrt(num / den));
}

class NanDenoiser final : public Denoiser {
 public:
  Clip predict(const Clip& x_t, int, const Image&) const override {
    Clip out = x_t;
    out[0].data[0] = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

TEST(Schedule, TwoStepProduct) {
  const NoiseSchedule s = make_schedule(2, 0.5, 0.5);
  ASSERT_EQ(s.T(), 2);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_EQ(s[1], 0.5);
  EXPECT_EQ(s[2], 0.25);
}

TEST(Schedule, DefaultMatchesRunningProductOracle) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  const auto want = oracle::alphabar_product(1000, 1e-4, 0.02);
  EXPECT_EQ(s[1], 1.0 - 1e-4);
  EXPECT_LT(s[1000], 1e-4);
  for (int t = 0; t <= 1000; ++t) EXPECT_NEAR(s[t] / want[t], 1.0, 1e-12) << "t = " << t;
}

TEST(Schedule, PropertyStrictlyDecreasing) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(1e-5, 0.2);
  std::uniform_int_distribution<int> len(2, 2000);
  for (int trial = 0; trial < 50; ++trial) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const NoiseSchedule s = make_schedule(len(rng), a, b);
    for (int t = 1; t <= s.T(); ++t) ASSERT_LT(s[t], s[t - 1]);
  }
}

TEST(Schedule, RejectsInvalidBounds) {
  EXPECT_THROW(make_schedule(1), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.2, 0.1), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), ValidationError);
}

// ---------------------------------------------------------------------------
// Single inversion step
// ---------------------------------------------------------------------------

TEST(InvertStep, ZeroDenoiserIsPureRescale) {
  std::mt19937_64 rng(32);
  const NoiseSchedule s = make_schedule();
  const oracle::ConstantDenoiser zero(0.0);
  const Clip x = random_clip(rng, 2, 4, 5);
  for (int t_prev : {1, 10, 500, 998}) {
    const Clip y = ddim_invert_step(x, t_prev, zero, s, Image{});
    const double k = std::sqrt(s[t_prev + 1] / s[t_prev]);
    for (std::size_t f = 0; f < x.size(); ++f)
      for (std::size_t i = 0; i < x[f].size(); ++i) EXPECT_NEAR(y[f].data[i], k * x[f].data[i], 1e-15);
  }
}

TEST(InvertStep, ConstantNoiseFromZeroStateMatchesHandSubstitution) {
  const NoiseSchedule s = make_schedule();
  const double eps_c = 0.37;
  const oracle::ConstantDenoiser constant(eps_c);
  const Clip zero_state{Image(3, 3, 3)};
  for (int t_prev : {1, 250, 700}) {
    const Clip y = ddim_invert_step(zero_state, t_prev, constant, s, Image{});
    const double ab_t = s[t_prev + 1], ab_p = s[t_prev];
    const double want = std::sqrt(1.0 - ab_t) * eps_c + std::sqrt(ab_t) * (-std::sqrt(1.0 - ab_p) / std::sqrt(ab_p)) * eps_c;
    for (double v : y[0].data) EXPECT_NEAR(v, want, 1e-12);
  }
}

TEST(InvertStep, NonFiniteNoiseNamesTimestep) {
  const NoiseSchedule s = make_schedule();
  const NanDenoiser bad;
  try {
    ddim_invert_step(Clip{Image(2, 2, 3)}, 417, bad, s, Image{});
    FAIL() << "expected PropagationError";
  } catch (const PropagationError& e) {
    EXPECT_NE(std::string(e.what()).find("417"), std::string::npos) << e.what();
  }
}

TEST(InvertStep, RejectsOutOfRangeTimestep) {
  const NoiseSchedule s = make_schedule();
  const oracle::ConstantDenoiser zero(0.0);
  EXPECT_THROW(ddim_invert_step(Clip{Image(2, 2, 3)}, s.T(), zero, s, Image{}), ValidationError);
  EXPECT_THROW(ddim_invert_step(Clip{Image(2, 2, 3)}, -1, zero, s, Image{}), ValidationError);
}

TEST(InvertStep, PropertyRoundTripWithForwardStep) {
  std::mt19937_64 rng(33);
  const NoiseSchedule s = make_schedule();
  std::uniform_int_distribution<int> pick_t(0, s.T() - 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Clip m = random_clip(rng, 1, 4, 4, 0.0, 1.0);
    const AnalyticGaussianDenoiser den(m, 0.05 + 0.2 * (trial % 5), s);
    const Clip x = random_clip(rng, 2, 4, 4);
    const int t_prev = pick_t(rng);
    const Clip y = ddim_invert_step(x, t_prev, den, s, Image{});
    const Clip back = ddim_forward_step(y, t_prev + 1, t_prev, den, s, Image{});
    EXPECT_LT(relative_error(back, x), 1e-6) << "t_prev = " << t_prev;
  }
}

// ---------------------------------------------------------------------------
// Multi-step inversion
// ---------------------------------------------------------------------------

TEST(Invert, ZeroDenoiserChainIsRescale) {
  std::mt19937_64 rng(34);
  const NoiseSchedule s = make_schedule();
  const oracle::ConstantDenoiser zero(0.0);
  const Clip x0 = random_clip(rng, 1, 3, 3);
  for (int tau : {1, 40, 399}) {
    const InversionResult r = ddim_invert(x0, tau + 1, tau, zero, s, Image{});
    for (std::size_t i = 0; i < x0[0].size(); ++i) {
      EXPECT_NEAR(r.x_t_minus_tau[0].data[i], std::sqrt(s[1]) * x0[0].data[i], 1e-14);
      EXPECT_NEAR(r.x_t[0].data[i], std::sqrt(s[tau + 1]) * x0[0].data[i], 1e-13);
    }
  }
}

TEST(Invert, LandsExactlyOnBothTimesteps) {
  const NoiseSchedule s = make_schedule();
  const oracle::ConstantDenoiser zero(0.0);
  const InversionResult r = ddim_invert(Clip{Image(1, 1, 3)}, 610, 37, zero, s, Image{}, 25);
  EXPECT_EQ(r.timesteps.front(), 0);
  EXPECT_EQ(r.timesteps.back(), 610);
  EXPECT_NE(std::find(r.timesteps.begin(), r.timesteps.end(), 573), r.timesteps.end());
  for (std::size_t k = 1; k < r.timesteps.size(); ++k) {
    EXPECT_GT(r.timesteps[k], r.timesteps[k - 1]);
    EXPECT_LE(r.timesteps[k] - r.timesteps[k - 1], 25);
  }
}

TEST(Invert, RecordedStatesEndAtResult) {
  std::mt19937_64 rng(35);
  const NoiseSchedule s = make_schedule();
  const AnalyticGaussianDenoiser den(random_clip(rng, 1, 3, 3, 0.0, 1.0), 0.1, s);
  const InversionResult r = ddim_invert(random_clip(rng, 1, 3, 3), 300, 50, den, s, Image{}, 40, true);
  ASSERT_EQ(r.states.size(), r.timesteps.size());
  EXPECT_EQ(r.states.back(), r.x_t);
  const auto mid = std::find(r.timesteps.begin(), r.timesteps.end(), 250) - r.timesteps.begin();
  EXPECT_EQ(r.states[mid], r.x_t_minus_tau);
}

TEST(Invert, BitwiseDeterministic) {
  std::mt19937_64 rng(36);
  const NoiseSchedule s = make_schedule();
  const AnalyticGaussianDenoiser den(random_clip(rng, 2, 5, 5, 0.0, 1.0), 0.2, s);
  const Clip x0 = random_clip(rng, 2, 5, 5);
  const InversionResult a = ddim_invert(x0, 800, 100, den, s, Image{}, 10);
  const InversionResult b = ddim_invert(x0, 800, 100, den, s, Image{}, 10);
  EXPECT_EQ(a.x_t, b.x_t);
  EXPECT_EQ(a.x_t_minus_tau, b.x_t_minus_tau);
}

TEST(Invert, PropertyDeltaDataFixedPoint) {
  std::mt19937_64 rng(37);
  const NoiseSchedule s = make_schedule();
  const Clip m = random_clip(rng, 1, 4, 4, 0.0, 1.0);
  const AnalyticGaussianDenoiser den(m, 0.0, s);
  for (int t : {2, 50, 333, 1000}) {
    const InversionResult r = ddim_invert(m, t, 1, den, s, Image{}, 7);
    for (std::size_t i = 0; i < m[0].size(); ++i)
      EXPECT_NEAR(r.x_t[0].data[i], std::sqrt(s[t]) * m[0].data[i], 1e-14) << "t = " << t;
  }
}

TEST(Invert, RejectsGapNotBelowTimestep) {
  const NoiseSchedule s = make_schedule();
  const oracle::ConstantDenoiser zero(0.0);
  EXPECT_THROW(ddim_invert(Clip{Image(1, 1, 3)}, 100, 100, zero, s, Image{}), ValidationError);
  EXPECT_THROW(ddim_invert(Clip{Image(1, 1, 3)}, 100, 0, zero, s, Image{}), ValidationError);
  EXPECT_THROW(ddim_invert(Clip{Image(1, 1, 3)}, 1001, 10, zero, s, Image{}), ValidationError);
}

// ---------------------------------------------------------------------------
// Analytic denoiser
// ---------------------------------------------------------------------------

TEST(AnalyticDenoiser, DeltaDataCollapsesToMean) {
  std::mt19937_64 rng(38);
  const NoiseSchedule s = make_schedule();
  const Clip m = random_clip(rng, 1, 3, 3, 0.0, 1.0);
  const AnalyticGaussianDenoiser den(m, 0.0, s);
  const Clip x = random_clip(rng, 1, 3, 3);
  const int t = 420;
  const Clip eps = predict_analytic(x, t, den, s);
  for (std::size_t i = 0; i < x[0].size(); ++i)
    EXPECT_NEAR(eps[0].data[i], (x[0].data[i] - std::sqrt(s[t]) * m[0].data[i]) / std::sqrt(1.0 - s[t]), 1e-13);
}

TEST(AnalyticDenoiser, NoiselessInputPredictsZero) {
  std::mt19937_64 rng(39);
  const NoiseSchedule s = make_schedule();
  const Clip m = random_clip(rng, 1, 3, 3, 0.0, 1.0);
  const AnalyticGaussianDenoiser den(m, 0.0, s);
  const int t = 77;
  Clip x = m;
  for (double& v : x[0].data) v *= std::sqrt(s[t]);
  const Clip eps = predict_analytic(x, t, den, s);
  for (double v : eps[0].data) EXPECT_EQ(v, 0.0);
}

TEST(AnalyticDenoiser, MatchesMonteCarloPosterior) {
  std::mt19937_64 rng(40);
  const NoiseSchedule s = make_schedule();
  std::uniform_int_distribution<int> pick_t(20, 980);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int trial = 0; trial < 4; ++trial) {
    const double m = u(rng), x_t = u(rng);
    const int t = pick_t(rng);
    const AnalyticGaussianDenoiser den(Clip{Image(1, 1, 1, m)}, 1.0, s);
    const double got = predict_analytic(Clip{Image(1, 1, 1, x_t)}, t, den, s)[0].data[0];
    const auto mc = oracle::mc_posterior_eps(x_t, m, 1.0, s[t], 200000, 1000 + trial);
    EXPECT_LE(std::abs(got - mc.mean), 3.0 * mc.stderr_) << "t = " << t << " analytic " << got << " MC " << mc.mean;
  }
}

TEST(AnalyticDenoiser, TimestepZeroPredictsZero) {
  const NoiseSchedule s = make_schedule();
  const AnalyticGaussianDenoiser den(Clip{Image(2, 2, 3, 0.5)}, 0.1, s);
  const Clip eps = den.predict(Clip{Image(2, 2, 3, 0.9)}, 0, Image{});
  for (double v : eps[0].data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(predict_analytic(Clip{Image(2, 2, 3)}, 0, den, s), ValidationError);
}

TEST(AnalyticDenoiser, PerFrameMeanAndShapeChecks) {
  const NoiseSchedule s = make_schedule();
  EXPECT_THROW(AnalyticGaussianDenoiser(Clip{Image(2, 2, 3)}, -0.1, s), ValidationError);
  const AnalyticGaussianDenoiser two(Clip{Image(2, 2, 3, 0.2), Image(2, 2, 3, 0.8)}, 0.0, s);
  EXPECT_THROW(predict_analytic(Clip{Image(2, 2, 3), Image(2, 2, 3), Image(2, 2, 3)}, 5, two, s), ValidationError);
  EXPECT_THROW(predict_analytic(Clip{Image(2, 3, 3), Image(2, 3, 3)}, 5, two, s), ValidationError);
  const Clip eps = predict_analytic(Clip{Image(2, 2, 3), Image(2, 2, 3)}, 5, two, s);
  EXPECT_LT(eps[1].data[0], eps[0].data[0]);  // larger mean, more negative residual
}

TEST(SerializedDenoiser, ForwardsPredictionsUnchanged) {
  std::mt19937_64 rng(41);
  const NoiseSchedule s = make_schedule();
  const AnalyticGaussianDenoiser den(random_clip(rng, 1, 3, 3, 0.0, 1.0), 0.3, s);
  const SerializedDenoiser wrapped(den);
  const Clip x = random_clip(rng, 2, 3, 3);
  EXPECT_EQ(wrapped.predict(x, 123, Image{}), den.predict(x, 123, Image{}));
}
