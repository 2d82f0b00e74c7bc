// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gsd/guidance.hpp"
#include "gsd/rasterizer.hpp"
#include "oracles.hpp"

using namespace gsd;

namespace {

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& e : v) e = u(rng);
  return v;
}

WarpResult full_target(const Image& depth) {
  WarpResult w;
  w.depth = depth;
  w.mask.assign(depth.size(), 1);
  w.coverage = 1.0;
  return w;
}

/// Camera at `centre` with the identity orientation.
Camera shifted(Camera cam, const Vec3& centre) {
  cam.translation = -(cam.rotation * centre);
  return cam;
}

Camera random_pose(std::mt19937_64& rng, const Camera& base, double max_angle, double max_shift) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  Camera cam = base;
  cam.rotation = Eigen::AngleAxisd(max_angle * u(rng), axis).toRotationMatrix();
  cam.translation = Vec3(max_shift * u(rng), max_shift * u(rng), max_shift * u(rng));
  return cam;
}

struct CapturedLog {
  std::vector<std::pair<log::Level, std::string>> lines;
  log::ScopedSink sink{[this](log::Level l, const std::string& m) { lines.emplace_back(l, m); }};
  bool has(log::Level level) const {
    return std::any_of(lines.begin(), lines.end(), [&](const auto& e) { return e.first == level; });
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Conversion factor
// ---------------------------------------------------------------------------

TEST(Gamma, DirectSubstitution) {
  const NoiseSchedule s = make_schedule(2, 0.5, 0.5);  // alphabar 1, 0.5, 0.25
  EXPECT_EQ(gamma(1, s), 1.0);
  EXPECT_NEAR(gamma(2, s), 0.5 / std::sqrt(0.75), 1e-15);
  EXPECT_NEAR(gamma(2, s), 0.57735, 1e-5);
}

TEST(Gamma, RejectsTimestepZeroAndDecreases) {
  const NoiseSchedule s = make_schedule();
  EXPECT_THROW(gamma(0, s), ValidationError);
  EXPECT_THROW(gamma(s.T() + 1, s), ValidationError);
  for (int t = 2; t <= s.T(); ++t) ASSERT_LT(gamma(t, s), gamma(t - 1, s));
}

TEST(RhoSchedule, PiecewiseConstant) {
  RhoSchedule rho{{{0, 2.0}, {300, 5.0}, {700, 0.0}}};
  EXPECT_EQ(rho(1), 2.0);
  EXPECT_EQ(rho(299), 2.0);
  EXPECT_EQ(rho(300), 5.0);
  EXPECT_EQ(rho(700), 0.0);
  EXPECT_EQ(RhoSchedule::constant(3.5)(999), 3.5);
}

// ---------------------------------------------------------------------------
// Depth warping
// ---------------------------------------------------------------------------

TEST(Warp, IdentityPoseReturnsInput) {
  std::mt19937_64 rng(51);
  const Camera cam = oracle::square_camera(8, 9.0);
  const Image depth = oracle::random_image(rng, 8, 8, 1, 1.0, 5.0);
  const WarpResult w = warp_depth(depth, cam, cam);
  EXPECT_EQ(w.depth, depth);
  EXPECT_EQ(std::count(w.mask.begin(), w.mask.end(), 1), 64);
  EXPECT_EQ(w.coverage, 1.0);
}

TEST(Warp, IdentityPoseWithGeneralOrientation) {
  std::mt19937_64 rng(52);
  const Camera cam = random_pose(rng, oracle::square_camera(8, 9.0), 0.8, 1.0);
  const Image depth = oracle::random_image(rng, 8, 8, 1, 1.0, 5.0);
  const WarpResult w = warp_depth(depth, cam, cam);
  EXPECT_EQ(std::count(w.mask.begin(), w.mask.end(), 1), 64);
  for (std::size_t k = 0; k < depth.size(); ++k) EXPECT_NEAR(w.depth.data[k], depth.data[k], 1e-12);
}

TEST(Warp, StereoTranslationOnPlaneShiftsByDisparity) {
  const Camera src = oracle::square_camera(8, 10.0);
  const Camera dst = shifted(src, Vec3(0.2, 0.0, 0.0));  // disparity fx b / d = 1 px
  const Image plane(8, 8, 1, 2.0);
  const WarpResult w = warp_depth(plane, src, dst);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool expect_hit = x < 7;
      EXPECT_EQ(w.mask[y * 8 + x], expect_hit) << y << "," << x;
      if (expect_hit) {
        EXPECT_EQ(w.depth(y, x), 2.0);
      }
    }
}

TEST(Warp, MatchesBruteForceOracleExactly) {
  std::mt19937_64 rng(53);
  const Camera base = oracle::square_camera(8, 8.0);
  int collisions_seen = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Camera src = random_pose(rng, base, 0.2, 0.3);
    Camera dst = random_pose(rng, base, 0.6, 0.8);
    // Mix near and far layers so some destination pixels receive several hits.
    Image depth = oracle::random_image(rng, 8, 8, 1, 1.5, 6.0);
    if (trial % 4 == 0) depth.data[5] = -1.0;  // invalid source pixel
    const WarpResult w = warp_depth(depth, src, dst);
    const oracle::WarpOracle want = oracle::warp_bruteforce(depth, src, dst);
    EXPECT_EQ(w.mask, want.mask) << "trial " << trial;
    EXPECT_EQ(w.depth, want.depth) << "trial " << trial;
    std::size_t valid = 0;
    for (double d : depth.data) valid += d > 0.0;
    // Fewer covered pixels than landings that stayed in frame means collisions.
    std::size_t landed = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        Image one(8, 8, 1);
        one(y, x) = depth(y, x);
        const WarpResult single = warp_depth(one, src, dst);
        landed += std::count(single.mask.begin(), single.mask.end(), 1);
      }
    collisions_seen += landed > static_cast<std::size_t>(std::count(w.mask.begin(), w.mask.end(), 1));
    EXPECT_LE(landed, valid);
  }
  EXPECT_GT(collisions_seen, 0) << "no case exercised collision resolution";
}

TEST(Warp, PropertyInverseRecoversDepthOnDoubleMask) {
  std::mt19937_64 rng(54);
  std::uniform_real_distribution<double> u(-0.3, 0.3), z(2.0, 4.0);
  const Camera src = oracle::square_camera(16, 14.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Camera dst = shifted(src, Vec3(u(rng), u(rng), 0.0));
    Image depth(16, 16, 1);
    const double near = z(rng), far = near + 1.5;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) depth(y, x) = x < 8 ? near : far;
    const WarpResult fwd = warp_depth(depth, src, dst);
    const WarpResult back = warp_depth(fwd.depth, dst, src);
    int checked = 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        if (!back.mask[y * 16 + x]) continue;
        // Rounding moves a sample by at most one pixel per direction.
        bool match = false;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = y + dy, sx = x + dx;
            if (sy < 0 || sx < 0 || sy >= 16 || sx >= 16) continue;
            match = match || std::abs(back.depth(y, x) - depth(sy, sx)) <= 1e-6;
          }
        EXPECT_TRUE(match) << "trial " << trial << " pixel " << y << "," << x;
        ++checked;
      }
    EXPECT_GT(checked, 100);
  }
}

TEST(Warp, LowCoverageIsUnusable) {
  const Camera src = oracle::square_camera(8, 8.0);
  Camera away = src;
  away.rotation = Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitY()).toRotationMatrix();
  CapturedLog captured;
  const WarpResult w = warp_depth(Image(8, 8, 1, 3.0), src, away);
  EXPECT_EQ(w.coverage, 0.0);
  EXPECT_FALSE(w.usable());
  EXPECT_TRUE(captured.has(log::Level::debug));
}

TEST(Warp, RejectsMismatchedIntrinsicsOrShape) {
  const Camera a = oracle::square_camera(8, 8.0);
  Camera b = a;
  b.fx = 9.0;
  EXPECT_THROW(warp_depth(Image(8, 8, 1, 1.0), a, b), ValidationError);
  EXPECT_THROW(warp_depth(Image(8, 7, 1, 1.0), a, a), ValidationError);
}

// ---------------------------------------------------------------------------
// Relative depth alignment
// ---------------------------------------------------------------------------

TEST(ScaleRelativeDepth, PerfectFitIsIdentity) {
  std::mt19937_64 rng(55);
  const Image g = oracle::random_image(rng, 6, 6, 1, 1.0, 4.0);
  const DepthAlignment fit = scale_relative_depth(g, g, std::vector<std::uint8_t>(36, 1));
  EXPECT_NEAR(fit.a, 1.0, 1e-9);
  EXPECT_NEAR(fit.b, 0.0, 1e-9);
}

TEST(ScaleRelativeDepth, ExactAffineInverse) {
  std::mt19937_64 rng(56);
  const Image g = oracle::random_image(rng, 6, 6, 1, 1.0, 4.0);
  Image rel = g;
  for (double& v : rel.data) v = 2.0 * v + 3.0;
  const DepthAlignment fit = scale_relative_depth(rel, g, std::vector<std::uint8_t>(36, 1));
  EXPECT_NEAR(fit.a, 0.5, 1e-12);
  EXPECT_NEAR(fit.b, -1.5, 1e-12);
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(fit.depth.data[k], g.data[k], 1e-12);
}

TEST(ScaleRelativeDepth, NoisyFitMatchesNormalEquations) {
  std::mt19937_64 rng(57);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    const Image g = oracle::random_image(rng, 8, 8, 1, 1.0, 4.0);
    Image rel = g;
    for (double& v : rel.data) v = 0.3 * v - 0.7 + noise(rng);
    std::vector<std::uint8_t> valid(64, 1);
    for (int k = 0; k < 10; ++k) valid[(k * 7 + trial) % 64] = 0;
    std::vector<double> xs, ys;
    for (std::size_t k = 0; k < 64; ++k)
      if (valid[k]) {
        xs.push_back(rel.data[k]);
        ys.push_back(g.data[k]);
      }
    const auto [a, b] = oracle::affine_fit(xs, ys);
    const DepthAlignment fit = scale_relative_depth(rel, g, valid);
    EXPECT_NEAR(fit.a, a, 1e-9);
    EXPECT_NEAR(fit.b, b, 1e-9);
  }
}

TEST(ScaleRelativeDepth, RejectsDegenerateInput) {
  std::mt19937_64 rng(58);
  const Image g = oracle::random_image(rng, 6, 6, 1, 1.0, 4.0);
  EXPECT_THROW(scale_relative_depth(Image(6, 6, 1, 2.0), g, std::vector<std::uint8_t>(36, 1)), ValidationError);
  std::vector<std::uint8_t> few(36, 0);
  std::fill(few.begin(), few.begin() + 15, 1);
  EXPECT_THROW(scale_relative_depth(g, g, few), ValidationError);
  Image flipped = g;
  for (double& v : flipped.data) v = -v;
  EXPECT_THROW(scale_relative_depth(flipped, g, std::vector<std::uint8_t>(36, 1)), ValidationError);
}

// ---------------------------------------------------------------------------
// Pearson correlation
// ---------------------------------------------------------------------------

TEST(Pcc, Examples) {
  std::mt19937_64 rng(59);
  const auto a = random_vector(rng, 50);
  std::vector<double> affine(a.size()), neg(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    affine[k] = 2.0 * a[k] + 3.0;
    neg[k] = -a[k];
  }
  EXPECT_EQ(pcc(a, a), 1.0);
  EXPECT_EQ(pcc(a, affine), 1.0);
  EXPECT_EQ(pcc(a, neg), -1.0);
}

TEST(Pcc, MatchesTwoPassOracle) {
  std::mt19937_64 rng(60);
  std::uniform_int_distribution<std::size_t> len(2, 300);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = len(rng);
    const auto a = random_vector(rng, n), b = random_vector(rng, n, 0.0, 10.0);
    EXPECT_NEAR(pcc(a, b), oracle::pcc_two_pass(a, b), 1e-12);
  }
}

TEST(Pcc, PropertyAffineInvariantAndBounded) {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> scale(0.01, 100.0), shift(-50.0, 50.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_vector(rng, 40), b = random_vector(rng, 40);
    auto b2 = b;
    const double s = scale(rng), c = shift(rng);
    for (double& v : b2) v = s * v + c;
    const double r = pcc(a, b);
    EXPECT_GE(r, -1.0);
    EXPECT_LE(r, 1.0);
    EXPECT_NEAR(pcc(a, b2), r, 1e-12);
  }
}

TEST(Pcc, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(62);
  const auto a = random_vector(rng, 20);
  auto b = random_vector(rng, 20);
  const auto g = pcc_grad_b(a, b);
  for (std::size_t k = 0; k < b.size(); ++k) {
    const double numeric = oracle::central_difference(
        [&](double v) {
          auto bb = b;
          bb[k] = v;
          return pcc(a, bb);
        },
        b[k], 1e-6);
    EXPECT_NEAR(g[k], numeric, 1e-8);
  }
}

TEST(Pcc, RejectsDegenerateInput) {
  const std::vector<double> a{1.0, 2.0, 3.0}, flat{4.0, 4.0, 4.0}, shorter{1.0, 2.0};
  EXPECT_THROW(pcc(a, flat), ValidationError);
  EXPECT_THROW(pcc(a, shorter), ValidationError);
  EXPECT_THROW(pcc(std::vector<double>{1.0}, std::vector<double>{2.0}), ValidationError);
}

// ---------------------------------------------------------------------------
// Depth-warp guidance distance
// ---------------------------------------------------------------------------

TEST(DepthDistance, PerfectAgreementIsZero) {
  std::mt19937_64 rng(63);
  Clip depth, alpha;
  std::vector<WarpResult> targets;
  for (int f = 0; f < 3; ++f) {
    depth.push_back(oracle::random_image(rng, 8, 8, 1, 1.0, 4.0));
    alpha.emplace_back(8, 8, 1, 0.9);
    targets.push_back(full_target(depth.back()));
  }
  const DepthDistance d = depth_guidance_distance(depth, alpha, targets);
  EXPECT_EQ(d.value, 0.0);
  EXPECT_EQ(d.frames_used, 3u);
}

TEST(DepthDistance, OneAntiCorrelatedFrameGivesTwo) {
  std::mt19937_64 rng(64);
  Clip depth, alpha;
  std::vector<WarpResult> targets;
  for (int f = 0; f < 3; ++f) {
    depth.push_back(oracle::random_image(rng, 8, 8, 1, 1.0, 4.0));
    alpha.emplace_back(8, 8, 1, 0.9);
    Image tgt = depth.back();
    if (f == 1)
      for (double& v : tgt.data) v = 10.0 - v;
    targets.push_back(full_target(tgt));
  }
  EXPECT_EQ(depth_guidance_distance(depth, alpha, targets).value, 2.0);
}

TEST(DepthDistance, MatchesWarpAndPccComposition) {
  std::mt19937_64 rng(65);
  const Camera cam_j = oracle::square_camera(16, 16.0);
  const Camera cam_k = look_at(Vec3(0.6, -0.1, 0.2), Vec3(0.0, 0.0, 3.2), Vec3(0, -1, 0), 16.0, 16, 16);
  const GaussianCloud truth = oracle::random_scene(rng, 20, 1);
  GaussianCloud estimate = truth;
  std::normal_distribution<double> n(0.0, 0.05);
  for (double& m : estimate.position) m += n(rng);
  const Trajectory traj = interpolate_trajectory(cam_j, cam_k, 5, 3);
  const Image src = render(truth, cam_j).depth;
  const auto targets = build_depth_targets(src, traj);
  Clip depth, alpha;
  for (const Camera& pose : traj.poses) {
    const RenderedFrame f = render(estimate, pose);
    depth.push_back(f.depth);
    alpha.push_back(f.alpha);
  }
  const DepthDistance got = depth_guidance_distance(depth, alpha, targets);

  double want = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const oracle::WarpOracle w = oracle::warp_bruteforce(src, traj.poses.front(), traj.poses[i]);
    const auto covered = std::count(w.mask.begin(), w.mask.end(), 1);
    if (static_cast<double>(covered) / static_cast<double>(w.mask.size()) < 0.05) continue;
    std::vector<double> a, b;
    for (std::size_t k = 0; k < w.mask.size(); ++k)
      if (w.mask[k] && alpha[i].data[k] > 0.5) {
        a.push_back(w.depth.data[k]);
        b.push_back(depth[i].data[k]);
      }
    if (a.size() < 2) continue;
    want += 1.0 - oracle::pcc_two_pass(a, b);
    ++used;
  }
  ASSERT_GT(used, 2u);
  EXPECT_EQ(got.frames_used, used);
  EXPECT_NEAR(got.value, want, 1e-9);
  EXPECT_GT(got.value, 1e-4);
}

TEST(DepthDistance, PropertyInvariantToAffineRescaleOfRenderedDepth) {
  std::mt19937_64 rng(66);
  std::uniform_real_distribution<double> scale(0.1, 10.0), shift(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    Clip depth, alpha;
    std::vector<WarpResult> targets;
    for (int f = 0; f < 4; ++f) {
      depth.push_back(oracle::random_image(rng, 8, 8, 1, 1.0, 4.0));
      alpha.push_back(oracle::random_image(rng, 8, 8, 1, 0.0, 1.0));
      WarpResult tgt = full_target(oracle::random_image(rng, 8, 8, 1, 1.0, 4.0));
      for (std::size_t k = 0; k < tgt.mask.size(); k += 3) tgt.mask[k] = 0;
      targets.push_back(tgt);
    }
    const double before = depth_guidance_distance(depth, alpha, targets).value;
    const double s = scale(rng), c = shift(rng);
    for (Image& d : depth)
      for (double& v : d.data) v = s * v + c;
    EXPECT_NEAR(depth_guidance_distance(depth, alpha, targets).value, before, 1e-9);
  }
}

TEST(DepthDistance, AllFramesSkippedWarnsAndContributesZero) {
  CapturedLog captured;
  Clip depth{Image(4, 4, 1, 2.0)}, alpha{Image(4, 4, 1, 1.0)};
  const DepthDistance d = depth_guidance_distance(depth, alpha, {full_target(Image(4, 4, 1, 3.0))});
  EXPECT_EQ(d.value, 0.0);
  EXPECT_EQ(d.frames_used, 0u);
  EXPECT_TRUE(captured.has(log::Level::warn));
  for (double g : d.grad[0].data) EXPECT_EQ(g, 0.0);
}

TEST(DepthDistance, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(67);
  Clip depth{oracle::random_image(rng, 6, 6, 1, 1.0, 4.0), oracle::random_image(rng, 6, 6, 1, 1.0, 4.0)};
  Clip alpha{oracle::random_image(rng, 6, 6, 1, 0.0, 1.0), Image(6, 6, 1, 1.0)};
  std::vector<WarpResult> targets{full_target(oracle::random_image(rng, 6, 6, 1, 1.0, 4.0)),
                                  full_target(oracle::random_image(rng, 6, 6, 1, 1.0, 4.0))};
  const DepthDistance d = depth_guidance_distance(depth, alpha, targets);
  for (std::size_t f = 0; f < 2; ++f)
    for (std::size_t k = 0; k < depth[f].size(); ++k) {
      const double numeric = oracle::central_difference(
          [&](double v) {
            Clip dd = depth;
            dd[f].data[k] = v;
            return depth_guidance_distance(dd, alpha, targets, false).value;
          },
          depth[f].data[k], 1e-6);
      EXPECT_NEAR(d.grad[f].data[k], numeric, 1e-8);
    }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

TEST(PatchFeatures, ConstantGrayImage) {
  const Image gray(16, 16, 3, 0.5);
  const auto raw = builtin_patch_features(gray, {8, false});
  ASSERT_EQ(raw.size(), 4u * kPatchFeatureCount);
  for (std::size_t k = 0; k < raw.size(); ++k) EXPECT_EQ(raw[k], k % kPatchFeatureCount < 3 ? 0.5 : 0.0);
  const auto unit = builtin_patch_features(gray);
  for (std::size_t k = 0; k < unit.size(); ++k)
    EXPECT_NEAR(unit[k], k % kPatchFeatureCount < 3 ? 1.0 / std::sqrt(3.0) : 0.0, 1e-15);
}

TEST(PatchFeatures, CopyGivesIdenticalFeatures) {
  std::mt19937_64 rng(68);
  const Image img = oracle::random_image(rng, 16, 24, 3, 0.0, 1.0);
  const Image copy = img;
  EXPECT_EQ(builtin_patch_features(img), builtin_patch_features(copy));
}

TEST(PatchFeatures, StepEdgeMatchesDirectSummation) {
  Image img(16, 16, 3, 0.2);
  for (int y = 0; y < 16; ++y)
    for (int x = 4; x < 16; ++x)
      for (int c = 0; c < 3; ++c) img(y, x, c) = 0.9;  // vertical edge inside the left patches
  const auto raw = builtin_patch_features(img, {8, false});
  for (int pr = 0; pr < 2; ++pr)
    for (int pc = 0; pc < 2; ++pc) {
      const auto want = oracle::patch_features_direct(img, pr * 8, pc * 8, 8);
      for (int k = 0; k < kPatchFeatureCount; ++k)
        EXPECT_NEAR(raw[(pr * 2 + pc) * kPatchFeatureCount + k], want[k], 1e-9);
    }
  const std::size_t left = 0;
  for (int c = 0; c < 3; ++c) {
    EXPECT_GT(raw[left + 6 + c], 0.0);
    EXPECT_EQ(raw[left + 9 + c], 0.0);
  }
}

TEST(PatchFeatures, RandomImageMatchesDirectSummation) {
  std::mt19937_64 rng(69);
  const Image img = oracle::random_image(rng, 16, 16, 3, 0.0, 1.0);
  const auto raw = builtin_patch_features(img, {8, false});
  for (int pr = 0; pr < 2; ++pr)
    for (int pc = 0; pc < 2; ++pc) {
      const auto want = oracle::patch_features_direct(img, pr * 8, pc * 8, 8);
      for (int k = 0; k < kPatchFeatureCount; ++k)
        EXPECT_NEAR(raw[(pr * 2 + pc) * kPatchFeatureCount + k], want[k], 1e-9);
    }
}

TEST(PatchFeatures, IndivisibleImageIsCentreCropped) {
  std::mt19937_64 rng(70);
  const Image img = oracle::random_image(rng, 18, 21, 3, 0.0, 1.0);
  Image crop(16, 16, 3);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) crop(y, x, c) = img(y + 1, x + 2, c);
  CapturedLog captured;
  EXPECT_EQ(builtin_patch_features(img), builtin_patch_features(crop));
  EXPECT_TRUE(captured.has(log::Level::debug));
  EXPECT_THROW(builtin_patch_features(Image(4, 4, 3)), ValidationError);
}

TEST(PatchFeatures, VjpMatchesDirectionalDerivative) {
  std::mt19937_64 rng(71);
  const Image img = oracle::random_image(rng, 16, 16, 3, 0.0, 1.0);
  const auto dfeat = random_vector(rng, 4 * kPatchFeatureCount);
  for (bool normalize : {false, true}) {
    const PatchFeatureOptions opt{8, normalize};
    const Image g = builtin_patch_features_vjp(img, dfeat, opt);
    for (int trial = 0; trial < 5; ++trial) {
      const Image dir = oracle::random_image(rng, 16, 16, 3);
      const auto along = [&](double h) {
        Image x = img;
        for (std::size_t k = 0; k < x.size(); ++k) x.data[k] += h * dir.data[k];
        const auto f = builtin_patch_features(x, opt);
        double s = 0.0;
        for (std::size_t k = 0; k < f.size(); ++k) s += dfeat[k] * f[k];
        return s;
      };
      const double numeric = oracle::central_difference(along, 0.0, 1e-7);
      double analytic = 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) analytic += g.data[k] * dir.data[k];
      EXPECT_NEAR(analytic, numeric, 1e-6 * std::max(1.0, std::abs(numeric))) << "normalize " << normalize;
    }
  }
}

TEST(FeatureDistance, IdenticalInputsGiveZero) {
  std::mt19937_64 rng(72);
  const Image img = oracle::random_image(rng, 16, 16, 3, 0.0, 1.0);
  EXPECT_EQ(feature_guidance_distance(PatchFeatureExtractor{}, img, img), 0.0);
}

TEST(FeatureDistance, SinglePatchPerturbation) {
  std::mt19937_64 rng(73);
  const Image y = oracle::random_image(rng, 16, 16, 3, 0.0, 1.0);
  Image x = y;
  for (int r = 8; r < 16; ++r)
    for (int c = 0; c < 8; ++c)
      for (int ch = 0; ch < 3; ++ch) x(r, c, ch) = 0.5 * x(r, c, ch) + 0.1;
  const auto fy = builtin_patch_features(y), fx = builtin_patch_features(x);
  double patch_l1 = 0.0;
  const std::size_t base = 2 * kPatchFeatureCount;  // row 1, column 0
  for (int k = 0; k < kPatchFeatureCount; ++k) patch_l1 += std::abs(fy[base + k] - fx[base + k]);
  EXPECT_NEAR(feature_guidance_distance(PatchFeatureExtractor{}, y, x), patch_l1 / fy.size(), 1e-15);
}

TEST(FeatureDistance, IdentityExtractorReducesToPixelDistance) {
  std::mt19937_64 rng(74);
  const Image y = oracle::random_image(rng, 8, 8, 3, 0.0, 1.0), x = oracle::random_image(rng, 8, 8, 3, 0.0, 1.0);
  double want = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) want += std::abs(y.data[k] - x.data[k]);
  want /= static_cast<double>(x.size());
  EXPECT_NEAR(feature_guidance_distance(IdentityExtractor{}, y, x), want, 1e-15);
  EXPECT_NEAR(pixel_guidance_distance(y, x), want, 1e-15);
}

// ---------------------------------------------------------------------------
// Noise correction
// ---------------------------------------------------------------------------

namespace {

/// Extractor without a VJP, forcing the randomized subspace gradient.
class OpaquePatchExtractor final : public FeatureExtractor {
 public:
  std::vector<double> extract(const Image& image) const override { return builtin_patch_features(image); }
};

struct GuidanceFixture {
  NoiseSchedule schedule = make_schedule();
  Clip eps, x_t;
  Image target;
  PatchFeatureExtractor extractor;
  GuidanceContext ctx;

  explicit GuidanceFixture(std::uint64_t seed, int size = 16, int frames = 3) {
    std::mt19937_64 rng(seed);
    for (int f = 0; f < frames; ++f) {
      eps.push_back(oracle::random_image(rng, size, size, 3));
      x_t.push_back(oracle::random_image(rng, size, size, 3));
      ctx.rendered_depth.push_back(oracle::random_image(rng, size, size, 1, 1.0, 4.0));
      ctx.rendered_alpha.push_back(oracle::random_image(rng, size, size, 1, 0.3, 1.0));
      WarpResult tgt = full_target(oracle::random_image(rng, size, size, 1, 1.0, 4.0));
      for (std::size_t k = 0; k < tgt.mask.size(); k += 5) tgt.mask[k] = 0;
      ctx.depth_targets.push_back(tgt);
    }
    target = oracle::random_image(rng, size, size, 3);
    ctx.anchor_frame = 1;
    ctx.anchor_target = &target;
    ctx.extractor = &extractor;
  }

  GuidanceFixture(const GuidanceFixture&) = delete;
};

GuidanceSpec spec_of(std::vector<GuidanceTerm> terms, double rho = 1.0) {
  GuidanceSpec s;
  s.terms = std::move(terms);
  s.rho = RhoSchedule::constant(rho);
  return s;
}

}  // namespace

TEST(CorrectNoise, ZeroLambdaOrEmptySpecIsBitExact) {
  GuidanceFixture fx(75);
  const auto none = correct_noise(fx.eps, fx.x_t, 400, GuidanceSpec{}, fx.ctx, fx.schedule);
  EXPECT_EQ(none.rgb, fx.eps);
  const GuidanceSpec zero =
      spec_of({{GuidanceKind::feature, 1.0, {}}, {GuidanceKind::depth_warp, 1.0, {}}}, 0.0);
  const auto z = correct_noise(fx.eps, fx.x_t, 400, zero, fx.ctx, fx.schedule);
  EXPECT_EQ(z.rgb, fx.eps);
  for (const Image& d : z.depth)
    for (double v : d.data) EXPECT_EQ(v, 0.0);
}

TEST(CorrectNoise, PixelTermSubtractsScaledSign) {
  GuidanceFixture fx(76);
  const int t = 321;
  const GuidanceSpec spec = spec_of({{GuidanceKind::pixel, 1.0, {}}}, 2.5);
  const auto out = correct_noise(fx.eps, fx.x_t, t, spec, fx.ctx, fx.schedule);
  const double lambda = gamma(t, fx.schedule) * 2.5;
  const double n = static_cast<double>(fx.target.size());
  for (std::size_t f = 0; f < fx.eps.size(); ++f)
    for (std::size_t k = 0; k < fx.eps[f].size(); ++k) {
      double want = fx.eps[f].data[k];
      if (f == 1) {
        const double d = fx.x_t[f].data[k] - fx.target.data[k];
        want -= lambda * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
      }
      EXPECT_DOUBLE_EQ(out.rgb[f].data[k], want);
    }
}

TEST(CorrectNoise, EstimateModeAppliesChainFactor) {
  GuidanceFixture fx(77);
  const int t = 500;
  GuidanceSpec spec = spec_of({{GuidanceKind::pixel, 1.0, {}}}, 1.0);
  spec.apply_to_x0_estimate = true;
  const auto out = correct_noise(fx.eps, fx.x_t, t, spec, fx.ctx, fx.schedule);
  const double ab = fx.schedule[t];
  const double lambda = gamma(t, fx.schedule);
  const double n = static_cast<double>(fx.target.size());
  const Image& x = fx.x_t[1];
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x0 = (x.data[k] - std::sqrt(1.0 - ab) * fx.eps[1].data[k]) / std::sqrt(ab);
    const double d = x0 - fx.target.data[k];
    const double want = fx.eps[1].data[k] - lambda / std::sqrt(ab) * (d > 0 ? 1.0 : -1.0) / n;
    EXPECT_NEAR(out.rgb[1].data[k], want, 1e-14);
  }
}

TEST(CorrectNoise, DepthAndFeatureTermsMatchFiniteDifferenceOracle) {
  GuidanceFixture fx(78);
  const int t = 450;
  const double eta_f = 0.7, eta_d = 1.3;
  const GuidanceSpec spec = spec_of({{GuidanceKind::feature, eta_f, {}}, {GuidanceKind::depth_warp, eta_d, {}}}, 3.0);
  const auto out = correct_noise(fx.eps, fx.x_t, t, spec, fx.ctx, fx.schedule);
  const double lambda = spec.lambda(t, fx.schedule);

  const auto objective = [&](const Clip& frames, const Clip& depths) {
    return eta_f * feature_guidance_distance(fx.extractor, fx.target, frames[1]) +
           eta_d * depth_guidance_distance(depths, fx.ctx.rendered_alpha, fx.ctx.depth_targets, false).value;
  };
  std::mt19937_64 rng(79);
  std::uniform_int_distribution<std::size_t> pick_rgb(0, fx.x_t[1].size() - 1);
  std::uniform_int_distribution<std::size_t> pick_px(0, fx.ctx.rendered_depth[0].size() - 1);
  std::uniform_int_distribution<std::size_t> pick_frame(0, fx.x_t.size() - 1);
  int failures = 0;
  for (int c = 0; c < 60; ++c) {
    const std::size_t k = pick_rgb(rng);
    const double numeric = oracle::central_difference(
        [&](double v) {
          Clip frames = fx.x_t;
          frames[1].data[k] = v;
          return objective(frames, fx.ctx.rendered_depth);
        },
        fx.x_t[1].data[k], 1e-7);
    const double analytic = (fx.eps[1].data[k] - out.rgb[1].data[k]) / lambda;
    failures += std::abs(analytic - numeric) > std::max(5e-3 * std::abs(numeric), 1e-9);
  }
  for (int c = 0; c < 40; ++c) {
    const std::size_t f = pick_frame(rng), k = pick_px(rng);
    const double numeric = oracle::central_difference(
        [&](double v) {
          Clip depths = fx.ctx.rendered_depth;
          depths[f].data[k] = v;
          return objective(fx.x_t, depths);
        },
        fx.ctx.rendered_depth[f].data[k], 1e-6);
    const double analytic = -out.depth[f].data[k] / lambda;
    failures += std::abs(analytic - numeric) > std::max(5e-3 * std::abs(numeric), 1e-9);
  }
  EXPECT_EQ(failures, 0);
}

TEST(CorrectNoise, PropertyLinearInGuidanceWeights) {
  GuidanceFixture fx(80);
  const GuidanceSpec one = spec_of({{GuidanceKind::feature, 0.6, {}}, {GuidanceKind::depth_warp, 0.9, {}}}, 2.0);
  const GuidanceSpec two = spec_of({{GuidanceKind::feature, 1.2, {}}, {GuidanceKind::depth_warp, 1.8, {}}}, 2.0);
  const GuidanceGradient g1 = guidance_gradient(fx.x_t, one, fx.ctx);
  const GuidanceGradient g2 = guidance_gradient(fx.x_t, two, fx.ctx);
  for (std::size_t f = 0; f < g1.rgb.size(); ++f) {
    for (std::size_t k = 0; k < g1.rgb[f].size(); ++k) EXPECT_EQ(g2.rgb[f].data[k], 2.0 * g1.rgb[f].data[k]);
    for (std::size_t k = 0; k < g1.depth[f].size(); ++k) EXPECT_EQ(g2.depth[f].data[k], 2.0 * g1.depth[f].data[k]);
  }
  const auto c1 = correct_noise(fx.eps, fx.x_t, 300, one, fx.ctx, fx.schedule);
  const auto c2 = correct_noise(fx.eps, fx.x_t, 300, two, fx.ctx, fx.schedule);
  for (std::size_t f = 0; f < c1.rgb.size(); ++f) {
    for (std::size_t k = 0; k < c1.rgb[f].size(); ++k)
      EXPECT_NEAR(c2.rgb[f].data[k] - fx.eps[f].data[k], 2.0 * (c1.rgb[f].data[k] - fx.eps[f].data[k]), 1e-14);
    for (std::size_t k = 0; k < c1.depth[f].size(); ++k) EXPECT_EQ(c2.depth[f].data[k], 2.0 * c1.depth[f].data[k]);
  }
}

TEST(CorrectNoise, PropertyGradientStepDecreasesEachTerm) {
  for (int state = 0; state < 10; ++state) {
    GuidanceFixture fx(100 + state);
    for (GuidanceKind kind : {GuidanceKind::pixel, GuidanceKind::feature, GuidanceKind::depth_warp}) {
      const GuidanceSpec spec = spec_of({{kind, 1.0, {}}});
      const GuidanceGradient g = guidance_gradient(fx.x_t, spec, fx.ctx);
      const double delta = kind == GuidanceKind::depth_warp ? 1e-2 : 1e-1;
      Clip frames = fx.x_t;
      GuidanceContext moved = fx.ctx;
      for (std::size_t f = 0; f < frames.size(); ++f) {
        for (std::size_t k = 0; k < frames[f].size(); ++k) frames[f].data[k] -= delta * g.rgb[f].data[k];
        for (std::size_t k = 0; k < moved.rendered_depth[f].size(); ++k)
          moved.rendered_depth[f].data[k] -= delta * g.depth[f].data[k];
      }
      const double after = guidance_gradient(frames, spec, moved).value;
      EXPECT_LT(after, g.value) << guidance_kind_name(kind) << " at state " << state;
    }
  }
}

TEST(CorrectNoise, SubspaceFallbackIsDeterministicAndDescends) {
  GuidanceFixture fx(81);
  OpaquePatchExtractor opaque;
  fx.ctx.extractor = &opaque;
  fx.ctx.fd_seed = 99;
  const GuidanceSpec spec = spec_of({{GuidanceKind::feature, 1.0, {}}});
  const GuidanceGradient a = guidance_gradient(fx.x_t, spec, fx.ctx);
  const GuidanceGradient b = guidance_gradient(fx.x_t, spec, fx.ctx);
  EXPECT_EQ(a.rgb, b.rgb);
  fx.ctx.extractor = &fx.extractor;
  const GuidanceGradient exact = guidance_gradient(fx.x_t, spec, fx.ctx);
  double dot = 0.0;
  for (std::size_t k = 0; k < exact.rgb[1].size(); ++k) dot += exact.rgb[1].data[k] * a.rgb[1].data[k];
  EXPECT_GT(dot, 0.0);
}

TEST(CorrectNoise, MissingContextSkipsTermsWithWarning) {
  GuidanceFixture fx(82);
  GuidanceContext empty;
  CapturedLog captured;
  const GuidanceSpec spec = spec_of({{GuidanceKind::feature, 1.0, {}}, {GuidanceKind::depth_warp, 1.0, {}}});
  const auto out = correct_noise(fx.eps, fx.x_t, 300, spec, empty, fx.schedule);
  EXPECT_EQ(out.rgb, fx.eps);
  EXPECT_TRUE(captured.has(log::Level::warn));
}

TEST(CorrectNoise, DepthTermRespectsTargetFrames) {
  GuidanceFixture fx(83);
  const GuidanceSpec spec = spec_of({{GuidanceKind::depth_warp, 1.0, {0, 2}}});
  const GuidanceGradient g = guidance_gradient(fx.x_t, spec, fx.ctx);
  for (double v : g.depth[1].data) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(std::any_of(g.depth[0].data.begin(), g.depth[0].data.end(), [](double v) { return v != 0.0; }));
}
