// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/diffusion.hpp"
#include "gsd/rasterizer.hpp"
#include "gsd/scene.hpp"

namespace gsd {

/// Converts image-space guidance to noise space: sqrt(ab_t) / sqrt(1 - ab_t).
inline double gamma(int t, const NoiseSchedule& schedule) {
  require(t >= 1 && t <= schedule.T(), "gamma: t must lie in [1, T]");
  const double ab = schedule[t];
  if (!(ab < 1.0)) throw ValidationError("gamma: alphabar_t = 1 gives a division by zero");
  const double g = std::sqrt(ab) / std::sqrt(1.0 - ab);
  if (!std::isfinite(g)) throw ValidationError("gamma: non-finite conversion factor");
  return g;
}

// ---------------------------------------------------------------------------
// Guidance specification
// ---------------------------------------------------------------------------

enum class GuidanceKind { depth_warp, feature, pixel };

inline const char* guidance_kind_name(GuidanceKind k) {
  switch (k) {
    case GuidanceKind::depth_warp: return "depth_warp";
    case GuidanceKind::feature: return "feature";
    case GuidanceKind::pixel: return "pixel";
  }
  return "?";
}

struct GuidanceTerm {
  GuidanceKind kind = GuidanceKind::feature;
  double weight = 1.0;             // eta_i
  std::vector<int> target_frames;  // 0-based; empty means the kind's default
};

/// Piecewise-constant rho_t: value of the last breakpoint with t >= start.
struct RhoSchedule {
  struct Breakpoint {
    int start = 0;
    double value = 1.0;
  };
  std::vector<Breakpoint> breakpoints{{0, 1.0}};

  static RhoSchedule constant(double v) { return RhoSchedule{{{0, v}}}; }

  double operator()(int t) const {
    double v = 0.0;
    for (const auto& b : breakpoints)
      if (t >= b.start) v = b.value;
    return v;
  }
};

/// Weighted guidance terms plus the rho_t schedule. lambda_t = gamma(t) rho_t.
struct GuidanceSpec {
  std::vector<GuidanceTerm> terms;
  RhoSchedule rho;
  bool apply_to_x0_estimate = false;  // evaluate D on x0_hat instead of x_t

  bool empty() const { return terms.empty(); }

  const GuidanceTerm* find(GuidanceKind k) const {
    for (const auto& term : terms)
      if (term.kind == k) return &term;
    return nullptr;
  }

  double lambda(int t, const NoiseSchedule& schedule) const { return gamma(t, schedule) * rho(t); }

  void validate() const {
    for (std::size_t a = 0; a < terms.size(); ++a) {
      require(terms[a].weight >= 0.0 && std::isfinite(terms[a].weight), "guidance weights must be finite and >= 0");
      for (std::size_t b = a + 1; b < terms.size(); ++b)
        require(terms[a].kind != terms[b].kind, "at most one guidance term per kind");
    }
  }
};

// ---------------------------------------------------------------------------
// Depth warping
// ---------------------------------------------------------------------------

inline constexpr double kMinWarpCoverage = 0.05;
inline constexpr double kDepthGuidanceAlpha = 0.5;  // rendered pixels compared by depth guidance

struct WarpResult {
  Image depth;                      // H x W x 1
  std::vector<std::uint8_t> mask;   // 1 where a source pixel landed
  double coverage = 0.0;            // fraction of destination pixels covered

  bool empty() const { return mask.empty(); }
  bool usable() const { return !empty() && coverage >= kMinWarpCoverage; }
};

/// Forward-warps a source depth map into a destination camera sharing its
/// intrinsics. Each source pixel is back-projected, moved by the relative
/// pose, re-projected and rounded to the nearest destination pixel; the
/// nearer surface wins collisions (first writer on exact ties).
inline WarpResult warp_depth(const Image& depth_src, const Camera& cam_src, const Camera& cam_dst) {
  require(depth_src.channels == 1 && depth_src.height == cam_src.height && depth_src.width == cam_src.width,
          "warp_depth: depth map must match the source camera resolution");
  require(cam_src.same_intrinsics(cam_dst), "warp_depth: cameras must share intrinsics");

  // Relative pose: p_dst = R p_src + T.
  double r[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += cam_dst.rotation(i, k) * cam_src.rotation(j, k);
      r[i][j] = s;
    }
  double t[3];
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += r[i][k] * cam_src.translation[k];
    t[i] = cam_dst.translation[i] - s;
  }
  const double ix = 1.0 / cam_src.fx, iy = 1.0 / cam_src.fy;
  const double ox = -cam_src.cx / cam_src.fx, oy = -cam_src.cy / cam_src.fy;

  WarpResult out;
  out.depth = Image(cam_dst.height, cam_dst.width, 1);
  out.mask.assign(out.depth.size(), 0);
  std::size_t covered = 0;
  for (int y = 0; y < depth_src.height; ++y)
    for (int x = 0; x < depth_src.width; ++x) {
      const double d = depth_src(y, x);
      if (!(d > 0.0) || !std::isfinite(d)) continue;
      const double px = d * (ix * x + ox);
      const double py = d * (iy * y + oy);
      const double pz = d;
      const double qx = r[0][0] * px + r[0][1] * py + r[0][2] * pz + t[0];
      const double qy = r[1][0] * px + r[1][1] * py + r[1][2] * pz + t[1];
      const double qz = r[2][0] * px + r[2][1] * py + r[2][2] * pz + t[2];
      if (!(qz > kNearPlane)) continue;
      const double u = cam_dst.fx * qx / qz + cam_dst.cx;
      const double v = cam_dst.fy * qy / qz + cam_dst.cy;
      const double uf = std::floor(u + 0.5), vf = std::floor(v + 0.5);
      if (!(uf >= 0.0 && uf < cam_dst.width && vf >= 0.0 && vf < cam_dst.height)) continue;
      const std::size_t idx = static_cast<std::size_t>(vf) * cam_dst.width + static_cast<std::size_t>(uf);
      if (!out.mask[idx]) {
        out.mask[idx] = 1;
        out.depth.data[idx] = qz;
        ++covered;
      } else if (qz < out.depth.data[idx]) {
        out.depth.data[idx] = qz;
      }
    }
  out.coverage = static_cast<double>(covered) / static_cast<double>(out.mask.size());
  if (out.coverage < kMinWarpCoverage) {
    std::ostringstream os;
    os << "warp_depth: mask coverage " << out.coverage << " below " << kMinWarpCoverage;
    log::debug(os.str());
  }
  return out;
}

/// Least-squares positive affine fit a * rel + b ~ reference over valid pixels.
struct DepthAlignment {
  Image depth;
  double a = 1.0;
  double b = 0.0;
};

inline DepthAlignment scale_relative_depth(const Image& rel_depth, const Image& reference,
                                           std::span<const std::uint8_t> valid) {
  require(rel_depth.same_shape(reference) && rel_depth.channels == 1, "scale_relative_depth: shape mismatch");
  require(valid.size() == rel_depth.size(), "scale_relative_depth: mask size mismatch");
  std::size_t n = 0;
  double mr = 0.0, mg = 0.0;
  for (std::size_t k = 0; k < valid.size(); ++k)
    if (valid[k]) {
      ++n;
      mr += rel_depth.data[k];
      mg += reference.data[k];
    }
  require(n >= 16, "scale_relative_depth: needs at least 16 valid pixels");
  mr /= static_cast<double>(n);
  mg /= static_cast<double>(n);
  double srr = 0.0, srg = 0.0, sgg = 0.0;
  for (std::size_t k = 0; k < valid.size(); ++k)
    if (valid[k]) {
      const double dr = rel_depth.data[k] - mr, dg = reference.data[k] - mg;
      srr += dr * dr;
      srg += dr * dg;
      sgg += dg * dg;
    }
  if (!(srr > 1e-24 * std::max(1.0, mr * mr) * static_cast<double>(n)))
    throw ValidationError("scale_relative_depth: relative depth is constant over the valid region");
  DepthAlignment out;
  out.a = srg / srr;
  if (!(out.a > 0.0)) throw ValidationError("scale_relative_depth: fitted scale is not positive");
  out.b = mg - out.a * mr;
  out.depth = rel_depth;
  for (double& v : out.depth.data) v = out.a * v + out.b;
  return out;
}

// ---------------------------------------------------------------------------
// Pearson correlation
// ---------------------------------------------------------------------------

namespace pcc_detail {

/// Centered second moments, accumulated in extended precision so that exact
/// affine relations come out as exactly +-1 after rounding.
struct Moments {
  long double ma = 0, mb = 0, sab = 0, saa = 0, sbb = 0;
};

inline Moments moments(std::span<const double> a, std::span<const double> b) {
  Moments m;
  const long double n = static_cast<long double>(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    m.ma += a[k];
    m.mb += b[k];
  }
  m.ma /= n;
  m.mb /= n;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const long double da = a[k] - m.ma, db = b[k] - m.mb;
    m.sab += da * db;
    m.saa += da * da;
    m.sbb += db * db;
  }
  return m;
}

}  // namespace pcc_detail

/// Pearson correlation coefficient; throws when either input is constant.
inline double pcc(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "pcc: length mismatch");
  require(a.size() >= 2, "pcc: needs at least two samples");
  const auto m = pcc_detail::moments(a, b);
  if (!(m.saa > 0) || !(m.sbb > 0)) throw ValidationError("pcc: zero variance input");
  const double r = static_cast<double>(m.sab / std::sqrt(m.saa * m.sbb));
  return std::clamp(r, -1.0, 1.0);
}

/// d pcc(a, b) / d b.
inline std::vector<double> pcc_grad_b(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, "pcc_grad_b: need two equal-length inputs");
  const auto m = pcc_detail::moments(a, b);
  const long double nanb = std::sqrt(m.saa * m.sbb);
  const long double r = m.sab / nanb;
  std::vector<double> g(a.size());
  for (std::size_t k = 0; k < a.size(); ++k)
    g[k] = static_cast<double>((a[k] - m.ma) / nanb - r * (b[k] - m.mb) / m.sbb);
  return g;
}

// ---------------------------------------------------------------------------
// Depth-warp guidance distance
// ---------------------------------------------------------------------------

/// Warps an aligned depth map of the first anchor view into every targeted
/// trajectory frame. Untargeted frames get an empty WarpResult.
inline std::vector<WarpResult> build_depth_targets(const Image& aligned_depth_j, const Trajectory& traj,
                                                   const std::vector<int>& target_frames = {}) {
  std::vector<WarpResult> targets(traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const bool wanted = target_frames.empty() ||
                        std::find(target_frames.begin(), target_frames.end(), static_cast<int>(i)) !=
                            target_frames.end();
    if (wanted) targets[i] = warp_depth(aligned_depth_j, traj.poses.front(), traj.poses[i]);
  }
  return targets;
}

struct DepthDistance {
  double value = 0.0;
  Clip grad;                 // dD / d rendered depth, per frame (H x W x 1)
  std::size_t frames_used = 0;
};

/// Sum over frames of 1 - pcc(warped target, rendered depth) on the pixels
/// where the warp landed and the render is mostly opaque. Frames with low coverage
/// or a constant side are skipped.
inline DepthDistance depth_guidance_distance(const Clip& rendered_depth, const Clip& rendered_alpha,
                                             const std::vector<WarpResult>& targets, bool want_grad = true) {
  require(rendered_depth.size() == targets.size() && rendered_alpha.size() == targets.size(),
          "depth_guidance_distance: frame count mismatch");
  DepthDistance out;
  if (want_grad)
    for (const Image& d : rendered_depth) out.grad.emplace_back(d.height, d.width, 1);
  std::vector<double> a, b;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const WarpResult& tgt = targets[i];
    if (!tgt.usable()) continue;
    require(tgt.depth.same_shape(rendered_depth[i]), "depth_guidance_distance: shape mismatch");
    a.clear();
    b.clear();
    where.clear();
    for (std::size_t k = 0; k < tgt.mask.size(); ++k)
      if (tgt.mask[k] && rendered_alpha[i].data[k] > kDepthGuidanceAlpha) {
        a.push_back(tgt.depth.data[k]);
        b.push_back(rendered_depth[i].data[k]);
        where.push_back(k);
      }
    if (a.size() < 2) continue;
    double r = 0.0;
    try {
      r = pcc(a, b);
    } catch (const ValidationError&) {
      continue;
    }
    out.value += 1.0 - r;
    ++out.frames_used;
    if (want_grad) {
      const auto g = pcc_grad_b(a, b);
      for (std::size_t k = 0; k < where.size(); ++k) out.grad[i].data[where[k]] = -g[k];
    }
  }
  if (out.frames_used == 0) log::warn("depth guidance: every frame was skipped; term contributes zero");
  return out;
}

// ---------------------------------------------------------------------------
// Feature extractors
// ---------------------------------------------------------------------------

/// Deterministic image -> feature vector map. Extractors that implement
/// vjp() get analytic guidance gradients; others fall back to randomized
/// finite differences.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<double> extract(const Image& image) const = 0;
  virtual bool has_vjp() const { return false; }
  /// Vector-Jacobian product: d(dfeat . extract(image)) / d image.
  virtual Image vjp(const Image& image, std::span<const double> dfeat) const {
    (void)image;
    (void)dfeat;
    throw ValidationError("feature extractor has no analytic vjp");
  }
};

/// Flattened pixels; reduces feature guidance to pixel L1 guidance.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<double> extract(const Image& image) const override { return image.data; }
  bool has_vjp() const override { return true; }
  Image vjp(const Image& image, std::span<const double> dfeat) const override {
    Image g(image.height, image.width, image.channels);
    std::copy(dfeat.begin(), dfeat.end(), g.data.begin());
    return g;
  }
};

inline constexpr int kPatchFeatureCount = 12;

struct PatchFeatureOptions {
  int patch = 8;
  bool normalize = true;
};

namespace feature_detail {

struct PatchGrid {
  int patch, oy, ox, rows, cols;
};

inline PatchGrid grid(const Image& img, int patch) {
  require(img.channels == 3, "patch features need an RGB image");
  require(patch >= 2 && img.height >= patch && img.width >= patch, "image smaller than one feature patch");
  PatchGrid g{patch, (img.height % patch) / 2, (img.width % patch) / 2, img.height / patch, img.width / patch};
  if (img.height % patch || img.width % patch)
    log::debug("patch features: center-cropping to a multiple of the patch size");
  return g;
}

/// Raw (unnormalized) features of one patch.
inline std::array<double, kPatchFeatureCount> raw_patch(const Image& img, const PatchGrid& g, int pr, int pc) {
  std::array<double, kPatchFeatureCount> f{};
  const int p = g.patch;
  const int y0 = g.oy + pr * p, x0 = g.ox + pc * p;
  const double npx = static_cast<double>(p * p);
  const double npairs = static_cast<double>(p * (p - 1));
  for (int ch = 0; ch < 3; ++ch) {
    double mean = 0.0;
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c) mean += img(y0 + r, x0 + c, ch);
    mean /= npx;
    double var = 0.0, gh = 0.0, gv = 0.0;
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c) {
        const double v = img(y0 + r, x0 + c, ch);
        var += (v - mean) * (v - mean);
        if (c + 1 < p) gh += std::abs(img(y0 + r, x0 + c + 1, ch) - v);
        if (r + 1 < p) gv += std::abs(img(y0 + r + 1, x0 + c, ch) - v);
      }
    f[ch] = mean;
    f[3 + ch] = std::sqrt(var / npx);
    f[6 + ch] = gh / npairs;
    f[9 + ch] = gv / npairs;
  }
  return f;
}

inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace feature_detail

/// Per patch: channel means, channel standard deviations, and mean absolute
/// horizontal / vertical differences per channel, L2-normalized per patch.
/// Patches are row-major; images are center-cropped to a patch multiple.
inline std::vector<double> builtin_patch_features(const Image& image, PatchFeatureOptions opt = {}) {
  const auto g = feature_detail::grid(image, opt.patch);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(g.rows) * g.cols * kPatchFeatureCount);
  for (int pr = 0; pr < g.rows; ++pr)
    for (int pc = 0; pc < g.cols; ++pc) {
      auto f = feature_detail::raw_patch(image, g, pr, pc);
      if (opt.normalize) {
        double n = 0.0;
        for (double v : f) n += v * v;
        n = std::sqrt(n);
        if (n > 0.0)
          for (double& v : f) v /= n;
      }
      out.insert(out.end(), f.begin(), f.end());
    }
  return out;
}

/// Vector-Jacobian product of builtin_patch_features.
inline Image builtin_patch_features_vjp(const Image& image, std::span<const double> dfeat,
                                        PatchFeatureOptions opt = {}) {
  using feature_detail::sgn;
  const auto g = feature_detail::grid(image, opt.patch);
  require(dfeat.size() == static_cast<std::size_t>(g.rows) * g.cols * kPatchFeatureCount,
          "patch feature vjp: adjoint length mismatch");
  Image grad(image.height, image.width, 3);
  const int p = g.patch;
  const double npx = static_cast<double>(p * p);
  const double npairs = static_cast<double>(p * (p - 1));
  for (int pr = 0; pr < g.rows; ++pr)
    for (int pc = 0; pc < g.cols; ++pc) {
      const std::size_t base = (static_cast<std::size_t>(pr) * g.cols + pc) * kPatchFeatureCount;
      const auto f = feature_detail::raw_patch(image, g, pr, pc);
      std::array<double, kPatchFeatureCount> df{};
      for (int k = 0; k < kPatchFeatureCount; ++k) df[k] = dfeat[base + k];
      if (opt.normalize) {
        double n = 0.0;
        for (double v : f) n += v * v;
        n = std::sqrt(n);
        if (!(n > 0.0)) continue;
        double dot = 0.0;
        for (int k = 0; k < kPatchFeatureCount; ++k) dot += (f[k] / n) * df[k];
        for (int k = 0; k < kPatchFeatureCount; ++k) df[k] = (df[k] - (f[k] / n) * dot) / n;
      }
      const int y0 = g.oy + pr * p, x0 = g.ox + pc * p;
      for (int ch = 0; ch < 3; ++ch) {
        const double mean = f[ch], stdev = f[3 + ch];
        const double d_mean = df[ch] / npx;
        const double d_var_term = stdev > 0.0 ? df[3 + ch] / (stdev * npx) : 0.0;  // d std / d v = (v - mean)/(std npx)
        const double d_gh = df[6 + ch] / npairs, d_gv = df[9 + ch] / npairs;
        for (int r = 0; r < p; ++r)
          for (int c = 0; c < p; ++c) {
            const double v = image(y0 + r, x0 + c, ch);
            grad(y0 + r, x0 + c, ch) += d_mean + d_var_term * (v - mean);
            if (c + 1 < p) {
              const double s = sgn(image(y0 + r, x0 + c + 1, ch) - v) * d_gh;
              grad(y0 + r, x0 + c + 1, ch) += s;
              grad(y0 + r, x0 + c, ch) -= s;
            }
            if (r + 1 < p) {
              const double s = sgn(image(y0 + r + 1, x0 + c, ch) - v) * d_gv;
              grad(y0 + r + 1, x0 + c, ch) += s;
              grad(y0 + r, x0 + c, ch) -= s;
            }
          }
      }
    }
  return grad;
}

class PatchFeatureExtractor final : public FeatureExtractor {
 public:
  explicit PatchFeatureExtractor(PatchFeatureOptions opt = {}) : opt_(opt) {}
  std::vector<double> extract(const Image& image) const override { return builtin_patch_features(image, opt_); }
  bool has_vjp() const override { return true; }
  Image vjp(const Image& image, std::span<const double> dfeat) const override {
    return builtin_patch_features_vjp(image, dfeat, opt_);
  }

 private:
  PatchFeatureOptions opt_;
};

/// Mean absolute difference between the features of y_k and of frame s.
inline double feature_guidance_distance(const FeatureExtractor& extractor, const Image& y_k, const Image& x_s) {
  require(y_k.same_shape(x_s), "feature guidance: images must share resolution");
  const auto fy = extractor.extract(y_k);
  const auto fx = extractor.extract(x_s);
  require(fy.size() == fx.size() && !fy.empty(), "feature guidance: extractor output shape changed");
  double d = 0.0;
  for (std::size_t k = 0; k < fy.size(); ++k) d += std::abs(fy[k] - fx[k]);
  return d / static_cast<double>(fy.size());
}

/// Mean absolute pixel difference (the pixel-level ablation).
inline double pixel_guidance_distance(const Image& y_k, const Image& x_s) {
  require(y_k.same_shape(x_s), "pixel guidance: images must share resolution");
  double d = 0.0;
  for (std::size_t k = 0; k < y_k.size(); ++k) d += std::abs(y_k.data[k] - x_s.data[k]);
  return d / static_cast<double>(y_k.size());
}

// ---------------------------------------------------------------------------
// Noise correction
// ---------------------------------------------------------------------------

/// Everything the guidance terms need besides the noisy frames themselves.
struct GuidanceContext {
  int anchor_frame = -1;                       // 0-based index of frame s
  const Image* anchor_target = nullptr;        // y_k
  const FeatureExtractor* extractor = nullptr; // feature term
  std::vector<WarpResult> depth_targets;       // per frame, depth term
  Clip rendered_depth;                         // depth channel attached to the frames
  Clip rendered_alpha;
  int fd_directions = 16;                      // fallback for extractors without vjp
  double fd_step = 1e-3;
  std::uint64_t fd_seed = 0;
};

/// Corrected noise F_t. depth holds the noise-space correction routed to the
/// attached depth channel; it is zero when no depth term is active.
struct CorrectedNoise {
  Clip rgb;
  Clip depth;
};

struct GuidanceGradient {
  Clip rgb;    // d sum_i eta_i D_i / d x (frames)
  Clip depth;  // d sum_i eta_i D_i / d rendered depth
  double value = 0.0;
};

namespace guidance_detail {

inline Clip zeros_like(const Clip& c, int channels = -1) {
  Clip z;
  for (const Image& f : c) z.emplace_back(f.height, f.width, channels < 0 ? f.channels : channels);
  return z;
}

inline bool finite(const Image& img) { return all_finite(img); }

/// Randomized central differences in a low-dimensional subspace.
inline Image subspace_gradient(const std::function<double(const Image&)>& fn, const Image& x, int directions,
                               double h, std::uint64_t seed) {
  Image g(x.height, x.width, x.channels);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  Image v(x.height, x.width, x.channels);
  for (int d = 0; d < directions; ++d) {
    for (double& e : v.data) e = coin(rng) ? 1.0 : -1.0;
    Image xp = x, xm = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
      xp.data[k] += h * v.data[k];
      xm.data[k] -= h * v.data[k];
    }
    const double slope = (fn(xp) - fn(xm)) / (2.0 * h);
    for (std::size_t k = 0; k < x.size(); ++k) g.data[k] += slope * v.data[k] / directions;
  }
  return g;
}

}  // namespace guidance_detail

/// Gradient of sum_i eta_i D_i with respect to the frames (and attached depth).
inline GuidanceGradient guidance_gradient(const Clip& frames, const GuidanceSpec& spec, const GuidanceContext& ctx) {
  using namespace guidance_detail;
  GuidanceGradient out;
  out.rgb = zeros_like(frames);
  out.depth = zeros_like(frames, 1);
  for (const GuidanceTerm& term : spec.terms) {
    if (term.weight == 0.0) continue;
    switch (term.kind) {
      case GuidanceKind::pixel:
      case GuidanceKind::feature: {
        const int s = ctx.anchor_frame;
        if (s < 0 || s >= static_cast<int>(frames.size()) || !ctx.anchor_target) {
          log::warn(std::string("guidance: ") + guidance_kind_name(term.kind) + " term has no anchor target; skipped");
          continue;
        }
        const Image& x = frames[s];
        const Image& y = *ctx.anchor_target;
        Image g(x.height, x.width, x.channels);
        double value = 0.0;
        if (term.kind == GuidanceKind::pixel) {
          value = pixel_guidance_distance(y, x);
          const double n = static_cast<double>(x.size());
          for (std::size_t k = 0; k < x.size(); ++k) g.data[k] = feature_detail::sgn(x.data[k] - y.data[k]) / n;
        } else {
          if (!ctx.extractor) {
            log::warn("guidance: feature term without an extractor; skipped");
            continue;
          }
          try {
            const auto fy = ctx.extractor->extract(y);
            const auto fx = ctx.extractor->extract(x);
            require(fx.size() == fy.size() && !fx.empty(), "feature extractor output shape changed");
            const double nf = static_cast<double>(fx.size());
            for (std::size_t k = 0; k < fx.size(); ++k) value += std::abs(fx[k] - fy[k]);
            value /= nf;
            if (ctx.extractor->has_vjp()) {
              std::vector<double> df(fx.size());
              for (std::size_t k = 0; k < fx.size(); ++k) df[k] = feature_detail::sgn(fx[k] - fy[k]) / nf;
              g = ctx.extractor->vjp(x, df);
            } else {
              const FeatureExtractor& ex = *ctx.extractor;
              g = subspace_gradient([&](const Image& im) { return feature_guidance_distance(ex, y, im); }, x,
                                    ctx.fd_directions, ctx.fd_step, ctx.fd_seed);
            }
          } catch (const std::exception& e) {
            log::warn(std::string("guidance: feature extractor failed (") + e.what() + "); term skipped");
            continue;
          }
        }
        if (!finite(g)) {
          log::warn("guidance: non-finite gradient; term dropped for this step");
          continue;
        }
        out.value += term.weight * value;
        for (std::size_t k = 0; k < g.size(); ++k) out.rgb[s].data[k] += term.weight * g.data[k];
        break;
      }
      case GuidanceKind::depth_warp: {
        if (ctx.depth_targets.size() != frames.size() || ctx.rendered_depth.size() != frames.size() ||
            ctx.rendered_alpha.size() != frames.size()) {
          log::warn("guidance: depth term has no targets; skipped");
          continue;
        }
        std::vector<WarpResult> targets = ctx.depth_targets;
        if (!term.target_frames.empty())
          for (std::size_t i = 0; i < targets.size(); ++i)
            if (std::find(term.target_frames.begin(), term.target_frames.end(), static_cast<int>(i)) ==
                term.target_frames.end())
              targets[i] = WarpResult{};
        const auto dd = depth_guidance_distance(ctx.rendered_depth, ctx.rendered_alpha, targets);
        bool ok = true;
        for (const Image& g : dd.grad) ok = ok && finite(g);
        if (!ok) {
          log::warn("guidance: non-finite depth gradient; term dropped for this step");
          continue;
        }
        out.value += term.weight * dd.value;
        for (std::size_t i = 0; i < frames.size(); ++i)
          for (std::size_t k = 0; k < dd.grad[i].size(); ++k) out.depth[i].data[k] += term.weight * dd.grad[i].data[k];
        break;
      }
    }
  }
  return out;
}

/// F_t = eps - lambda_t grad_{x_t} sum_i eta_i D_i(c_i, x_t).
inline CorrectedNoise correct_noise(const Clip& eps, const Clip& x_t, int t, const GuidanceSpec& spec,
                                    const GuidanceContext& ctx, const NoiseSchedule& schedule) {
  require(same_shape(eps, x_t), "correct_noise: eps and x_t shapes differ");
  CorrectedNoise out;
  out.rgb = eps;
  out.depth = guidance_detail::zeros_like(eps, 1);
  if (spec.empty()) return out;
  const double lambda = spec.lambda(t, schedule);
  if (lambda == 0.0) return out;

  const double ab = schedule[t];
  Clip probe = x_t;
  double chain = 1.0;
  if (spec.apply_to_x0_estimate) {
    const double sa = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    for (std::size_t f = 0; f < probe.size(); ++f)
      for (std::size_t k = 0; k < probe[f].size(); ++k)
        probe[f].data[k] = (x_t[f].data[k] - s1 * eps[f].data[k]) / sa;
    chain = 1.0 / sa;
  }
  const GuidanceGradient g = guidance_gradient(probe, spec, ctx);
  for (std::size_t f = 0; f < out.rgb.size(); ++f) {
    for (std::size_t k = 0; k < out.rgb[f].size(); ++k) out.rgb[f].data[k] -= lambda * chain * g.rgb[f].data[k];
    for (std::size_t k = 0; k < out.depth[f].size(); ++k) out.depth[f].data[k] = -lambda * g.depth[f].data[k];
  }
  return out;
}

}  // namespace gsd
