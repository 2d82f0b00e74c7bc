// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/scene.hpp"

namespace gsd {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kBlur = 0.3;          // px^2 added to every 2D covariance
inline constexpr double kMaxWeight = 0.99;    // per-splat compositing weight clip
inline constexpr double kMinWeight = 1.0 / 255.0;
inline constexpr double kAlphaEps = 1e-4;     // depth is defined only above this alpha

/// Image-plane footprint of one Gaussian.
struct ProjectedGaussian {
  Vec2 mean2d;
  Mat2 cov2d;
  double depth = 0.0;
};

/// Perspective (EWA) projection of a 3D Gaussian. Returns nullopt when the
/// centre is not in front of the near plane; that Gaussian is culled.
inline std::optional<ProjectedGaussian> project_gaussian(const Vec3& mu, const Mat3& sigma, const Camera& cam,
                                                         double near = kNearPlane) {
  const Vec3 p = cam.to_camera(mu);
  if (!(p.z() > near)) return std::nullopt;
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx / p.z(), 0.0, -cam.fx * p.x() / (p.z() * p.z()),  //
      0.0, cam.fy / p.z(), -cam.fy * p.y() / (p.z() * p.z());
  const Eigen::Matrix<double, 2, 3> t = j * cam.rotation;
  ProjectedGaussian out;
  out.mean2d = cam.project(p);
  out.cov2d = t * sigma * t.transpose() + kBlur * Mat2::Identity();
  out.depth = p.z();
  return out;
}

/// Output of render(): colour, alpha-normalized expected depth, and alpha.
struct RenderedFrame {
  Image rgb;    // H x W x 3, in [0, 1]
  Image depth;  // H x W x 1, 0 where alpha <= kAlphaEps
  Image alpha;  // H x W x 1
  std::size_t culled = 0;
};

/// Per-Gaussian side outputs of render_backward used by densification.
struct BackwardStats {
  std::vector<double> screen_grad;  // |dL/d mean2d| in normalized device units
  std::vector<std::uint8_t> visible;
};

namespace raster_detail {

struct Splat {
  std::size_t index = 0;
  Vec3 p_cam;
  Vec2 mean;
  double conic_a = 0, conic_b = 0, conic_c = 0;  // inverse 2D covariance
  Mat2 cov2d;
  Mat3 cov_cam;  // W Sigma W^T
  Mat3 rot;      // R(q / |q|)
  Vec4 qhat;
  double qnorm = 1.0;
  Vec3 scale;
  double opacity = 0.0;
  Vec3 color;
  Vec3 color_raw;  // before the clamp at zero
  Vec3 view_vec;   // mu - camera centre
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

struct Prepared {
  std::vector<Splat> splats;             // sorted front to back (depth, then index)
  std::vector<std::vector<int>> rows;    // splat ids whose box covers each row
  std::size_t culled = 0;
};

inline Prepared prepare(const GaussianCloud& cloud, const Camera& cam) {
  Prepared out;
  const Vec3 center = cam.center();
  out.splats.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Splat s;
    s.index = i;
    s.p_cam = cam.to_camera(cloud.mean(i));
    if (!(s.p_cam.z() > kNearPlane)) {
      ++out.culled;
      continue;
    }
    s.opacity = cloud.opacity(i);
    if (!(s.opacity >= kMinWeight)) continue;  // can never reach the skip threshold

    const Vec4 q = cloud.quat(i);
    s.qnorm = q.norm();
    s.qhat = q / s.qnorm;
    s.rot = rotation_from_quat(s.qhat);
    s.scale = cloud.scale(i);
    const Mat3 m = s.rot * s.scale.asDiagonal();
    s.cov_cam = cam.rotation * (m * m.transpose()) * cam.rotation.transpose();

    const double z = s.p_cam.z();
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / z, 0.0, -cam.fx * s.p_cam.x() / (z * z), 0.0, cam.fy / z, -cam.fy * s.p_cam.y() / (z * z);
    s.cov2d = j * s.cov_cam * j.transpose() + kBlur * Mat2::Identity();
    const double det = s.cov2d.determinant();
    if (!(det > 0.0)) {
      ++out.culled;
      continue;
    }
    s.conic_a = s.cov2d(1, 1) / det;
    s.conic_b = -s.cov2d(0, 1) / det;
    s.conic_c = s.cov2d(0, 0) / det;
    s.mean = cam.project(s.p_cam);

    // A pixel contributes iff opacity * exp(-m2/2) >= 1/255, i.e.
    // m2 <= 2 ln(255 opacity); the ellipse's axis-aligned extent is exact.
    const double r2 = 2.0 * std::log(255.0 * s.opacity);
    const double ex = std::sqrt(r2 * s.cov2d(0, 0));
    const double ey = std::sqrt(r2 * s.cov2d(1, 1));
    s.x0 = std::max(0, static_cast<int>(std::floor(s.mean.x() - ex)));
    s.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(s.mean.x() + ex)));
    s.y0 = std::max(0, static_cast<int>(std::floor(s.mean.y() - ey)));
    s.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(s.mean.y() + ey)));
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;

    s.view_vec = cloud.mean(i) - center;
    const Vec3 dir = s.view_vec.normalized();
    s.color_raw = eval_sh_unclamped(cloud.sh_coeffs(i), dir, cloud.sh_degree);
    s.color = s.color_raw.cwiseMax(0.0);
    out.splats.push_back(s);
  }
  std::sort(out.splats.begin(), out.splats.end(), [](const Splat& a, const Splat& b) {
    if (a.p_cam.z() != b.p_cam.z()) return a.p_cam.z() < b.p_cam.z();
    return a.index < b.index;
  });
  out.rows.assign(cam.height, {});
  for (int k = 0; k < static_cast<int>(out.splats.size()); ++k)
    for (int y = out.splats[k].y0; y <= out.splats[k].y1; ++y) out.rows[y].push_back(k);
  return out;
}

/// Weight of splat s at pixel (x, y) before the clip; 0 if skipped.
struct Hit {
  int splat;
  double g;      // Gaussian falloff
  double w_raw;  // opacity * g
  double w;      // clipped weight
  double dx, dy;
};

inline bool evaluate(const Splat& s, int k, int x, int y, Hit& hit) {
  if (x < s.x0 || x > s.x1) return false;
  const double dx = x - s.mean.x();
  const double dy = y - s.mean.y();
  const double power = -0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) - s.conic_b * dx * dy;
  if (power > 0.0) return false;
  const double g = std::exp(power);
  const double w_raw = s.opacity * g;
  if (w_raw < kMinWeight) return false;
  hit = {k, g, w_raw, std::min(kMaxWeight, w_raw), dx, dy};
  return true;
}

inline constexpr int kRowChunk = 4;

}  // namespace raster_detail

/// Front-to-back alpha compositing of every Gaussian in front of the camera.
inline RenderedFrame render(const GaussianCloud& cloud, const Camera& cam) {
  require(!cloud.empty(), "render: cloud is empty");
  require(cloud.consistent(), "render: inconsistent cloud");
  cam.validate();
  using namespace raster_detail;
  const Prepared prep = prepare(cloud, cam);

  RenderedFrame out;
  out.rgb = Image(cam.height, cam.width, 3);
  out.depth = Image(cam.height, cam.width, 1);
  out.alpha = Image(cam.height, cam.width, 1);
  out.culled = prep.culled;

  parallel_for(cam.height, [&](int y) {
    Hit hit{};
    for (int x = 0; x < cam.width; ++x) {
      double t = 1.0, dsum = 0.0;
      Vec3 c = Vec3::Zero();
      for (int k : prep.rows[y]) {
        const Splat& s = prep.splats[k];
        if (!evaluate(s, k, x, y, hit)) continue;
        const double wt = hit.w * t;
        c += wt * s.color;
        dsum += wt * s.p_cam.z();
        t *= 1.0 - hit.w;
      }
      const double a = 1.0 - t;
      for (int ch = 0; ch < 3; ++ch) out.rgb(y, x, ch) = std::min(c[ch], 1.0);
      out.alpha(y, x) = a;
      out.depth(y, x) = a > kAlphaEps ? dsum / a : 0.0;
    }
  });
  return out;
}

/// Reverse-mode gradients of the rendered rgb/depth with respect to every
/// cloud parameter, given the loss adjoints dL/drgb (H x W x 3) and
/// dL/ddepth (H x W x 1; may be empty for zero).
inline CloudGradients render_backward(const GaussianCloud& cloud, const Camera& cam, const Image& dl_drgb,
                                      const Image& dl_ddepth, BackwardStats* stats = nullptr) {
  require(!cloud.empty(), "render_backward: cloud is empty");
  require(dl_drgb.height == cam.height && dl_drgb.width == cam.width && dl_drgb.channels == 3,
          "render_backward: rgb adjoint must be H x W x 3");
  const bool has_depth = !dl_ddepth.empty();
  if (has_depth)
    require(dl_ddepth.height == cam.height && dl_ddepth.width == cam.width && dl_ddepth.channels == 1,
            "render_backward: depth adjoint must be H x W x 1");
  require(all_finite(dl_drgb) && (!has_depth || all_finite(dl_ddepth)), "render_backward: adjoints must be finite");
  cam.validate();

  using namespace raster_detail;
  const Prepared prep = prepare(cloud, cam);
  const int n_splats = static_cast<int>(prep.splats.size());

  // Per-splat image-space adjoints:
  // [0,1] mean2d, [2,3,4] conic a,b,c, [5,6,7] colour, [8] depth, [9] opacity, [10] hit flag
  constexpr int kSlots = 11;
  const int n_chunks = (cam.height + kRowChunk - 1) / kRowChunk;
  std::vector<std::vector<double>> chunk_acc(n_chunks);

  parallel_for(n_chunks, [&](int chunk) {
    auto& acc = chunk_acc[chunk];
    acc.assign(static_cast<std::size_t>(n_splats) * kSlots, 0.0);
    std::vector<Hit> hits;
    std::vector<double> t_before;
    const int y_end = std::min(cam.height, (chunk + 1) * kRowChunk);
    for (int y = chunk * kRowChunk; y < y_end; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        hits.clear();
        t_before.clear();
        double t = 1.0, dsum = 0.0;
        Vec3 c = Vec3::Zero();
        Hit hit{};
        for (int k : prep.rows[y]) {
          const Splat& s = prep.splats[k];
          if (!evaluate(s, k, x, y, hit)) continue;
          hits.push_back(hit);
          t_before.push_back(t);
          const double wt = hit.w * t;
          c += wt * s.color;
          dsum += wt * s.p_cam.z();
          t *= 1.0 - hit.w;
        }
        if (hits.empty()) continue;
        const double a = 1.0 - t;

        Vec3 dc;
        for (int ch = 0; ch < 3; ++ch) dc[ch] = c[ch] < 1.0 ? dl_drgb(y, x, ch) : 0.0;
        double d_dsum = 0.0, d_alpha = 0.0;
        if (has_depth && a > kAlphaEps) {
          const double dd = dl_ddepth(y, x);
          d_dsum = dd / a;
          d_alpha = -dd * dsum / (a * a);
        }
        if (dc.isZero(0.0) && d_dsum == 0.0 && d_alpha == 0.0) {
          for (const Hit& h : hits) acc[static_cast<std::size_t>(h.splat) * kSlots + 10] = 1.0;
          continue;
        }

        // Suffix sums of w_k T_k f_k over splats behind the current one.
        Vec3 back_c = Vec3::Zero();
        double back_d = 0.0, back_a = 0.0;
        for (int h = static_cast<int>(hits.size()) - 1; h >= 0; --h) {
          const Hit& ht = hits[h];
          const Splat& s = prep.splats[ht.splat];
          const double ti = t_before[h];
          const double wt = ht.w * ti;
          const double inv = 1.0 / (1.0 - ht.w);
          double* g = &acc[static_cast<std::size_t>(ht.splat) * kSlots];
          g[10] = 1.0;
          g[5] += dc[0] * wt;
          g[6] += dc[1] * wt;
          g[7] += dc[2] * wt;
          g[8] += d_dsum * wt;
          const double dw = dc.dot(ti * s.color - back_c * inv) + d_dsum * (ti * s.p_cam.z() - back_d * inv) +
                            d_alpha * (ti - back_a * inv);
          back_c += wt * s.color;
          back_d += wt * s.p_cam.z();
          back_a += wt;
          if (ht.w_raw >= kMaxWeight) continue;  // clipped: no gradient through the weight
          g[9] += dw * ht.g;
          const double dpower = dw * s.opacity * ht.g;
          g[0] += dpower * (s.conic_a * ht.dx + s.conic_b * ht.dy);
          g[1] += dpower * (s.conic_b * ht.dx + s.conic_c * ht.dy);
          g[2] += dpower * (-0.5 * ht.dx * ht.dx);
          g[3] += dpower * (-ht.dx * ht.dy);
          g[4] += dpower * (-0.5 * ht.dy * ht.dy);
        }
      }
    }
  });

  std::vector<double> total(static_cast<std::size_t>(n_splats) * kSlots, 0.0);
  for (const auto& acc : chunk_acc)
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += acc[k];

  CloudGradients grads(cloud);
  if (stats) {
    stats->screen_grad.assign(cloud.size(), 0.0);
    stats->visible.assign(cloud.size(), 0);
  }

  for (int k = 0; k < n_splats; ++k) {
    const Splat& s = prep.splats[k];
    const double* g = &total[static_cast<std::size_t>(k) * kSlots];
    const std::size_t i = s.index;
    if (stats) {
      stats->visible[i] = g[10] > 0.0 ? 1 : 0;
      stats->screen_grad[i] = std::hypot(g[0] * 0.5 * cam.width, g[1] * 0.5 * cam.height);
    }

    // Opacity logit.
    grads.opacity_logit[i] = g[9] * s.opacity * (1.0 - s.opacity);

    // Colour -> SH coefficients and view direction.
    Vec3 dcol(g[5], g[6], g[7]);
    for (int ch = 0; ch < 3; ++ch)
      if (!(s.color_raw[ch] > 0.0)) dcol[ch] = 0.0;
    const double vlen = s.view_vec.norm();
    const Vec3 dir = s.view_vec / vlen;
    const auto basis = sh_basis(dir, cloud.sh_degree);
    const int nsh = sh_count(cloud.sh_degree);
    double* dsh = &grads.sh[i * static_cast<std::size_t>(3 * nsh)];
    for (int l = 0; l < nsh; ++l)
      for (int ch = 0; ch < 3; ++ch) dsh[3 * l + ch] = basis[l] * dcol[ch];
    Vec3 dmu = Vec3::Zero();
    if (cloud.sh_degree >= 2) {
      const auto coeffs = cloud.sh_coeffs(i);
      Vec3 ddir = Vec3::Zero();
      for (int ch = 0; ch < 3; ++ch) {
        ddir.y() += dcol[ch] * coeffs[3 * 1 + ch] * kSH1;
        ddir.z() += dcol[ch] * coeffs[3 * 2 + ch] * kSH1;
        ddir.x() += dcol[ch] * coeffs[3 * 3 + ch] * kSH1;
      }
      dmu += (ddir - dir * dir.dot(ddir)) / vlen;
    }

    // Conic -> 2D covariance.
    const Mat2 conic = (Mat2() << s.conic_a, s.conic_b, s.conic_b, s.conic_c).finished();
    const Mat2 g_conic = (Mat2() << g[2], 0.5 * g[3], 0.5 * g[3], g[4]).finished();
    const Mat2 g_cov2d = -conic * g_conic * conic;

    // 2D covariance -> camera-space covariance and projection Jacobian.
    const double x = s.p_cam.x(), y = s.p_cam.y(), z = s.p_cam.z();
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
    const Mat3 g_cov_cam = j.transpose() * g_cov2d * j;
    const Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_cov2d * j * s.cov_cam;

    Vec3 dp = Vec3::Zero();
    const double z2 = z * z, z3 = z2 * z;
    dp.x() += g_j(0, 2) * (-cam.fx / z2);
    dp.y() += g_j(1, 2) * (-cam.fy / z2);
    dp.z() += g_j(0, 0) * (-cam.fx / z2) + g_j(0, 2) * (2.0 * cam.fx * x / z3) + g_j(1, 1) * (-cam.fy / z2) +
              g_j(1, 2) * (2.0 * cam.fy * y / z3);
    // Mean2d.
    dp.x() += g[0] * cam.fx / z;
    dp.y() += g[1] * cam.fy / z;
    dp.z() += -g[0] * cam.fx * x / z2 - g[1] * cam.fy * y / z2;
    // Splat depth.
    dp.z() += g[8];
    dmu += cam.rotation.transpose() * dp;
    for (int a = 0; a < 3; ++a) grads.position[3 * i + a] = dmu[a];

    // World covariance -> rotation and scale.
    const Mat3 g_sigma = cam.rotation.transpose() * g_cov_cam * cam.rotation;
    const Mat3 ms = s.rot * s.scale.asDiagonal();
    const Mat3 g_ms = (g_sigma + g_sigma.transpose()) * ms;
    Mat3 g_rot;
    for (int col = 0; col < 3; ++col) {
      g_rot.col(col) = g_ms.col(col) * s.scale[col];
      grads.log_scale[3 * i + col] = g_ms.col(col).dot(s.rot.col(col)) * s.scale[col];
    }
    const auto d_rot = rotation_quat_jacobian(s.qhat);
    Vec4 g_qhat;
    for (int m = 0; m < 4; ++m) g_qhat[m] = (g_rot.array() * d_rot[m].array()).sum();
    const Vec4 g_q = (g_qhat - s.qhat * s.qhat.dot(g_qhat)) / s.qnorm;
    for (int m = 0; m < 4; ++m) grads.rotation[4 * i + m] = g_q[m];
  }
  return grads;
}

}  // namespace gsd
