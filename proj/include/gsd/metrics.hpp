// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "gsd/common.hpp"

namespace gsd {

inline constexpr double kPsnrCap = 100.0;

inline double mse(const Image& a, const Image& b) {
  require(a.same_shape(b), "mse: shape mismatch");
  require(a.size() > 0, "mse: empty image");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a.data[k] - b.data[k];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// 10 log10(1 / MSE), capped at 100 dB when MSE < 1e-10.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m < 1e-10) return kPsnrCap;
  return 10.0 * std::log10(1.0 / m);
}

// ---------------------------------------------------------------------------
// SSIM on luma, 11x11 Gaussian window (sigma 1.5), valid windows only.
// ---------------------------------------------------------------------------

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> k{};
  double s = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

namespace ssim_detail {

/// Valid separable correlation of a single-channel image with the window.
inline Image filter_valid(const Image& img) {
  const auto k = ssim_kernel();
  const int oh = img.height - kSsimWindow + 1, ow = img.width - kSsimWindow + 1;
  Image rows(img.height, ow, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * img(y, x + i);
      rows(y, x) = s;
    }
  Image out(oh, ow, 1);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * rows(y + i, x);
      out(y, x) = s;
    }
  return out;
}

/// Adjoint of filter_valid: scatters a valid-size map back to full size.
inline Image filter_valid_adjoint(const Image& map, int height, int width) {
  const auto k = ssim_kernel();
  Image cols(height, map.width, 1);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x)
      for (int i = 0; i < kSsimWindow; ++i) cols(y + i, x) += k[i] * map(y, x);
  Image out(height, width, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < map.width; ++x)
      for (int i = 0; i < kSsimWindow; ++i) out(y, x + i) += k[i] * cols(y, x);
  return out;
}

inline Image product(const Image& a, const Image& b) {
  Image out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] *= b.data[k];
  return out;
}

inline Image to_gray(const Image& img) { return img.channels == 1 ? img : luma(img); }

}  // namespace ssim_detail

struct SsimResult {
  double value = 0.0;
  Image grad;  // d value / d a, same shape as a
};

/// Mean local SSIM of luma(a) against luma(b); optionally returns d/da.
inline SsimResult ssim_with_grad(const Image& a, const Image& b, bool want_grad = true) {
  using namespace ssim_detail;
  require(a.same_shape(b), "ssim: shape mismatch");
  require(a.channels == 1 || a.channels == 3, "ssim: needs 1 or 3 channels");
  require(a.height >= kSsimWindow && a.width >= kSsimWindow, "ssim: image smaller than the 11x11 window");
  const Image ga = to_gray(a), gb = to_gray(b);
  const Image mu_a = filter_valid(ga), mu_b = filter_valid(gb);
  const Image e_aa = filter_valid(product(ga, ga));
  const Image e_bb = filter_valid(product(gb, gb));
  const Image e_ab = filter_valid(product(ga, gb));
  const std::size_t n = mu_a.size();
  SsimResult out;
  Image d_mu(mu_a.height, mu_a.width, 1), d_eaa(mu_a.height, mu_a.width, 1), d_eab(mu_a.height, mu_a.width, 1);
  for (std::size_t k = 0; k < n; ++k) {
    const double ma = mu_a.data[k], mb = mu_b.data[k];
    const double va = e_aa.data[k] - ma * ma, vb = e_bb.data[k] - mb * mb, cab = e_ab.data[k] - ma * mb;
    const double num1 = 2.0 * ma * mb + kSsimC1, num2 = 2.0 * cab + kSsimC2;
    const double den1 = ma * ma + mb * mb + kSsimC1, den2 = va + vb + kSsimC2;
    const double s = (num1 * num2) / (den1 * den2);
    out.value += s;
    if (!want_grad) continue;
    // Partials with respect to mu_a, var_a and cov_ab, then to the raw moments.
    const double ds_dma = (2.0 * mb * num2) / (den1 * den2) - s * (2.0 * ma) / den1;
    const double ds_dva = -s / den2;
    const double ds_dcab = 2.0 * num1 / (den1 * den2);
    d_eaa.data[k] = ds_dva;
    d_eab.data[k] = ds_dcab;
    d_mu.data[k] = ds_dma - 2.0 * ma * ds_dva - mb * ds_dcab;
  }
  out.value /= static_cast<double>(n);
  if (!want_grad) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  const Image g_mu = filter_valid_adjoint(d_mu, ga.height, ga.width);
  const Image g_aa = filter_valid_adjoint(d_eaa, ga.height, ga.width);
  const Image g_ab = filter_valid_adjoint(d_eab, ga.height, ga.width);
  Image g_gray(ga.height, ga.width, 1);
  for (std::size_t k = 0; k < g_gray.size(); ++k)
    g_gray.data[k] = inv_n * (g_mu.data[k] + 2.0 * ga.data[k] * g_aa.data[k] + gb.data[k] * g_ab.data[k]);
  if (a.channels == 1) {
    out.grad = std::move(g_gray);
  } else {
    out.grad = Image(a.height, a.width, 3);
    for (std::size_t p = 0; p < g_gray.size(); ++p) {
      out.grad.data[3 * p + 0] = kLumaR * g_gray.data[p];
      out.grad.data[3 * p + 1] = kLumaG * g_gray.data[p];
      out.grad.data[3 * p + 2] = kLumaB * g_gray.data[p];
    }
  }
  return out;
}

inline double ssim(const Image& a, const Image& b) { return ssim_with_grad(a, b, false).value; }

}  // namespace gsd
