// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/rasterizer.hpp"
#include "gsd/scene.hpp"

namespace gsd {

struct SyntheticOptions {
  std::uint64_t seed = 0;
  int n_gaussians = 200;
  int n_views = 24;
  int resolution = 64;
  int sh_degree = 1;
  double arc_degrees = 120.0;    // azimuth span of the camera arc
  double elevation_degrees = 15.0;
  double radius = 3.0;
  double focal_factor = 1.1;     // focal length in units of the image width
};

/// Ground-truth cloud, cameras on an arc facing the centroid, and renders.
struct SyntheticScene {
  GaussianCloud gt_cloud;
  std::vector<Camera> cameras;
  Clip gt_images;
  Clip gt_depths;
  Clip gt_alphas;
  std::vector<int> test_views;   // every 8th view
  std::vector<int> train_pool;   // the rest
  Vec3 centroid = Vec3::Zero();
  double extent = 1.0;           // max distance of a GT centre from the centroid
};

namespace synth_detail {

inline Vec4 random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec4 q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  if (q[0] < 0.0) q = -q;
  return q;
}

}  // namespace synth_detail

/// Deterministic scene of 3 to 5 coloured blobs. Views with index % 8 == 0
/// are held out.
inline SyntheticScene make_synthetic_scene(const SyntheticOptions& opt) {
  require(opt.n_gaussians >= 1, "synthetic scene needs at least one Gaussian");
  require(opt.n_views >= 4, "synthetic scene needs at least four views");
  require(opt.resolution >= 16, "synthetic scene resolution must be >= 16");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int n_blobs = 3 + static_cast<int>(rng() % 3);
  struct Blob {
    Vec3 center;
    Vec3 color;
    double spread;
    double size;
  };
  std::vector<Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    Blob blob;
    blob.center = Vec3(uni(rng) - 0.5, 0.8 * (uni(rng) - 0.5), uni(rng) - 0.5) * 1.2;
    blob.color = Vec3(0.15 + 0.8 * uni(rng), 0.15 + 0.8 * uni(rng), 0.15 + 0.8 * uni(rng));
    blob.spread = 0.12 + 0.15 * uni(rng);
    blob.size = 0.04 + 0.06 * uni(rng);
    blobs.push_back(blob);
  }

  SyntheticScene scene;
  scene.gt_cloud = GaussianCloud(opt.sh_degree);
  const int nc = sh_count(opt.sh_degree) * 3;
  std::vector<double> coeffs(nc, 0.0);
  for (int g = 0; g < opt.n_gaussians; ++g) {
    const Blob& blob = blobs[g % n_blobs];
    const Vec3 pos = blob.center + blob.spread * Vec3(normal(rng), normal(rng), normal(rng));
    Vec3 scale;
    for (int k = 0; k < 3; ++k) scale[k] = blob.size * std::exp(0.4 * normal(rng));
    const double opacity = 0.6 + 0.35 * uni(rng);
    Vec3 color = blob.color + 0.06 * Vec3(normal(rng), normal(rng), normal(rng));
    color = color.cwiseMax(0.02).cwiseMin(0.98);
    scene.gt_cloud.add(pos, synth_detail::random_quat(rng), scale, std::log(opacity / (1.0 - opacity)), coeffs);
    scene.gt_cloud.set_base_color(scene.gt_cloud.size() - 1, color);
    if (opt.sh_degree == 2) {
      auto sh = scene.gt_cloud.family(Family::sh).begin() + (scene.gt_cloud.size() - 1) * nc;
      for (int k = 3; k < nc; ++k) sh[k] = 0.05 * normal(rng);
    }
  }

  for (std::size_t i = 0; i < scene.gt_cloud.size(); ++i) scene.centroid += scene.gt_cloud.mean(i);
  scene.centroid /= static_cast<double>(scene.gt_cloud.size());
  scene.extent = 0.0;
  for (std::size_t i = 0; i < scene.gt_cloud.size(); ++i)
    scene.extent = std::max(scene.extent, (scene.gt_cloud.mean(i) - scene.centroid).norm());
  scene.extent = std::max(scene.extent, 1e-3);

  const double deg = std::numbers::pi / 180.0;
  const double el = opt.elevation_degrees * deg;
  for (int v = 0; v < opt.n_views; ++v) {
    const double az = (-0.5 + static_cast<double>(v) / (opt.n_views - 1)) * opt.arc_degrees * deg;
    const Vec3 eye = scene.centroid + opt.radius * Vec3(std::sin(az) * std::cos(el), std::sin(el),
                                                        std::cos(az) * std::cos(el));
    scene.cameras.push_back(look_at(eye, scene.centroid, Vec3(0.0, 1.0, 0.0), opt.focal_factor * opt.resolution,
                                    opt.resolution, opt.resolution));
  }
  for (const Camera& cam : scene.cameras) {
    RenderedFrame f = render(scene.gt_cloud, cam);
    scene.gt_images.push_back(std::move(f.rgb));
    scene.gt_depths.push_back(std::move(f.depth));
    scene.gt_alphas.push_back(std::move(f.alpha));
  }
  for (int v = 0; v < opt.n_views; ++v) (v % 8 == 0 ? scene.test_views : scene.train_pool).push_back(v);
  return scene;
}

/// k views sampled evenly from the training pool.
inline std::vector<int> sparse_train_views(const SyntheticScene& scene, int k) {
  const int pool = static_cast<int>(scene.train_pool.size());
  require(k >= 1 && k <= pool, "requested more training views than the pool holds");
  std::vector<int> out;
  if (k == 1) return {scene.train_pool[pool / 2]};
  for (int i = 0; i < k; ++i) {
    const int idx = static_cast<int>(std::lround(static_cast<double>(i) * (pool - 1) / (k - 1)));
    out.push_back(scene.train_pool[idx]);
  }
  return out;
}

/// Stand-in monocular depth: a random positive affine transform of the GT
/// depth plus 1% multiplicative noise; zero where the GT has no coverage.
inline Image corrupt_depth(const Image& gt_depth, const Image& gt_alpha, std::mt19937_64& rng,
                           double noise = 0.01) {
  std::uniform_real_distribution<double> scale(0.5, 2.0), shift(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double a = scale(rng), b = shift(rng);
  Image out(gt_depth.height, gt_depth.width, 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double n = normal(rng);
    if (gt_alpha.data[k] > kAlphaEps) out.data[k] = (a * gt_depth.data[k] + b) * (1.0 + noise * n);
  }
  return out;
}

/// Initial cloud: n0 GT centres plus Gaussian jitter (jitter * extent per
/// axis) and colour noise, followed by a
/// fraction of uniform floaters in the GT bounding box. Isotropic scales
/// follow the mean distance to the three nearest initial points.
inline GaussianCloud make_initial_cloud(const SyntheticScene& scene, int n0, double floater_fraction,
                                        std::mt19937_64& rng, int sh_degree = 1,
                                        double jitter = 0.02) {
  const GaussianCloud& gt = scene.gt_cloud;
  require(n0 >= 1, "initial cloud needs at least one point");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 lo = gt.mean(0), hi = gt.mean(0);
  for (std::size_t i = 1; i < gt.size(); ++i) {
    lo = lo.cwiseMin(gt.mean(i));
    hi = hi.cwiseMax(gt.mean(i));
  }
  std::vector<Vec3> pos, col;
  for (int i = 0; i < n0; ++i) {
    const std::size_t src = static_cast<std::size_t>(i) % gt.size();
    pos.push_back(gt.mean(src) + jitter * scene.extent * Vec3(normal(rng), normal(rng), normal(rng)));
    const auto c = gt.sh_coeffs(src);
    Vec3 rgb(kSH0 * c[0] + kSHOffset, kSH0 * c[1] + kSHOffset, kSH0 * c[2] + kSHOffset);
    rgb += 0.1 * Vec3(normal(rng), normal(rng), normal(rng));
    col.push_back(rgb.cwiseMax(0.02).cwiseMin(0.98));
  }
  const int floaters = static_cast<int>(std::lround(floater_fraction * n0));
  for (int i = 0; i < floaters; ++i) {
    pos.push_back(lo + Vec3(uni(rng), uni(rng), uni(rng)).cwiseProduct(hi - lo));
    col.push_back(Vec3(0.5, 0.5, 0.5));
  }
  GaussianCloud cloud(sh_degree);
  std::vector<double> coeffs(3 * sh_count(sh_degree), 0.0);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    std::array<double, 3> best{1e300, 1e300, 1e300};
    for (std::size_t j = 0; j < pos.size(); ++j) {
      if (j == i) continue;
      double d = (pos[i] - pos[j]).squaredNorm();
      for (double& b : best)
        if (d < b) std::swap(d, b);
    }
    double mean_d2 = 0.0;
    int used = 0;
    for (double b : best)
      if (b < 1e300) {
        mean_d2 += b;
        ++used;
      }
    const double s = used ? std::clamp(std::sqrt(mean_d2 / used), 1e-3, 0.5 * scene.extent) : 0.05 * scene.extent;
    cloud.add(pos[i], Vec4(1, 0, 0, 0), Vec3(s, s, s), std::log(0.1 / 0.9), coeffs);
    cloud.set_base_color(cloud.size() - 1, col[i]);
  }
  return cloud;
}

/// Copy of cam rotated by a random small angle about a random axis and
/// moved by a random offset. Used to model a biased generative prior.
inline Camera jitter_camera(const Camera& cam, double angle_sigma, double offset_sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 axis(normal(rng), normal(rng), normal(rng));
  axis.normalize();
  const double angle = angle_sigma * normal(rng);
  const Mat3 delta = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Vec3 center = cam.center() + offset_sigma * Vec3(normal(rng), normal(rng), normal(rng));
  Camera out = cam;
  out.rotation = delta * cam.rotation;
  out.translation = -out.rotation * center;
  return out;
}

}  // namespace gsd
