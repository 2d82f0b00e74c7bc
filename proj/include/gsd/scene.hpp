// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"

namespace gsd {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kUnitQuatTolerance = 1e-6;

// ---------------------------------------------------------------------------
// Gaussian cloud
// ---------------------------------------------------------------------------

/// Parameter families of a Gaussian cloud. Values double as indices into
/// ParamBlock::family().
enum class Family { position = 0, rotation, log_scale, opacity_logit, sh };

inline constexpr std::array<Family, 5> kFamilies = {Family::position, Family::rotation, Family::log_scale,
                                                    Family::opacity_logit, Family::sh};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::position: return "position";
    case Family::rotation: return "rotation";
    case Family::log_scale: return "log_scale";
    case Family::opacity_logit: return "opacity_logit";
    case Family::sh: return "sh";
  }
  return "?";
}

/// Number of SH coefficients per colour channel for a degree counting bands
/// 0..degree-1.
constexpr int sh_count(int degree) { return degree * degree; }

/// Structure-of-arrays storage shared by the cloud and its gradients.
///
/// Per Gaussian i:
///   position       [3]        world-space mean
///   rotation       [4]        quaternion (w, x, y, z)
///   log_scale      [3]        log of the per-axis standard deviation
///   opacity_logit  [1]        logit of the opacity
///   sh             [D*D*3]    coefficient-major, RGB innermost
struct ParamBlock {
  int sh_degree = 1;
  std::vector<double> position;
  std::vector<double> rotation;
  std::vector<double> log_scale;
  std::vector<double> opacity_logit;
  std::vector<double> sh;

  std::size_t size() const { return opacity_logit.size(); }
  bool empty() const { return opacity_logit.empty(); }

  int stride(Family f) const {
    switch (f) {
      case Family::position: return 3;
      case Family::rotation: return 4;
      case Family::log_scale: return 3;
      case Family::opacity_logit: return 1;
      case Family::sh: return sh_count(sh_degree) * 3;
    }
    return 0;
  }

  std::vector<double>& family(Family f) {
    switch (f) {
      case Family::position: return position;
      case Family::rotation: return rotation;
      case Family::log_scale: return log_scale;
      case Family::opacity_logit: return opacity_logit;
      case Family::sh: return sh;
    }
    return position;
  }
  const std::vector<double>& family(Family f) const { return const_cast<ParamBlock*>(this)->family(f); }

  /// Resizes every family to n Gaussians, zero-filling new entries.
  void resize(std::size_t n) {
    for (Family f : kFamilies) family(f).resize(n * stride(f), 0.0);
  }

  bool consistent() const {
    const std::size_t n = size();
    for (Family f : kFamilies)
      if (family(f).size() != n * stride(f)) return false;
    return sh_degree == 1 || sh_degree == 2;
  }

  /// Appends Gaussian i of src.
  void append_from(const ParamBlock& src, std::size_t i) {
    for (Family f : kFamilies) {
      const int s = stride(f);
      const auto& from = src.family(f);
      family(f).insert(family(f).end(), from.begin() + i * s, from.begin() + (i + 1) * s);
    }
  }

  void set_zero() {
    for (Family f : kFamilies) std::fill(family(f).begin(), family(f).end(), 0.0);
  }
};

/// The learnable scene: positions, rotations, scales, opacities and SH
/// colour coefficients of N anisotropic Gaussians.
struct GaussianCloud : ParamBlock {
  GaussianCloud() = default;
  explicit GaussianCloud(int degree, std::size_t n = 0) {
    require(degree == 1 || degree == 2, "SH degree must be 1 or 2");
    sh_degree = degree;
    resize(n);
    for (std::size_t i = 0; i < n; ++i) rotation[4 * i] = 1.0;
  }

  Vec3 mean(std::size_t i) const { return {position[3 * i], position[3 * i + 1], position[3 * i + 2]}; }
  Vec4 quat(std::size_t i) const {
    return {rotation[4 * i], rotation[4 * i + 1], rotation[4 * i + 2], rotation[4 * i + 3]};
  }
  Vec3 scale(std::size_t i) const {
    return {std::exp(log_scale[3 * i]), std::exp(log_scale[3 * i + 1]), std::exp(log_scale[3 * i + 2])};
  }
  double opacity(std::size_t i) const { return 1.0 / (1.0 + std::exp(-opacity_logit[i])); }
  std::span<const double> sh_coeffs(std::size_t i) const {
    const std::size_t s = static_cast<std::size_t>(stride(Family::sh));
    return {sh.data() + i * s, s};
  }

  void set_mean(std::size_t i, const Vec3& m) {
    for (int k = 0; k < 3; ++k) position[3 * i + k] = m[k];
  }
  void set_quat(std::size_t i, const Vec4& q) {
    for (int k = 0; k < 4; ++k) rotation[4 * i + k] = q[k];
  }
  void set_scale(std::size_t i, const Vec3& s) {
    for (int k = 0; k < 3; ++k) log_scale[3 * i + k] = std::log(s[k]);
  }
  void set_opacity(std::size_t i, double alpha) { opacity_logit[i] = std::log(alpha / (1.0 - alpha)); }
  /// Sets the band-0 coefficient so that the evaluated colour equals rgb.
  void set_base_color(std::size_t i, const Vec3& rgb);

  void add(const Vec3& mean, const Vec4& quat, const Vec3& scale, double opacity_logit_value,
           std::span<const double> coeffs) {
    require(static_cast<int>(coeffs.size()) == stride(Family::sh), "SH coefficient count mismatch");
    for (int k = 0; k < 3; ++k) position.push_back(mean[k]);
    for (int k = 0; k < 4; ++k) rotation.push_back(quat[k]);
    for (int k = 0; k < 3; ++k) log_scale.push_back(std::log(scale[k]));
    opacity_logit.push_back(opacity_logit_value);
    sh.insert(sh.end(), coeffs.begin(), coeffs.end());
  }

  /// Renormalizes every quaternion to unit length.
  void normalize_rotations() {
    for (std::size_t i = 0; i < size(); ++i) {
      double* q = &rotation[4 * i];
      const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
      if (n > 0.0)
        for (int k = 0; k < 4; ++k) q[k] /= n;
      else
        q[0] = 1.0;
    }
  }

  /// Throws ValidationError when any structural invariant is broken.
  void validate() const {
    require(consistent(), "Gaussian cloud families have inconsistent lengths or degree");
    for (std::size_t i = 0; i < size(); ++i) {
      const double n = quat(i).norm();
      if (std::abs(n - 1.0) > kUnitQuatTolerance) {
        std::ostringstream os;
        os << "Gaussian " << i << " has non-unit quaternion (norm " << n << ")";
        throw ValidationError(os.str());
      }
    }
    for (double v : position)
      require(std::isfinite(v), "non-finite Gaussian position");
    for (double v : log_scale)
      require(std::isfinite(v), "non-finite Gaussian scale");
  }
};

/// Gradients of a scalar loss with respect to every cloud parameter. Scale
/// entries are derivatives with respect to the log-scale.
struct CloudGradients : ParamBlock {
  CloudGradients() = default;
  explicit CloudGradients(const GaussianCloud& like) {
    sh_degree = like.sh_degree;
    resize(like.size());
  }

  CloudGradients& operator+=(const CloudGradients& o) {
    require(o.size() == size() && o.sh_degree == sh_degree, "gradient shape mismatch");
    for (Family f : kFamilies) {
      auto& a = family(f);
      const auto& b = o.family(f);
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    }
    return *this;
  }

  void scale_by(double s) {
    for (Family f : kFamilies)
      for (double& v : family(f)) v *= s;
  }

  bool finite() const {
    for (Family f : kFamilies)
      for (double v : family(f))
        if (!std::isfinite(v)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Rotations and covariance
// ---------------------------------------------------------------------------

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Mat3 rotation_from_quat(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Partial derivatives of rotation_from_quat with respect to w, x, y, z.
inline std::array<Mat3, 4> rotation_quat_jacobian(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Mat3, 4> d;
  d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return d;
}

/// Quaternion (w, x, y, z) of a rotation matrix, with w >= 0.
inline Vec4 quat_from_rotation(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  Vec4 out(q.w(), q.x(), q.y(), q.z());
  if (out[0] < 0) out = -out;
  return out;
}

/// Sigma = R S S^T R^T for a unit quaternion and positive per-axis scales.
inline Mat3 covariance_from_rs(const Vec4& quat, const Vec3& scale) {
  if (std::abs(quat.norm() - 1.0) > kUnitQuatTolerance)
    throw ValidationError("covariance_from_rs: quaternion is not unit norm");
  if (!(scale.array() > 0.0).all()) throw ValidationError("covariance_from_rs: scales must be positive");
  const Mat3 m = rotation_from_quat(quat) * scale.asDiagonal();
  return m * m.transpose();
}

/// Normalized 3D Gaussian density at p. `which` names the Gaussian in errors.
inline double gaussian_density(const Vec3& p, const Vec3& mu, const Mat3& sigma, long which = -1) {
  Eigen::SelfAdjointEigenSolver<Mat3> eig(sigma);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) {
    std::ostringstream os;
    os << "gaussian_density: covariance";
    if (which >= 0) os << " of Gaussian " << which;
    os << " is singular or ill-conditioned (eigenvalues " << lo << ", " << hi << ")";
    throw SingularityError(os.str());
  }
  const Vec3 d = p - mu;
  const double mahal = d.dot(sigma.ldlt().solve(d));
  const double norm = std::pow(2.0 * std::numbers::pi, -1.5) / std::sqrt(sigma.determinant());
  return norm * std::exp(-0.5 * mahal);
}

// ---------------------------------------------------------------------------
// Spherical harmonics
// ---------------------------------------------------------------------------

inline constexpr double kSH0 = 0.28209479177387814;  // 1 / (2 sqrt(pi))
inline constexpr double kSH1 = 0.4886025119029199;   // sqrt(3 / (4 pi))
inline constexpr double kSHOffset = 0.5;

/// Real SH basis values up to band degree-1, ordered (0,0), (1,-1), (1,0), (1,1).
inline std::array<double, 4> sh_basis(const Vec3& dir, int degree) {
  std::array<double, 4> y{kSH0, 0.0, 0.0, 0.0};
  if (degree >= 2) {
    y[1] = kSH1 * dir.y();
    y[2] = kSH1 * dir.z();
    y[3] = kSH1 * dir.x();
  }
  return y;
}

/// Colour before the clamp: sum_i c_i Y_i(dir) + offset.
inline Vec3 eval_sh_unclamped(std::span<const double> coeffs, const Vec3& dir, int degree) {
  const auto y = sh_basis(dir, degree);
  Vec3 rgb = Vec3::Constant(kSHOffset);
  for (int i = 0; i < sh_count(degree); ++i)
    for (int c = 0; c < 3; ++c) rgb[c] += coeffs[3 * i + c] * y[i];
  return rgb;
}

/// View-dependent colour of one Gaussian, clamped at zero.
inline Vec3 eval_sh(std::span<const double> coeffs, const Vec3& view_dir, int degree) {
  require(degree == 1 || degree == 2, "SH degree must be 1 or 2");
  require(static_cast<int>(coeffs.size()) == 3 * sh_count(degree), "eval_sh: coefficient count must be 3*D^2");
  require(std::abs(view_dir.norm() - 1.0) < 1e-6, "eval_sh: view direction must be unit length");
  return eval_sh_unclamped(coeffs, view_dir, degree).cwiseMax(0.0);
}

inline void GaussianCloud::set_base_color(std::size_t i, const Vec3& rgb) {
  const std::size_t s = static_cast<std::size_t>(stride(Family::sh));
  std::fill(sh.begin() + i * s, sh.begin() + (i + 1) * s, 0.0);
  for (int c = 0; c < 3; ++c) sh[i * s + c] = (rgb[c] - kSHOffset) / kSH0;
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

/// Pinhole camera. rotation/translation map world points into the camera
/// frame: p_cam = R p_world + T. Pixel coordinates put pixel (x, y) at its
/// integer index.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Mat3 intrinsics() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
  Vec3 center() const { return -rotation.transpose() * translation; }
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec2 project(const Vec3& cam) const { return {fx * cam.x() / cam.z() + cx, fy * cam.y() / cam.z() + cy}; }

  bool same_intrinsics(const Camera& o) const {
    return fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width && height == o.height;
  }

  void validate() const {
    require(width > 0 && height > 0, "camera resolution must be positive");
    require(fx > 0 && fy > 0, "camera focal lengths must be positive");
    require((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9,
            "camera rotation must be orthonormal");
    require(std::abs(rotation.determinant() - 1.0) < 1e-9, "camera rotation must have det 1");
  }

  friend bool operator==(const Camera& a, const Camera& b) {
    return a.same_intrinsics(b) && a.rotation == b.rotation && a.translation == b.translation;
  }
};

/// Camera at `eye` looking at `target`, with +y of the image pointing
/// towards -up (image rows grow downward).
inline Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  cam.width = width;
  cam.height = height;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  return cam;
}

/// Angle in radians of the relative rotation a^T b.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a * b.transpose()).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

inline constexpr double kMaxTrajectoryParam = 2.0;

/// Camera path from training view v_j (frame 1) through v_k (frame s),
/// optionally continuing past v_k.
struct Trajectory {
  std::vector<Camera> poses;
  int anchor_s = 2;  // 1-based frame index carrying v_k

  std::size_t size() const { return poses.size(); }
  int anchor_index() const { return anchor_s - 1; }
};

/// Interpolation parameter of 1-based frame i for anchor s.
inline double trajectory_param(int i, int s) {
  return std::min(static_cast<double>(i - 1) / static_cast<double>(s - 1), kMaxTrajectoryParam);
}

/// Spherical-linear interpolation of unit quaternions along the shorter arc.
/// u outside [0, 1] extrapolates along the same great circle.
inline Vec4 slerp(Vec4 a, Vec4 b, double u) {
  double dot = a.dot(b);
  if (dot < 0.0) {
    b = -b;
    dot = -dot;
  }
  if (dot > 1.0 - 1e-12) return (a + u * (b - a)).normalized();
  const double theta = std::acos(std::min(dot, 1.0));
  const double st = std::sin(theta);
  return ((std::sin((1.0 - u) * theta) / st) * a + (std::sin(u * theta) / st) * b).normalized();
}

/// n-frame trajectory with cam_j at frame 1 and cam_k at frame s. Frames past
/// s extrapolate the same parameterization, capped at u = 2.
inline Trajectory interpolate_trajectory(const Camera& cam_j, const Camera& cam_k, int n, int s) {
  require(n >= 2, "trajectory needs at least two frames");
  require(s >= 2 && s <= n, "trajectory anchor s must satisfy 2 <= s <= n");
  require(cam_j.same_intrinsics(cam_k), "trajectory endpoints must share intrinsics and resolution");

  const Vec4 qj = quat_from_rotation(cam_j.rotation);
  const Vec4 qk = quat_from_rotation(cam_k.rotation);
  const Vec3 cj = cam_j.center();
  const Vec3 ck = cam_k.center();

  Trajectory traj;
  traj.anchor_s = s;
  traj.poses.reserve(n);
  for (int i = 1; i <= n; ++i) {
    if (i == 1) {
      traj.poses.push_back(cam_j);
      continue;
    }
    if (i == s) {
      traj.poses.push_back(cam_k);
      continue;
    }
    const double u = trajectory_param(i, s);
    Camera cam = cam_j;
    cam.rotation = rotation_from_quat(slerp(qj, qk, u));
    const Vec3 center = (1.0 - u) * cj + u * ck;
    cam.translation = -cam.rotation * center;
    traj.poses.push_back(cam);
  }
  return traj;
}

}  // namespace gsd
