#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "rio/error.hpp"
#include "rio/imu.hpp"

namespace rio {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Horizontal rotation about the vertical (z) axis. Angles are radians.
class RotationZ {
 public:
  constexpr RotationZ() = default;
  constexpr explicit RotationZ(double radians) : angle_(radians) {}

  static RotationZ from_degrees(double deg) { return RotationZ(deg_to_rad(deg)); }

  constexpr double angle() const { return angle_; }

  /// Equivalent angle in (0, 2*pi].
  double normalized() const {
    double a = std::fmod(angle_, kTwoPi);
    if (a <= 0.0) a += kTwoPi;
    return a;
  }

  Eigen::Matrix3d matrix() const {
    const double c = std::cos(angle_), s = std::sin(angle_);
    Eigen::Matrix3d m;
    m << c, -s, 0, s, c, 0, 0, 0, 1;
    return m;
  }

  RotationZ inverse() const { return RotationZ(-angle_); }

  friend RotationZ operator*(const RotationZ& a, const RotationZ& b) {
    return RotationZ(RotationZ(a.angle_ + b.angle_).normalized());
  }

 private:
  double angle_ = 0.0;
};

inline Vec3 rotate_z(const RotationZ& rot, const Vec3& v) {
  const double c = std::cos(rot.angle()), s = std::sin(rot.angle());
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y(), v.z()};
}

inline ImuWindow rotate_window(const RotationZ& rot, const ImuWindow& w) {
  ImuWindow out = w;
  for (auto& s : out.samples) {
    s.accel = rotate_z(rot, s.accel);
    s.gyro = rotate_z(rot, s.gyro);
  }
  return out;
}

/// Similarity transform p -> scale * rotation * p + translation.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }

  bool is_valid(double tol = 1e-9) const {
    return scale > 0.0 &&
           (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
               tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }
};

/// Uniformly sampled position sequence.
struct Trajectory {
  std::vector<Vec3> positions;
  double rate_hz = 20.0;
  double origin_time = 0.0;

  std::size_t size() const { return positions.size(); }
  double span() const {
    return positions.empty() ? 0.0 : static_cast<double>(positions.size() - 1) / rate_hz;
  }
};

inline Trajectory transform_trajectory(const RigidTransform& tf, const Trajectory& traj) {
  Trajectory out = traj;
  for (auto& p : out.positions) p = tf.apply(p);
  return out;
}

/// Least-squares alignment of `est` onto `gt` (Umeyama). Rigid by default;
/// `with_scale` additionally fits a global scale factor.
inline std::pair<RigidTransform, Trajectory> umeyama_align(const Trajectory& est,
                                                           const Trajectory& gt,
                                                           bool with_scale = false) {
  const std::size_t n = est.size();
  if (n != gt.size()) {
    throw Error(ErrorCode::LengthMismatch, "umeyama_align: trajectories have " +
                                               std::to_string(n) + " and " +
                                               std::to_string(gt.size()) + " points");
  }
  if (n < 3) throw Error(ErrorCode::DegenerateInput, "umeyama_align needs at least 3 points");

  Vec3 mu_x = Vec3::Zero(), mu_y = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_x += est.positions[i];
    mu_y += gt.positions[i];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  mu_x *= inv_n;
  mu_y *= inv_n;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_x = 0.0, var_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 dx = est.positions[i] - mu_x;
    const Vec3 dy = gt.positions[i] - mu_y;
    cov += dy * dx.transpose();
    var_x += dx.squaredNorm();
    var_y += dy.squaredNorm();
  }
  cov *= inv_n;
  var_x *= inv_n;
  var_y *= inv_n;
  if (var_x < 1e-18 || var_y < 1e-18) {
    throw Error(ErrorCode::DegenerateInput, "umeyama_align: point set has zero variance");
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;

  RigidTransform tf;
  tf.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  tf.scale = with_scale ? (svd.singularValues().asDiagonal() * s).trace() / var_x : 1.0;
  tf.translation = mu_y - tf.scale * (tf.rotation * mu_x);
  return {tf, transform_trajectory(tf, est)};
}

}  // namespace rio
