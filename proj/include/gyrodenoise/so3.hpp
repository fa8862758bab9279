#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <vector>

namespace gyrodenoise::so3 {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Element of SO(3), stored as a 3x3 matrix mapping body-frame vectors to the
/// global frame.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation identity() { return Rotation(); }

  /// Validating constructor: throws InvalidRotation when ||m^T m - I||_F or
  /// |det(m) - 1| exceeds `tol`.
  static Rotation from_matrix(const Mat3& m, double tol = 1e-6);

  /// No validation. Callers guarantee m is a rotation up to rounding.
  static Rotation unchecked(const Mat3& m) { return Rotation(m); }

  const Mat3& matrix() const noexcept { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

  Rotation inverse() const { return Rotation(m_.transpose()); }
  Rotation operator*(const Rotation& rhs) const { return Rotation(m_ * rhs.m_); }

  /// ||m^T m - I||_F
  double orthonormality_error() const;

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

Mat3 hat(const Vec3& v);
Vec3 vee(const Mat3& m);

/// Rodrigues formula; second-order series for ||v|| < 1e-8.
Rotation exp(const Vec3& v);

/// Inverse of exp on the open ball ||v|| < pi. Throws InvalidRotation for
/// inputs further than 1e-6 from SO(3).
Vec3 log(const Rotation& r);

/// log without the orthonormality check (hot paths on already-valid products).
Vec3 log_unchecked(const Mat3& r);

/// Plain product a * b.
Rotation compose(const Rotation& a, const Rotation& b);

/// Nearest rotation in Frobenius norm via the polar decomposition
/// m (m^T m)^{-1/2}.
Rotation project(const Mat3& m);

/// Right Jacobian J_r(v): exp(v + d) ~= exp(v) exp(J_r(v) d).
Mat3 right_jacobian(const Vec3& v);
Mat3 right_jacobian_inverse(const Vec3& v);

/// Yaw of a rotation in the ZYX (yaw-pitch-roll) convention, radians.
double yaw(const Mat3& r);

/// Geodesic interpolation a exp(tau log(a^T b)), tau in [0, 1].
Rotation interpolate(const Rotation& a, const Rotation& b, double tau);

/// Running product that re-projects onto SO(3) every `reproject_every`
/// compositions.
class RotationChain {
 public:
  explicit RotationChain(const Rotation& start = Rotation(), int reproject_every = 512);

  /// state <- state * step
  const Rotation& push(const Rotation& step);
  const Rotation& current() const noexcept { return state_; }

 private:
  Rotation state_;
  int reproject_every_;
  int since_projection_ = 0;
};

/// Open-loop integration R_{k+1} = R_k exp(omega_k dt). Returns R_0..R_M for
/// M = omegas.size(). Throws InvalidArgument naming the first non-finite
/// sample, or for dt <= 0.
std::vector<Rotation> integrate_increments(const Rotation& r0, std::span<const Vec3> omegas,
                                           double dt, int reproject_every = 512);

}  // namespace gyrodenoise::so3
