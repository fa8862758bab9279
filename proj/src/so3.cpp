#include "gyrodenoise/so3.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <cmath>
#include <numbers>
#include <string>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise::so3 {

namespace {

constexpr double kExpSeriesBelow = 1e-8;
constexpr double kLogSeriesBelow = 1e-6;
constexpr double kLogNearPiAbove = std::numbers::pi - 1e-4;
constexpr double kJacobianSeriesBelow = 1e-3;

}  // namespace

Rotation Rotation::from_matrix(const Mat3& m, double tol) {
  if (!m.allFinite()) throw InvalidRotation("rotation matrix has non-finite entries");
  const double ortho = (m.transpose() * m - Mat3::Identity()).norm();
  const double det = m.determinant();
  if (ortho > tol || std::abs(det - 1.0) > tol) {
    throw InvalidRotation("matrix is not a rotation: ||R^T R - I|| = " + std::to_string(ortho) +
                          ", det = " + std::to_string(det));
  }
  return Rotation(m);
}

double Rotation::orthonormality_error() const {
  return (m_.transpose() * m_ - Mat3::Identity()).norm();
}

Mat3 hat(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return k;
}

Vec3 vee(const Mat3& m) { return Vec3(m(2, 1), m(0, 2), m(1, 0)); }

Rotation exp(const Vec3& v) {
  if (!v.allFinite()) throw InvalidArgument("exp: non-finite rotation vector");
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;
  if (theta < kExpSeriesBelow) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k = hat(v);
  return Rotation::unchecked(Mat3::Identity() + a * k + b * (k * k));
}

Vec3 log_unchecked(const Mat3& r) {
  const double c = 0.5 * (r.trace() - 1.0);
  const Vec3 w = 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double s = w.norm();
  const double theta = std::atan2(s, c);

  if (theta < kLogSeriesBelow) return w * (1.0 + theta * theta / 6.0);

  if (theta > kLogNearPiAbove) {
    // Symmetric part is cos(theta) I + (1 - cos(theta)) a a^T.
    const Mat3 sym = 0.5 * (r + r.transpose());
    const Mat3 aat = (sym - c * Mat3::Identity()) / (1.0 - c);
    int i = 0;
    aat.diagonal().maxCoeff(&i);
    Vec3 axis = aat.col(i) / std::sqrt(aat(i, i));
    axis.normalize();
    if (axis.dot(w) < 0.0) axis = -axis;
    return theta * axis;
  }
  return (theta / s) * w;
}

Vec3 log(const Rotation& r) {
  const Mat3& m = r.matrix();
  if (!m.allFinite() || (m.transpose() * m - Mat3::Identity()).norm() > 1e-6 ||
      std::abs(m.determinant() - 1.0) > 1e-6) {
    throw InvalidRotation("log: input is not a rotation");
  }
  return log_unchecked(m);
}

Rotation compose(const Rotation& a, const Rotation& b) { return a * b; }

Rotation project(const Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> eig(m.transpose() * m);
  const Vec3 inv_sqrt = eig.eigenvalues().cwiseSqrt().cwiseInverse();
  const Mat3 q = eig.eigenvectors();
  return Rotation::unchecked(m * (q * inv_sqrt.asDiagonal() * q.transpose()));
}

Mat3 right_jacobian(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  double b1, b2;
  if (theta < kJacobianSeriesBelow) {
    b1 = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    b2 = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0;
  } else {
    b1 = (1.0 - std::cos(theta)) / theta2;
    b2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 k = hat(v);
  return Mat3::Identity() - b1 * k + b2 * (k * k);
}

Mat3 right_jacobian_inverse(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  double c2;
  if (theta < kJacobianSeriesBelow) {
    c2 = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0;
  } else {
    const double half = 0.5 * theta;
    c2 = 1.0 / theta2 - std::cos(half) / (2.0 * theta * std::sin(half));
  }
  const Mat3 k = hat(v);
  return Mat3::Identity() + 0.5 * k + c2 * (k * k);
}

double yaw(const Mat3& r) { return std::atan2(r(1, 0), r(0, 0)); }

Rotation interpolate(const Rotation& a, const Rotation& b, double tau) {
  const Vec3 delta = log_unchecked(a.matrix().transpose() * b.matrix());
  return a * exp(tau * delta);
}

RotationChain::RotationChain(const Rotation& start, int reproject_every)
    : state_(start), reproject_every_(reproject_every) {
  if (reproject_every_ < 1) throw InvalidArgument("reproject_every must be >= 1");
}

const Rotation& RotationChain::push(const Rotation& step) {
  state_ = state_ * step;
  if (++since_projection_ >= reproject_every_) {
    state_ = project(state_.matrix());
    since_projection_ = 0;
  }
  return state_;
}

std::vector<Rotation> integrate_increments(const Rotation& r0, std::span<const Vec3> omegas,
                                           double dt, int reproject_every) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("integrate_increments: dt must be > 0");
  std::vector<Rotation> out;
  out.reserve(omegas.size() + 1);
  out.push_back(r0);
  RotationChain chain(r0, reproject_every);
  for (std::size_t k = 0; k < omegas.size(); ++k) {
    if (!omegas[k].allFinite()) {
      throw InvalidArgument("integrate_increments: non-finite angular rate at index " +
                            std::to_string(k));
    }
    out.push_back(chain.push(exp(omegas[k] * dt)));
  }
  return out;
}

}  // namespace gyrodenoise::so3
