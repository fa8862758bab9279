#include "gyrodenoise/imu_model.hpp"

#include <Eigen/LU>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

struct Sinusoid {
  double amplitude, freq, phase;
};

using AxisProfile = std::vector<Sinusoid>;

AxisProfile draw_profile(std::mt19937_64& rng, int components, double amplitude, double fmin,
                         double fmax) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AxisProfile p;
  if (amplitude == 0.0 || components <= 0) return p;
  const double per = amplitude / std::sqrt(static_cast<double>(components));
  for (int c = 0; c < components; ++c) {
    const double a = per * (0.5 + unit(rng));
    const double f = fmin + (fmax - fmin) * unit(rng);
    const double ph = 2.0 * std::numbers::pi * unit(rng);
    p.push_back({a, f, ph});
  }
  return p;
}

double eval_profile(const AxisProfile& p, double t) {
  double s = 0.0;
  for (const auto& c : p) s += c.amplitude * std::sin(2.0 * std::numbers::pi * c.freq * t + c.phase);
  return s;
}

bool near_identity(const Mat3& m, double tol) {
  return ((m - Mat3::Identity()).cwiseAbs().array() <= tol).all();
}

}  // namespace

void CalibParams::validate() const {
  if (!near_identity(c_omega, 0.2) || std::abs(c_omega.determinant()) < 1e-6) {
    throw InvalidArgument("CalibParams: c_omega must be invertible and within 20% of identity");
  }
  if (!near_identity(c_acc, 0.2) || std::abs(c_acc.determinant()) < 1e-6) {
    throw InvalidArgument("CalibParams: c_acc must be invertible and within 20% of identity");
  }
  if ((noise_std.array() < 0.0).any() || !noise_std.allFinite()) {
    throw InvalidArgument("CalibParams: noise_std must be >= 0");
  }
  if (!bias.allFinite()) throw InvalidArgument("CalibParams: non-finite bias");
}

std::size_t SyntheticScene::sample_count() const {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw InvalidArgument("scene rate must be > 0");
  if (!(duration > 0.0)) throw InvalidArgument("scene duration must be > 0");
  const double n = duration * rate;
  const double rounded = std::round(n);
  if (std::abs(n - rounded) > 1e-6) {
    throw InvalidArgument("duration * rate must be an integer sample count");
  }
  return static_cast<std::size_t>(rounded);
}

void SyntheticScene::validate() const {
  sample_count();
  if (calib) calib->validate();
  if ((noise_std.array() < 0.0).any()) throw InvalidArgument("noise_std must be >= 0");
  if ((bias_walk_std.array() < 0.0).any()) throw InvalidArgument("bias_walk_std must be >= 0");
  if (!(noise_color >= 0.0 && noise_color < 1.0)) throw InvalidArgument("noise_color must be in [0, 1)");
  if (calib_perturbation < 0.0 || calib_perturbation > 0.2) {
    throw InvalidArgument("calib_perturbation must be in [0, 0.2]");
  }
}

ImuSequence corrupt(std::span<const Vec3> true_gyro, std::span<const Vec3> true_acc,
                    const CalibParams& calib, std::uint64_t seed, const NoiseProcess& process,
                    std::vector<Vec6>* realized_bias) {
  if (true_gyro.size() != true_acc.size()) {
    throw InvalidArgument("corrupt: gyro and accelerometer lengths differ (" +
                          std::to_string(true_gyro.size()) + " vs " +
                          std::to_string(true_acc.size()) + ")");
  }
  if (!(process.rate > 0.0)) throw InvalidArgument("corrupt: rate must be > 0");
  if (!(process.noise_color >= 0.0 && process.noise_color < 1.0)) {
    throw InvalidArgument("corrupt: noise_color must be in [0, 1)");
  }
  const std::size_t n = true_gyro.size();
  const double dt = 1.0 / process.rate;
  auto rng = make_rng(seed, 0x6e6f697365ULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  ImuSequence out;
  out.nominal_rate = process.rate;
  out.t_ns.resize(n);
  out.gyro.resize(n);
  out.acc.resize(n);
  if (realized_bias) realized_bias->resize(n);

  const bool walking = (process.bias_walk_std.array() > 0.0).any();
  const bool noisy = (calib.noise_std.array() > 0.0).any();
  const double c = process.noise_color;
  const double innovation = std::sqrt(1.0 - c * c);
  Vec6 bias = calib.bias;
  Vec6 eta = Vec6::Zero();
  for (std::size_t k = 0; k < n; ++k) {
    out.t_ns[k] = std::llround(static_cast<double>(k) * 1e9 / process.rate);
    Vec6 w = Vec6::Zero();
    if (noisy) {
      for (int i = 0; i < 6; ++i) w[i] = calib.noise_std[i] * normal(rng);
      eta = (k == 0 || c == 0.0) ? w : Vec6(c * eta + innovation * w);
    }
    out.gyro[k] = calib.c_omega * true_gyro[k] + bias.head<3>() + eta.head<3>();
    out.acc[k] = calib.c_acc * true_acc[k] + bias.tail<3>() + eta.tail<3>();
    if (realized_bias) (*realized_bias)[k] = bias;
    if (walking) {
      for (int i = 0; i < 6; ++i) bias[i] += process.bias_walk_std[i] * std::sqrt(dt) * normal(rng);
    }
  }
  return out;
}

std::vector<Vec3> true_acc_from_trajectory(std::span<const Rotation> rotations,
                                           std::span<const Vec3> velocities, double dt,
                                           const Vec3& gravity) {
  if (!(dt > 0.0)) throw InvalidArgument("true_acc_from_trajectory: dt must be > 0");
  if (rotations.size() != velocities.size()) {
    throw InvalidArgument("true_acc_from_trajectory: rotation and velocity lengths differ");
  }
  std::vector<Vec3> acc;
  if (rotations.size() < 2) return acc;
  acc.reserve(rotations.size() - 1);
  for (std::size_t k = 0; k + 1 < rotations.size(); ++k) {
    const Vec3 global = (velocities[k + 1] - velocities[k]) / dt - gravity;
    acc.push_back(rotations[k].matrix().transpose() * global);
  }
  return acc;
}

Scene generate_scene(const SyntheticScene& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.sample_count();
  const double dt = 1.0 / spec.rate;

  auto motion_rng = make_rng(seed, 1);
  const MotionSpec& m = spec.motion;
  AxisProfile gyro_profile[3], vel_profile[3];
  for (int a = 0; a < 3; ++a) {
    gyro_profile[a] = draw_profile(motion_rng, m.components, m.gyro_amplitude, m.gyro_freq_min, m.gyro_freq_max);
  }
  for (int a = 0; a < 3; ++a) {
    const double amp = a < 2 ? m.vel_amplitude : m.vel_vertical_amplitude;
    vel_profile[a] = draw_profile(motion_rng, m.components, amp, m.vel_freq_min, m.vel_freq_max);
  }

  Scene scene;
  if (spec.calib) {
    scene.calib = *spec.calib;
  } else {
    auto calib_rng = make_rng(seed, 2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double p = spec.calib_perturbation;
    auto draw_matrix = [&] {
      Mat3 scale = Mat3::Identity();
      Mat3 misalign = Mat3::Identity();
      for (int i = 0; i < 3; ++i) {
        scale(i, i) += p * u(calib_rng);
        for (int j = 0; j < 3; ++j) {
          if (i != j) misalign(i, j) += p * u(calib_rng);
        }
      }
      return Mat3(scale * misalign);
    };
    scene.calib.c_omega = draw_matrix();
    scene.calib.c_acc = draw_matrix();
    for (int i = 0; i < 3; ++i) {
      scene.calib.bias[i] = spec.gyro_bias_max * u(calib_rng);
      scene.calib.bias[i + 3] = spec.acc_bias_max * u(calib_rng);
    }
  }
  scene.calib.noise_std = spec.noise_std;
  scene.calib.validate();

  scene.true_gyro.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t_mid = (static_cast<double>(k) + 0.5) * dt;
    for (int a = 0; a < 3; ++a) scene.true_gyro[k][a] = eval_profile(gyro_profile[a], t_mid);
  }

  std::vector<Vec3> vel(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) * dt;
    for (int a = 0; a < 3; ++a) vel[k][a] = eval_profile(vel_profile[a], t);
  }

  GroundTruth& gt = scene.gt;
  gt.rot = so3::integrate_increments(Rotation::identity(), scene.true_gyro, dt);
  gt.t_ns.resize(n + 1);
  gt.pos.resize(n + 1);
  gt.gap_mask.assign(n + 1, 0);
  gt.pos[0] = Vec3::Zero();
  for (std::size_t k = 0; k <= n; ++k) {
    gt.t_ns[k] = std::llround(static_cast<double>(k) * 1e9 / spec.rate);
    if (k > 0) gt.pos[k] = gt.pos[k - 1] + 0.5 * dt * (vel[k - 1] + vel[k]);
  }

  scene.true_acc = true_acc_from_trajectory(gt.rot, vel, dt, spec.gravity);

  NoiseProcess process;
  process.rate = spec.rate;
  process.bias_walk_std = spec.bias_walk_std;
  process.noise_color = spec.noise_color;
  scene.imu = corrupt(scene.true_gyro, scene.true_acc, scene.calib, seed ^ 0x9e3779b97f4a7c15ULL,
                      process, &scene.bias);
  return scene;
}

}  // namespace gyrodenoise
