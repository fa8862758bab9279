#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gyrodenoise/types.hpp"

namespace gyrodenoise {

/// Intrinsic IMU model u = C [omega; a] + b + eta, with the gyro and
/// accelerometer blocks of C kept separate (no g-sensitivity block).
struct CalibParams {
  Mat3 c_omega = Mat3::Identity();
  Mat3 c_acc = Mat3::Identity();
  Vec6 bias = Vec6::Zero();       ///< rad/s x3, m/s^2 x3
  Vec6 noise_std = Vec6::Zero();  ///< same units

  Vec3 gyro_bias() const { return bias.head<3>(); }
  Vec3 acc_bias() const { return bias.tail<3>(); }

  /// Both matrices invertible and within 20% of identity elementwise;
  /// noise_std >= 0. Throws InvalidArgument otherwise.
  void validate() const;
};

/// Noise and bias dynamics applied on top of CalibParams.
struct NoiseProcess {
  double rate = 200.0;                ///< Hz, sets timestamps and the walk step
  Vec6 bias_walk_std = Vec6::Zero();  ///< per sqrt(s)
  /// First-order low-pass pole for eta: eta_k = c eta_{k-1} + sqrt(1 - c^2) w_k.
  /// 0 gives white noise; the marginal std stays noise_std for any c in [0, 1).
  double noise_color = 0.0;
};

/// Sum-of-sinusoids motion. Amplitudes of zero give a static scene.
struct MotionSpec {
  int components = 4;
  double gyro_amplitude = 0.8;  ///< rad/s, per axis
  double gyro_freq_min = 0.05;  ///< Hz
  double gyro_freq_max = 0.6;
  double vel_amplitude = 1.5;  ///< m/s, horizontal axes
  double vel_vertical_amplitude = 0.3;
  double vel_freq_min = 0.02;
  double vel_freq_max = 0.25;

  bool is_static() const { return gyro_amplitude == 0.0 && vel_amplitude == 0.0 && vel_vertical_amplitude == 0.0; }
};

struct SyntheticScene {
  double duration = 60.0;  ///< s
  double rate = 200.0;     ///< Hz
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);
  MotionSpec motion;

  /// Injected calibration. When empty, one is drawn from the seed using the
  /// bounds below.
  std::optional<CalibParams> calib;
  double calib_perturbation = 0.03;  ///< max |C - I| per entry for drawn calibrations
  double gyro_bias_max = 0.02;       ///< rad/s per axis
  double acc_bias_max = 0.1;         ///< m/s^2 per axis
  Vec6 noise_std = (Vec6() << 2e-3, 2e-3, 2e-3, 2e-2, 2e-2, 2e-2).finished();

  Vec6 bias_walk_std = Vec6::Zero();
  double noise_color = 0.0;

  /// duration * rate, throws InvalidArgument if it is not an integer or rate <= 0.
  std::size_t sample_count() const;
  void validate() const;
};

struct Scene {
  GroundTruth gt;  ///< sample_count() + 1 entries, R_{k+1} = R_k exp(true_gyro_k dt)
  ImuSequence imu;
  CalibParams calib;
  std::vector<Vec3> true_gyro;
  std::vector<Vec3> true_acc;
  std::vector<Vec6> bias;  ///< realized bias per sample (constant unless walking)
};

/// Applies the measurement model. Deterministic in `seed`.
ImuSequence corrupt(std::span<const Vec3> true_gyro, std::span<const Vec3> true_acc,
                    const CalibParams& calib, std::uint64_t seed,
                    const NoiseProcess& process = {}, std::vector<Vec6>* realized_bias = nullptr);

/// Specific force in the body frame, a_k = R_k^T ((v_{k+1} - v_k) / dt - g),
/// for k = 0..n-2 given n rotations and velocities.
std::vector<Vec3> true_acc_from_trajectory(std::span<const Rotation> rotations,
                                           std::span<const Vec3> velocities, double dt,
                                           const Vec3& gravity);

Scene generate_scene(const SyntheticScene& spec, std::uint64_t seed);

}  // namespace gyrodenoise
