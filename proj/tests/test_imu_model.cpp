#include <gtest/gtest.h>

#include <Eigen/LU>
#include <cmath>

#include "gyrodenoise/error.hpp"
#include "gyrodenoise/imu_model.hpp"

using namespace gyrodenoise;

TEST(ImuModel, NoiseFreeIdentityIsTruth) {
  std::vector<Vec3> g(50, Vec3(0.1, 0.2, 0.3)), a(50, Vec3(0.0, 0.0, 9.81));
  CalibParams c;
  const ImuSequence imu = corrupt(g, a, c, 1);
  for (std::size_t k = 0; k < 50; ++k) {
    EXPECT_EQ(imu.gyro[k], g[k]);
    EXPECT_EQ(imu.acc[k], a[k]);
  }
  EXPECT_EQ(imu.t_ns[10], 50'000'000);
}

TEST(ImuModel, MeasurementModelAffine) {
  std::vector<Vec3> g(4, Vec3(0.1, -0.2, 0.3)), a(4, Vec3(1.0, 2.0, 3.0));
  CalibParams c;
  c.c_omega << 1.01, 0.02, 0.0, -0.01, 0.99, 0.03, 0.0, 0.01, 1.02;
  c.bias << 0.01, -0.02, 0.005, 0.1, 0.0, -0.1;
  const ImuSequence imu = corrupt(g, a, c, 2);
  EXPECT_LT((imu.gyro[2] - (c.c_omega * g[2] + c.gyro_bias())).norm(), 1e-15);
  EXPECT_LT((imu.acc[2] - (a[2] + c.acc_bias())).norm(), 1e-15);
}

TEST(ImuModel, CorruptRejectsLengthMismatch) {
  std::vector<Vec3> g(4), a(3);
  EXPECT_THROW(corrupt(g, a, CalibParams{}, 1), InvalidArgument);
}

TEST(ImuModel, CalibValidation) {
  CalibParams c;
  c.c_omega(0, 1) = 0.3;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = CalibParams{};
  c.noise_std[0] = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ImuModel, NoiseStatistics) {
  const std::size_t n = 200000;
  std::vector<Vec3> g(n, Vec3::Zero()), a(n, Vec3::Zero());
  CalibParams c;
  c.noise_std << 0.002, 0.002, 0.002, 0.02, 0.02, 0.02;
  for (double color : {0.0, 0.9}) {
    NoiseProcess p;
    p.noise_color = color;
    const ImuSequence imu = corrupt(g, a, c, 3, p);
    double s = 0.0, lag = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      s += imu.gyro[k].x() * imu.gyro[k].x();
      if (k) lag += imu.gyro[k].x() * imu.gyro[k - 1].x();
    }
    EXPECT_NEAR(std::sqrt(s / n), 0.002, 0.002 * 0.03) << color;
    EXPECT_NEAR(lag / s, color, 0.02) << color;
  }
}

TEST(ImuModel, BiasWalkGrowsLikeSqrtTime) {
  const std::size_t n = 2000;
  std::vector<Vec3> g(n, Vec3::Zero()), a(n, Vec3::Zero());
  NoiseProcess p;
  p.bias_walk_std << 0.01, 0.01, 0.01, 0, 0, 0;
  double sq = 0.0;
  const int runs = 200;
  for (int r = 0; r < runs; ++r) {
    std::vector<Vec6> bias;
    corrupt(g, a, CalibParams{}, 100 + r, p, &bias);
    sq += bias.back().head<3>().squaredNorm() / 3.0;
    EXPECT_EQ(bias.front().head<3>(), Vec3::Zero());
  }
  // variance after (n - 1) steps of dt = 1/200
  const double expected = 0.01 * 0.01 * static_cast<double>(n - 1) / 200.0;
  EXPECT_NEAR(sq / runs, expected, 0.15 * expected);
}

TEST(ImuModel, SceneKinematicsConsistent) {
  SyntheticScene spec;
  spec.duration = 5.0;
  spec.noise_std.setZero();
  CalibParams c;
  spec.calib = c;
  const Scene s = generate_scene(spec, 4);
  ASSERT_EQ(s.imu.size(), 1000u);
  ASSERT_EQ(s.gt.size(), 1001u);
  // rotations follow the true gyro exactly
  for (std::size_t k = 0; k < 1000; k += 97) {
    const Mat3 step = s.gt.rot[k].matrix().transpose() * s.gt.rot[k + 1].matrix();
    EXPECT_LT((so3::log(Rotation::unchecked(step)) / 0.005 - s.true_gyro[k]).norm(), 1e-9);
  }
  // with no noise or calibration the IMU is the truth
  EXPECT_EQ(s.imu.gyro[10], s.true_gyro[10]);
  // specific force at rest orientation includes gravity reaction
  double mean_norm = 0.0;
  for (const auto& a : s.true_acc) mean_norm += a.norm();
  EXPECT_NEAR(mean_norm / 1000.0, 9.81, 1.0);
}

TEST(ImuModel, StaticSceneMeasuresGravity) {
  SyntheticScene spec;
  spec.duration = 1.0;
  spec.motion.gyro_amplitude = 0.0;
  spec.motion.vel_amplitude = 0.0;
  spec.motion.vel_vertical_amplitude = 0.0;
  spec.noise_std.setZero();
  spec.calib = CalibParams{};
  const Scene s = generate_scene(spec, 5);
  for (const auto& a : s.true_acc) EXPECT_LT((a - Vec3(0, 0, 9.81)).norm(), 1e-12);
  for (const auto& r : s.gt.rot) EXPECT_EQ(r.matrix(), Mat3::Identity());
}

TEST(ImuModel, DrawnCalibrationWithinBounds) {
  SyntheticScene spec;
  spec.duration = 1.0;
  spec.calib_perturbation = 0.025;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(spec, seed);
    const Mat3 d = s.calib.c_omega - Mat3::Identity();
    EXPECT_LT(d.cwiseAbs().maxCoeff(), 0.05 + 1e-3);
    EXPECT_LE(s.calib.gyro_bias().cwiseAbs().maxCoeff(), 0.02);
  }
}

TEST(ImuModel, Deterministic) {
  SyntheticScene spec;
  spec.duration = 2.0;
  spec.bias_walk_std << 1e-3, 1e-3, 1e-3, 0, 0, 0;
  spec.noise_color = 0.5;
  const Scene a = generate_scene(spec, 11), b = generate_scene(spec, 11), c = generate_scene(spec, 12);
  for (std::size_t k = 0; k < a.imu.size(); ++k) {
    EXPECT_EQ(a.imu.gyro[k], b.imu.gyro[k]);
    EXPECT_EQ(a.imu.acc[k], b.imu.acc[k]);
  }
  EXPECT_NE(a.imu.gyro[5], c.imu.gyro[5]);
}

TEST(ImuModel, SceneValidation) {
  SyntheticScene spec;
  spec.rate = 0.0;
  EXPECT_THROW(generate_scene(spec, 1), InvalidArgument);
  spec = SyntheticScene{};
  spec.duration = 0.0025;
  EXPECT_THROW(generate_scene(spec, 1), InvalidArgument);
  spec = SyntheticScene{};
  spec.noise_color = 1.0;
  EXPECT_THROW(generate_scene(spec, 1), InvalidArgument);
}
