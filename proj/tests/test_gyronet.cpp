#include <gtest/gtest.h>

#include <random>

#include "gyrodenoise/error.hpp"
#include "gyrodenoise/gyronet.hpp"
#include "gyrodenoise/imu_model.hpp"

using namespace gyrodenoise;

namespace {

ImuSequence random_imu(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.5), a(0.0, 3.0);
  ImuSequence imu;
  for (std::size_t k = 0; k < n; ++k) {
    imu.t_ns.push_back(static_cast<std::int64_t>(k) * 5'000'000);
    imu.gyro.emplace_back(g(rng), g(rng), g(rng));
    imu.acc.emplace_back(a(rng), a(rng), a(rng) + 9.81);
  }
  return imu;
}

void randomize(ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& named : p.trainable())
    for (auto& v : named.tensor->data) v += n(rng);
}

}  // namespace

TEST(GyroNet, DefaultParameterCount) {
  const NetConfig cfg;
  const ParamBreakdown b = count_params(cfg);
  EXPECT_EQ(b.conv, 76563u);
  EXPECT_EQ(b.batchnorm, 480u);
  EXPECT_EQ(b.calibration, 9u);
  EXPECT_EQ(b.total(), 77052u);
  // independent count over the instantiated tensors
  ModelParams p = ModelParams::init(cfg, 0);
  std::size_t n = 0;
  for (auto& named : p.trainable()) n += named.tensor->numel();
  EXPECT_EQ(n, 77052u);
  EXPECT_EQ(count_params(p), 77052u);
}

TEST(GyroNet, ReceptiveField) {
  const NetConfig cfg;
  EXPECT_EQ(cfg.receptive_field(), 6 * 1 + 6 * 4 + 6 * 16 + 6 * 64);
  EXPECT_EQ(cfg.nominal_window(), 448);
}

TEST(GyroNet, ConfigValidation) {
  NetConfig cfg;
  cfg.channels.front() = 5;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = NetConfig{};
  cfg.dilations.pop_back();
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg = NetConfig{};
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(GyroNet, InitialModelPassesGyroThrough) {
  ModelParams p = ModelParams::init(NetConfig{}, 1);
  const ImuSequence imu = random_imu(700, 2);
  const auto w = corrected_gyro(p, imu, false);
  const std::size_t r = 510;
  ASSERT_EQ(w.size(), 700 - r);
  for (std::size_t k = 0; k < w.size(); ++k) EXPECT_EQ(w[k], imu.gyro[r + k]);
}

TEST(GyroNet, OutputShapeAndShortInput) {
  ModelParams p = ModelParams::init(NetConfig{}, 1);
  ad::Graph g;
  ad::Tensor x({2, 6, 600});
  EXPECT_EQ(forward(g, p, x, {}).shape(), (ad::Shape{2, 3, 90}));
  ad::Tensor tiny({1, 6, 510});
  EXPECT_THROW(forward(g, p, tiny, {}), InvalidArgument);
  ad::Tensor wrong({1, 5, 600});
  EXPECT_THROW(forward(g, p, wrong, {}), InvalidArgument);
}

TEST(GyroNet, ReceptiveFieldProbe) {
  // perturbing input sample s changes exactly the outputs whose window
  // [n - R, n] contains s
  ModelParams p = ModelParams::init(NetConfig{}, 3);
  randomize(p, 4);
  ImuSequence imu = random_imu(1200, 5);
  const auto base = corrected_gyro(p, imu, false);
  const std::size_t s = 700, r = 510;
  imu.acc[s][0] += 1.0;
  const auto moved = corrected_gyro(p, imu, false);
  for (std::size_t k = 0; k < base.size(); ++k) {
    const std::size_t n = r + k;
    const bool inside = n >= s && n - r <= s;
    if (inside) EXPECT_NE(base[k], moved[k]) << n;
    else EXPECT_EQ(base[k], moved[k]) << n;
  }
}

TEST(GyroNet, ZeroedInputIsStaticCalibration) {
  ModelParams p = ModelParams::init(NetConfig{}, 6);
  randomize(p, 7);
  p.input_mean = {0.1, -0.1, 0.0, 0.2, 0.1, 9.8};
  p.input_std = {0.5, 0.5, 0.5, 3.0, 3.0, 3.0};
  const ImuSequence imu = random_imu(900, 8);
  const auto w = corrected_gyro(p, imu, true);
  const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> c(p.c_omega.data.data());
  const Vec3 offset = w[0] - c * imu.gyro[510];
  for (std::size_t k = 0; k < w.size(); ++k) {
    EXPECT_LT((w[k] - (c * imu.gyro[510 + k] + offset)).norm(), 1e-12);
  }
  // the offset does not depend on the IMU data
  const auto w2 = corrected_gyro(p, random_imu(900, 9), true);
  const Vec3 offset2 = w2[3] - c * random_imu(900, 9).gyro[513];
  EXPECT_LT((offset - offset2).norm(), 1e-12);
}

TEST(GyroNet, StaticCalibrationInvertsTheSensorModel) {
  ModelParams p = ModelParams::init(NetConfig{}, 6);
  randomize(p, 10);
  const ImuSequence imu = random_imu(700, 11);
  const StaticCalibration s = static_calibration(p);
  const auto w = corrected_gyro(p, imu, true);
  for (std::size_t k = 0; k < w.size(); k += 37) {
    EXPECT_LT((w[k] - (s.c_omega * imu.gyro[510 + k] + s.offset)).norm(), 1e-12);
    // feeding the sensor model's measurement of w[k] recovers w[k]
    const Vec3 measured = s.sensor_matrix() * w[k] + s.gyro_bias();
    EXPECT_LT((measured - imu.gyro[510 + k]).norm(), 1e-12);
  }
}

TEST(GyroNet, ParameterGradientsReachEveryTensor) {
  ModelParams p = ModelParams::init(NetConfig{}, 10);
  randomize(p, 11);
  ad::Graph g;
  const ad::Tensor x = pack_imu(random_imu(600, 12), 0, 600);
  ForwardOptions o;
  o.train = true;
  const ad::Var y = forward(g, p, x, o);
  g.backward(ad::sum(ad::mul(y, y)));
  for (auto& named : p.trainable()) {
    double norm = 0.0;
    for (double v : named.tensor->grad) norm += v * v;
    EXPECT_GT(norm, 0.0) << named.name;
  }
}

TEST(GyroNet, DecayFlags) {
  ModelParams p = ModelParams::init(NetConfig{}, 0);
  for (const auto& n : p.trainable()) {
    const bool exempt = n.name == "c_omega" || n.name == "conv5.bias" || n.name.find(".beta") != std::string::npos;
    EXPECT_EQ(n.weight_decay, !exempt) << n.name;
  }
}

TEST(GyroNet, CheckpointRoundTripIsExact) {
  Checkpoint ck;
  ck.params = ModelParams::init(NetConfig{}, 13);
  randomize(ck.params, 14);
  ck.params.bn_stats[1].mean[3] = 0.1 + 1e-17;
  ck.params.input_std[4] = 1.0 / 3.0;
  ck.zeroed_input = true;
  ck.meta["epoch"] = "12";
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.zeroed_input, true);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.params.input_std, ck.params.input_std);
  EXPECT_EQ(back.params.bn_stats[1].mean, ck.params.bn_stats[1].mean);
  auto a = ck.params;
  auto b = back.params;
  auto ta = a.trainable(), tb = b.trainable();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].tensor->data, tb[i].tensor->data) << ta[i].name;
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(GyroNet, CheckpointRejectsGarbage) {
  EXPECT_THROW(parse_checkpoint("not json"), ParseError);
  EXPECT_THROW(parse_checkpoint("{\"format\":\"other\"}"), ParseError);
  Checkpoint ck;
  ck.params = ModelParams::init(NetConfig{}, 0);
  std::string s = serialize_checkpoint(ck);
  s.replace(s.find("\"version\":1"), 11, "\"version\":7");
  EXPECT_THROW(parse_checkpoint(s), ParseError);
}
