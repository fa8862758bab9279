#include <gtest/gtest.h>

#include <random>

#include "gyrodenoise/error.hpp"
#include "gyrodenoise/imu_model.hpp"
#include "gyrodenoise/loss.hpp"

using namespace gyrodenoise;

namespace {

std::vector<Rotation> random_rotations(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  std::vector<Rotation> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(so3::exp(Vec3(g(rng), g(rng), g(rng))));
  return out;
}

Mat3 sequential(std::span<const Rotation> r) {
  Mat3 m = Mat3::Identity();
  for (const auto& x : r) m = m * x.matrix();
  return m;
}

GroundTruth gt_from(const std::vector<Rotation>& rots) {
  GroundTruth gt;
  for (std::size_t i = 0; i < rots.size(); ++i) {
    gt.t_ns.push_back(static_cast<std::int64_t>(i) * 5'000'000);
    gt.rot.push_back(rots[i]);
    gt.pos.push_back(Vec3::Zero());
    gt.gap_mask.push_back(0);
  }
  return gt;
}

// [1, 3, T] rates that integrate exactly to the given increments.
ad::Tensor rates_tensor(const std::vector<Vec3>& w) {
  ad::Tensor t({1, 3, w.size()});
  for (std::size_t k = 0; k < w.size(); ++k)
    for (int c = 0; c < 3; ++c) t.data[static_cast<std::size_t>(c) * w.size() + k] = w[k][c];
  return t;
}

}  // namespace

TEST(Loss, TreeMatchesSequentialProduct) {
  for (int j : {2, 4, 8, 16, 32, 64}) {
    const auto rs = random_rotations(static_cast<std::size_t>(j) * 4, static_cast<std::uint64_t>(j));
    int stages = 0;
    const auto tree = tree_products(rs, j, &stages);
    ASSERT_EQ(tree.size(), 4u);
    int expected = 0;
    for (int w = j; w > 1; w /= 2) ++expected;
    EXPECT_EQ(stages, expected);
    for (std::size_t k = 0; k < 4; ++k) {
      const Mat3 ref = sequential(std::span<const Rotation>(rs).subspan(k * static_cast<std::size_t>(j), static_cast<std::size_t>(j)));
      EXPECT_LT((tree[k].matrix() - ref).cwiseAbs().maxCoeff(), 1e-12) << j;
    }
  }
}

TEST(Loss, TreeRejectsBadInput) {
  const auto rs = random_rotations(24, 1);
  EXPECT_THROW(tree_products(rs, 12), InvalidArgument);
  EXPECT_THROW(tree_products(std::span<const Rotation>(rs).first(20), 8), InvalidArgument);
  LossConfig c;
  c.js = {16, 24};
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Loss, TapeTreeMatchesPlainTree) {
  const auto rs = random_rotations(64, 2);
  ad::Tensor t({64, 3, 3});
  for (std::size_t i = 0; i < 64; ++i)
    for (int k = 0; k < 9; ++k) t.data[9 * i + k] = rs[i].matrix()(k / 3, k % 3);
  ad::Graph g;
  const ad::Var v = tree_products(g.constant(t), 16);
  const auto plain = tree_products(rs, 16);
  for (std::size_t i = 0; i < 4; ++i)
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(v.value()[9 * i + k], plain[i].matrix()(k / 3, k % 3), 1e-14);
}

namespace {

// A single j-window whose predicted increment is dR_gt exp(-r).
double single_window_loss(const Vec3& residual) {
  const int j = 16;
  const double dt = 0.005;
  std::vector<Vec3> w(j, Vec3(0.2, -0.1, 0.05));
  std::vector<Rotation> gt_rots = so3::integrate_increments(Rotation(), w, dt);
  // ground truth ends at exp(residual) applied on the left of the final increment
  const Mat3 d = gt_rots.back().matrix();
  gt_rots.back() = Rotation::unchecked(so3::exp(residual).matrix() * d);
  const GroundTruth gt = gt_from(gt_rots);
  const IncrementTable table = build_increment_table(gt, {j});
  ad::Graph g;
  const LossWindow win{&table, 0};
  LossConfig c;
  c.js = {j};
  c.dt = dt;
  return increment_loss(g.constant(rates_tensor(w)), std::span<const LossWindow>(&win, 1), c).value()[0];
}

}  // namespace

TEST(Loss, HuberBranchesOnSingleWindow) {
  EXPECT_NEAR(single_window_loss(Vec3::Zero()), 0.0, 1e-20);
  EXPECT_NEAR(single_window_loss(Vec3(0.004, 0, 0)), 8e-6, 1e-15);
  EXPECT_NEAR(single_window_loss(Vec3(0.1, 0, 0)), 4.875e-4, 1e-13);
}

TEST(Loss, MeanOverValidWindowsSkipsGaps) {
  const double dt = 0.005;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.3);
  std::vector<Vec3> w(128);
  for (auto& v : w) v = Vec3(n(rng), n(rng), n(rng));
  const auto rots = so3::integrate_increments(Rotation(), w, dt);
  GroundTruth gt = gt_from(rots);
  IncrementTable full = build_increment_table(gt, {16, 32});
  EXPECT_EQ(full.valid_count(16), 8u);  // floor(128 / 16) with 129 poses
  gt.gap_mask[40] = 1;                   // kills 16-windows 2 and 32-window 1
  IncrementTable gapped = build_increment_table(gt, {16, 32});
  EXPECT_EQ(gapped.valid_count(16), 7u);
  EXPECT_EQ(gapped.valid_count(32), 3u);

  // corrupt the rates inside the gap: the gapped loss ignores them
  std::vector<Vec3> bad = w;
  for (std::size_t k = 32; k < 48; ++k) bad[k] += Vec3(0.5, 0.5, 0.5);
  ad::Graph g;
  const LossWindow win{&gapped, 0};
  LossConfig c;
  c.dt = dt;
  const double with_bad = increment_loss(g.constant(rates_tensor(bad)), std::span<const LossWindow>(&win, 1), c).value()[0];
  EXPECT_NEAR(with_bad, 0.0, 1e-20);

  const LossWindow win_full{&full, 0};
  EXPECT_GT(increment_loss(g.constant(rates_tensor(bad)), std::span<const LossWindow>(&win_full, 1), c).value()[0], 1e-4);
}

TEST(Loss, SupervisionRate) {
  // one term every j samples: 200 / 16 = 12.5 Hz and 200 / 32 = 6.25 Hz
  std::vector<Vec3> w(2000, Vec3(0.1, 0, 0));
  const GroundTruth gt = gt_from(so3::integrate_increments(Rotation(), w, 0.005));
  const IncrementTable t = build_increment_table(gt, {16, 32});
  EXPECT_EQ(t.valid_count(16), 125u);
  EXPECT_EQ(t.valid_count(32), 62u);
}

TEST(Loss, LeftInvariance) {
  const auto gt = so3::integrate_increments(Rotation(), std::vector<Vec3>(320, Vec3(0.3, -0.2, 0.5)), 0.005);
  auto est = gt;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 0.01);
  for (auto& r : est) r = r * so3::exp(Vec3(n(rng), n(rng), n(rng)));
  const LossConfig c;
  const double base = rotation_sequence_loss(gt, est, c);
  EXPECT_GT(base, 0.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Rotation q = random_rotations(1, 100 + s, 2.0)[0];
    std::vector<Rotation> gq, eq;
    for (const auto& r : gt) gq.push_back(q * r);
    for (const auto& r : est) eq.push_back(q * r);
    EXPECT_LT(std::abs(rotation_sequence_loss(gq, eq, c) - base), 1e-12);
  }
}

TEST(Loss, InitialNetworkEqualsRawIncrementLoss) {
  SyntheticScene spec;
  spec.duration = 10.0;
  const Scene scene = generate_scene(spec, 5);
  GroundTruth gt = scene.gt.slice(0, scene.imu.size());
  const IncrementTable table = build_increment_table(gt, {16, 32});
  ModelParams p = ModelParams::init(NetConfig{}, 6);
  const std::size_t r = 510, first = 512, t = 1792;
  Batch b;
  b.imu = pack_imu(scene.imu, first - r, t);
  b.windows = {{&table, first}};
  ad::Graph g;
  LossConfig c;
  const double net = total_loss(g, p, b, c).value()[0];

  std::vector<Vec3> raw(scene.imu.gyro.begin() + first, scene.imu.gyro.begin() + first + (t - r));
  ad::Graph g2;
  const double direct = increment_loss(g2.constant(rates_tensor(raw)), b.windows, c).value()[0];
  EXPECT_EQ(net, direct);
  EXPECT_GT(net, 0.0);
}

TEST(Loss, RejectsMisalignedOrEmpty) {
  std::vector<Vec3> w(64, Vec3::Zero());
  const GroundTruth gt = gt_from(so3::integrate_increments(Rotation(), w, 0.005));
  const IncrementTable table = build_increment_table(gt, {16, 32});
  ad::Graph g;
  const LossConfig c;
  const LossWindow off{&table, 8};
  EXPECT_THROW(increment_loss(g.constant(rates_tensor(w)), std::span<const LossWindow>(&off, 1), c), InvalidArgument);
  const LossWindow past{&table, 640};
  EXPECT_THROW(increment_loss(g.constant(rates_tensor(w)), std::span<const LossWindow>(&past, 1), c), InvalidArgument);
}
