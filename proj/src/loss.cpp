#include "gyrodenoise/loss.hpp"

#include <algorithm>
#include <string>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

bool is_power_of_two(int j) { return j >= 2 && (j & (j - 1)) == 0; }

int LossConfig::max_j() const { return js.empty() ? 0 : *std::max_element(js.begin(), js.end()); }

void LossConfig::validate() const {
  if (js.empty()) throw InvalidArgument("LossConfig: js is empty");
  for (int j : js) {
    if (!is_power_of_two(j)) throw InvalidArgument("LossConfig: j = " + std::to_string(j) + " is not a power of two");
  }
  if (!(huber_delta > 0.0)) throw InvalidArgument("LossConfig: huber_delta must be > 0");
  if (!(dt > 0.0)) throw InvalidArgument("LossConfig: dt must be > 0");
}

std::vector<Rotation> tree_products(std::span<const Rotation> increments, int j, int* stages) {
  if (!is_power_of_two(j)) throw InvalidArgument("tree_products: j = " + std::to_string(j) + " is not a power of two");
  if (increments.size() % static_cast<std::size_t>(j) != 0) {
    throw InvalidArgument("tree_products: length " + std::to_string(increments.size()) + " is not divisible by " +
                          std::to_string(j));
  }
  std::vector<Mat3> cur(increments.size());
  for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = increments[i].matrix();
  int s = 0;
  for (int width = 1; width < j; width *= 2) {
    std::vector<Mat3> next(cur.size() / 2);
    for (std::size_t i = 0; i < next.size(); ++i) next[i].noalias() = cur[2 * i] * cur[2 * i + 1];
    cur = std::move(next);
    ++s;
  }
  if (stages) *stages = s;
  std::vector<Rotation> out;
  out.reserve(cur.size());
  for (const auto& m : cur) out.push_back(Rotation::unchecked(m));
  return out;
}

ad::Var tree_products(ad::Var increments, int j) {
  if (!is_power_of_two(j)) throw InvalidArgument("tree_products: j = " + std::to_string(j) + " is not a power of two");
  if (increments.shape().at(0) % static_cast<std::size_t>(j) != 0) {
    throw InvalidArgument("tree_products: row count is not divisible by j");
  }
  for (int width = 1; width < j; width *= 2) increments = ad::pair_products(increments);
  return increments;
}

ad::Var loss_j(ad::Var products, std::span<const LossWindow> windows, int j, double huber_delta) {
  if (windows.empty()) throw InvalidArgument("loss_j: no windows");
  const std::size_t n = products.shape().at(0);
  if (n % windows.size() != 0) throw InvalidArgument("loss_j: product count is not a multiple of the window count");
  const std::size_t per = n / windows.size();
  const auto uj = static_cast<std::size_t>(j);

  std::vector<std::size_t> rows;
  std::vector<double> gt;
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const LossWindow& w = windows[b];
    if (!w.table || !w.table->has(j)) throw InvalidArgument("loss_j: increment table lacks j = " + std::to_string(j));
    if (w.first_sample % uj != 0) throw InvalidArgument("loss_j: window start is not aligned to j");
    const auto& entries = w.table->entries(j);
    const std::size_t e0 = w.first_sample / uj;
    for (std::size_t k = 0; k < per && e0 + k < entries.size(); ++k) {
      const auto& e = entries[e0 + k];
      if (!e.valid) continue;
      rows.push_back(b * per + k);
      const Mat3& m = e.delta.matrix();
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) gt.push_back(m(r, c));
    }
  }
  if (rows.empty()) throw InvalidArgument("loss_j: no valid supervision for j = " + std::to_string(j));
  const std::size_t v = rows.size();
  ad::Graph& g = *products.graph;
  ad::Var pred = ad::gather_rows(products, rows);
  ad::Var gt_var = g.constant(ad::Tensor({v, 3, 3}, std::move(gt)));
  ad::Var residual = ad::so3_log(ad::matmul3(gt_var, pred, false, true));
  return ad::scale(ad::sum(ad::huber(residual, huber_delta)), 1.0 / static_cast<double>(v));
}

ad::Var increment_loss(ad::Var omega, std::span<const LossWindow> windows, const LossConfig& config) {
  config.validate();
  const auto& s = omega.shape();
  if (s.size() != 3 || s[1] != 3) throw InvalidArgument("increment_loss: expected [B, 3, T], got " + ad::shape_str(s));
  if (s[0] != windows.size()) throw InvalidArgument("increment_loss: one window per batch row is required");
  const auto jmax = static_cast<std::size_t>(config.max_j());
  const std::size_t t = s[2] / jmax * jmax;
  if (t == 0) throw InvalidArgument("increment_loss: window shorter than the largest j");

  ad::Var w = t == s[2] ? omega : ad::slice_last(omega, 0, t);
  w = ad::reshape(ad::transpose_last2(ad::scale(w, config.dt)), {s[0] * t, 3});
  ad::Var cur = ad::so3_exp(w);

  std::vector<int> js = config.js;
  std::sort(js.begin(), js.end());
  js.erase(std::unique(js.begin(), js.end()), js.end());
  ad::Var total;
  int width = 1;
  for (int j : js) {
    while (width < j) {
      cur = ad::pair_products(cur);
      width *= 2;
    }
    ad::Var l = loss_j(cur, windows, j, config.huber_delta);
    total = total.graph ? ad::add(total, l) : l;
  }
  return total;
}

ad::Var total_loss(ad::Graph& graph, ModelParams& params, const Batch& batch, const LossConfig& config,
                   const ForwardOptions& options) {
  return increment_loss(forward(graph, params, batch.imu, options), batch.windows, config);
}

double rotation_sequence_loss(std::span<const Rotation> gt, std::span<const Rotation> est, const LossConfig& config) {
  config.validate();
  if (gt.size() != est.size()) throw InvalidArgument("rotation_sequence_loss: length mismatch");
  double total = 0.0;
  for (int j : config.js) {
    const auto uj = static_cast<std::size_t>(j);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i + uj < gt.size(); i += uj) {
      const Mat3 dg = gt[i].matrix().transpose() * gt[i + uj].matrix();
      const Mat3 de = est[i].matrix().transpose() * est[i + uj].matrix();
      const Vec3 r = so3::log_unchecked(dg * de.transpose());
      for (int c = 0; c < 3; ++c) acc += ad::huber_value(r[c], config.huber_delta);
      ++count;
    }
    if (count == 0) throw InvalidArgument("rotation_sequence_loss: sequence shorter than j");
    total += acc / static_cast<double>(count);
  }
  return total;
}

}  // namespace gyrodenoise
