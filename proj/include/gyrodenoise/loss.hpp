#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gyrodenoise/dataset.hpp"
#include "gyrodenoise/gyronet.hpp"
#include "gyrodenoise/tensor.hpp"

namespace gyrodenoise {

struct LossConfig {
  std::vector<int> js{16, 32};
  double huber_delta = 0.005;
  double dt = 1.0 / 200.0;

  int max_j() const;
  /// Every j a power of two >= 2, delta > 0, dt > 0.
  void validate() const;
};

bool is_power_of_two(int j);

/// Products of consecutive groups of j rotations, computed as log2(j) rounds
/// of pairwise neighbor products. Entry k is r[kj] r[kj+1] ... r[kj+j-1].
std::vector<Rotation> tree_products(std::span<const Rotation> increments, int j, int* stages = nullptr);

/// Same reduction on the tape: [N, 3, 3] -> [N / j, 3, 3].
ad::Var tree_products(ad::Var increments, int j);

/// One supervised window of a batch. Predicted increment k of the window
/// drives sample first_sample + k to first_sample + k + 1; first_sample must
/// be a multiple of every j so the window lines up with the table entries.
struct LossWindow {
  const IncrementTable* table = nullptr;
  std::size_t first_sample = 0;
};

/// L_j: mean over valid windows of sum_xyz huber(log(dR_gt dR_hat^T)).
/// `products` holds predicted j-step increments [B * K, 3, 3], K per window.
ad::Var loss_j(ad::Var products, std::span<const LossWindow> windows, int j, double huber_delta);

/// Sum of L_j over config.js for predicted rates omega: [B, 3, T]. Increments
/// exp(omega dt) are reduced once; trailing samples that do not fill a
/// max(js) group are dropped.
ad::Var increment_loss(ad::Var omega, std::span<const LossWindow> windows, const LossConfig& config);

struct Batch {
  ad::Tensor imu;  ///< raw [B, 6, T]
  /// One per batch row; first_sample is the global index of IMU column
  /// R = receptive_field() of that row.
  std::vector<LossWindow> windows;
};

/// Network forward followed by increment_loss.
ad::Var total_loss(ad::Graph& graph, ModelParams& params, const Batch& batch, const LossConfig& config,
                   const ForwardOptions& options = {});

/// Loss between two orientation sequences of equal length: increments of
/// each are compared at i = 0, j, 2j, ... for every j in config.js.
double rotation_sequence_loss(std::span<const Rotation> gt, std::span<const Rotation> est,
                              const LossConfig& config);

}  // namespace gyrodenoise
