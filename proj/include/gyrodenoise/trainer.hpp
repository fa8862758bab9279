#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gyrodenoise/config.hpp"
#include "gyrodenoise/dataset.hpp"
#include "gyrodenoise/gyronet.hpp"
#include "gyrodenoise/loss.hpp"

namespace gyrodenoise {

/// Config keys (key = value): lr0, lr_min, epochs, weight_decay, dropout,
/// beta1, beta2, adam_eps, restart_period, restart_mult, seed,
/// window_length, batch_size, val_every, augment_gyro_std,
/// augment_acc_std, augment_gyro_bias_std, huber_delta, js, zeroed_input.
struct TrainConfig {
  double lr0 = 0.01;
  double lr_min = 0.0;
  int epochs = 1800;
  double weight_decay = 0.1;
  double dropout = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int restart_period = 600;  ///< epochs
  int restart_mult = 1;
  std::uint64_t seed = 0;
  int window_length = 1792;  ///< samples per batch row, receptive field included
  int batch_size = 6;
  int val_every = 25;
  double augment_gyro_std = kDefaultAugmentGyroStd;
  double augment_acc_std = kDefaultAugmentAccStd;
  /// Constant gyro offset per batch row, rad/s (0 = off).
  double augment_gyro_bias_std = 0.0;
  double huber_delta = 0.005;
  std::vector<int> js{16, 32};
  bool zeroed_input = false;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& cfg, TrainConfig base);
  static TrainConfig from_config(const KeyValueConfig& cfg);
  /// Every field as key = value lines, readable by from_config.
  std::string dump() const;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;

  void reset(const std::vector<ModelParams::Named>& params);
};

struct AdamOptions {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One AdamW step over tensors that already hold gradients. Decay shrinks a
/// tensor by lr * weight_decay before the moment update when its
/// weight_decay flag is set. Missing gradients count as zero.
void adam_step(std::vector<ModelParams::Named>& params, AdamState& state, double lr, double weight_decay,
               const AdamOptions& options = {});

/// Cosine annealing with warm restarts; `step` counts epochs.
double cosine_warm_restarts(int step, int period0, int t_mult, double lr0, double lr_min);

// ---------------------------------------------------------------------------
// Training

/// A sequence with its supervision table, ready for windowing.
struct TrainSequence {
  std::string name;
  ImuSequence imu;
  IncrementTable table;
};

TrainSequence make_train_sequence(const SequenceData& seq, const std::vector<int>& js);

/// Per-channel mean and standard deviation of the raw IMU over all sequences.
void fit_standardization(ModelParams& params, const std::vector<TrainSequence>& seqs);

/// Window start indices for one epoch: windows of `length` samples whose
/// supervised parts (starting at column R) tile the sequence at an offset
/// that is a multiple of jmax.
std::vector<std::size_t> epoch_windows(std::size_t sequence_length, int length, int receptive_field, int jmax,
                                       std::size_t offset_step);

/// Validation loss of whole sequences in inference mode (mean over sequences).
double validation_loss(ModelParams& params, const std::vector<TrainSequence>& seqs, const LossConfig& loss,
                       bool zeroed_input);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double lr = 0.0;
};

struct FitOptions {
  std::filesystem::path output_dir;  ///< empty: nothing written
  /// Continue from output_dir/train_state.json if present.
  bool resume = false;
  /// Stop after this epoch even if config.epochs is larger (0 = no limit).
  int stop_after = 0;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  Checkpoint best;
  double best_val_loss = 0.0;
  double initial_val_loss = 0.0;  ///< validation loss before the first step
  int best_epoch = 0;
  std::vector<EpochRecord> history;  ///< epochs run by this call
};

/// Trains `model` in place. The returned checkpoint is the one with the
/// lowest validation loss (validation runs at epoch 0 and every val_every
/// epochs and after the last one); without validation data the final model is
/// returned. Throws DivergenceError on a non-finite loss. Writes, when
/// output_dir is set: metrics.csv, checkpoint.json (best), last.json,
/// train_state.json, config.txt.
FitResult fit(const std::vector<TrainSequence>& train, const std::vector<TrainSequence>& val, ModelParams& model,
              const TrainConfig& config, const FitOptions& options = {});

}  // namespace gyrodenoise
