#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gyrodenoise/tensor.hpp"
#include "gyrodenoise/types.hpp"

namespace gyrodenoise {

/// Layer table of the dilated CNN. Layer i maps channels[i] -> channels[i+1]
/// with kernels[i] taps spaced dilations[i] samples apart. Every layer but
/// the last is followed by batchnorm, GELU and dropout.
struct NetConfig {
  std::vector<int> kernels{7, 7, 7, 7, 1};
  std::vector<int> dilations{1, 4, 16, 64, 1};
  std::vector<int> channels{6, 16, 32, 64, 128, 3};
  double dropout = 0.1;
  /// Fixed factor on the network output, rad/s per unit. Keeps the first
  /// optimizer steps small relative to gyro corrections.
  double output_gain = 0.01;

  std::size_t layers() const { return kernels.size(); }

  /// Past samples (besides the current one) feeding one output of the
  /// stacked causal convolutions: sum over layers of (kernel - 1) * dilation.
  int receptive_field() const;
  /// max(kernel * dilation), the nominal window size quoted for the layer table.
  int nominal_window() const;
  void validate() const;
};

/// Conv weights/biases, batchnorm affine terms and running statistics, the
/// static gyro calibration matrix and input standardization.
struct ModelParams {
  struct Named {
    std::string name;
    ad::Tensor* tensor;
    bool weight_decay;
  };

  NetConfig config;
  std::vector<ad::Tensor> conv_w;  ///< [Cout, Cin, K]
  std::vector<ad::Tensor> conv_b;  ///< [Cout]
  std::vector<ad::Tensor> bn_gamma;
  std::vector<ad::Tensor> bn_beta;
  std::vector<ad::BatchNormStats> bn_stats;
  ad::Tensor c_omega;  ///< [3, 3], starts at identity
  std::array<double, 6> input_mean{0, 0, 0, 0, 0, 0};
  std::array<double, 6> input_std{1, 1, 1, 1, 1, 1};

  /// Uniform(+-1/sqrt(fan_in)) for hidden convolutions, zeros for the output
  /// layer, unit/zero batchnorm affine terms, identity calibration.
  static ModelParams init(const NetConfig& config, std::uint64_t seed);

  /// Fixed order: c_omega, then per layer conv weight, conv bias, bn gamma,
  /// bn beta. Weight decay is off for c_omega, the output bias and bn beta.
  std::vector<Named> trainable();
  std::size_t count() const;
  void zero_grad();
};

/// Closed-form trainable scalar count for a configuration.
struct ParamBreakdown {
  std::size_t conv = 0;
  std::size_t batchnorm = 0;
  std::size_t calibration = 9;
  std::size_t total() const { return conv + batchnorm + calibration; }
};
ParamBreakdown count_params(const NetConfig& config);
std::size_t count_params(const ModelParams& params);

struct ForwardOptions {
  bool train = false;
  /// Evaluate the network on u = 0: the correction collapses to a constant
  /// and the model to omega_hat = C omega_imu + c (static calibration).
  bool zeroed_input = false;
  std::uint64_t dropout_seed = 0;
};

/// Packs an IMU slice into a raw [1, 6, T] tensor (gyro channels first).
ad::Tensor pack_imu(const ImuSequence& imu, std::size_t begin, std::size_t count);

/// omega_hat_n = C omega_n + gain * f(u_{n-R}, ..., u_n) for n >= R,
/// R = config.receptive_field(). imu: raw [B, 6, T]; returns [B, 3, T - R].
ad::Var forward(ad::Graph& graph, ModelParams& params, const ad::Tensor& imu, const ForwardOptions& options);

/// Corrected gyro for samples R..M-1 of a sequence (inference mode).
std::vector<Vec3> corrected_gyro(ModelParams& params, const ImuSequence& imu, bool zeroed_input);

/// Open-loop integration of the corrected gyro from sample R, starting at r0.
/// Returns M - R + 1 rotations; entry k is the estimate at sample R + k.
std::vector<Rotation> integrate_corrected(ModelParams& params, const ImuSequence& imu, const Rotation& r0,
                                         double dt, bool zeroed_input);

/// The zeroed-input model omega_hat = C_hat omega_imu + offset, read back as
/// the sensor model omega_imu = C omega + b with C = C_hat^-1 and
/// b = -C_hat^-1 offset.
struct StaticCalibration {
  Mat3 c_omega = Mat3::Identity();  ///< C_hat
  Vec3 offset = Vec3::Zero();
  Mat3 sensor_matrix() const;
  Vec3 gyro_bias() const;
};
StaticCalibration static_calibration(ModelParams& params);

/// Checkpoint files are JSON with a format tag and version:
/// {"format": "gyrodenoise-checkpoint", "version": 1, "config": {...},
///  "zeroed_input": bool, "tensors": {name: {"shape": [...], "data": [...]}},
///  "bn_running": [...], "input_mean": [...], "input_std": [...], "meta": {...}}
struct Checkpoint {
  ModelParams params;
  bool zeroed_input = false;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& text);

}  // namespace gyrodenoise
