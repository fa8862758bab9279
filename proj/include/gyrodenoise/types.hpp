#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "gyrodenoise/so3.hpp"

namespace gyrodenoise {

using so3::Mat3;
using so3::Rotation;
using so3::Vec3;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Timestamped 6-channel IMU stream: gyro in rad/s, accelerometer in m/s^2.
struct ImuSequence {
  std::vector<std::int64_t> t_ns;
  std::vector<Vec3> gyro;
  std::vector<Vec3> acc;
  double nominal_rate = 200.0;

  std::size_t size() const noexcept { return t_ns.size(); }
  double dt() const noexcept { return 1.0 / nominal_rate; }

  /// Sub-range [begin, begin + count).
  ImuSequence slice(std::size_t begin, std::size_t count) const;

  /// Throws ValidationError unless timestamps strictly increase, channel
  /// lengths agree and the median period is within 5% of 1/nominal_rate.
  void validate() const;
};

/// Reference orientations (body to global), positions in meters, and a mask
/// that is true where no reference exists.
struct GroundTruth {
  std::vector<std::int64_t> t_ns;
  std::vector<Rotation> rot;
  std::vector<Vec3> pos;
  std::vector<std::uint8_t> gap_mask;

  std::size_t size() const noexcept { return t_ns.size(); }
  bool has_gap(std::size_t i) const { return !gap_mask.empty() && gap_mask[i] != 0; }
  GroundTruth slice(std::size_t begin, std::size_t count) const;
  void validate() const;
};

}  // namespace gyrodenoise
