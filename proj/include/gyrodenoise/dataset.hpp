#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gyrodenoise/config.hpp"
#include "gyrodenoise/types.hpp"

namespace gyrodenoise {

enum class DatasetFormat { euroc, tumvi, synth };

DatasetFormat parse_format(const std::string& name);
std::string to_string(DatasetFormat f);

/// 0.01 deg/s in rad/s.
inline constexpr double kDefaultAugmentGyroStd = 0.01 * std::numbers::pi / 180.0;
inline constexpr double kDefaultAugmentAccStd = 0.0;

// ---------------------------------------------------------------------------
// CSV I/O
//
// IMU rows:          t_ns, gx, gy, gz, ax, ay, az        (rad/s, m/s^2)
// Ground-truth rows: t_ns, px, py, pz, qw, qx, qy, qz    (m, unit quaternion)
//
// synth files carry exactly these columns after a header line. EuRoC and
// TUM-VI files use the same leading columns, '#'-prefixed headers, and may
// carry trailing columns (velocities, biases) which are ignored.

ImuSequence load_imu_csv(const std::filesystem::path& path, DatasetFormat format,
                         double nominal_rate = 200.0);
GroundTruth load_gt_csv(const std::filesystem::path& path, DatasetFormat format);

/// Loads both files and validates them. Ground truth is returned as stored
/// (not resampled); see align_ground_truth.
std::pair<ImuSequence, GroundTruth> load_sequence(const std::filesystem::path& imu_path,
                                                  const std::filesystem::path& gt_path,
                                                  DatasetFormat format, double nominal_rate = 200.0);

void write_imu_csv(const std::filesystem::path& path, const ImuSequence& imu);
void write_gt_csv(const std::filesystem::path& path, const GroundTruth& gt);

// ---------------------------------------------------------------------------
// Alignment and supervision

struct AlignOptions {
  std::int64_t time_offset_ns = 0;  ///< added to ground-truth timestamps before resampling
  /// A step between consecutive ground-truth samples longer than this many
  /// median periods is treated as a gap.
  double gap_factor = 3.0;
};

/// Resamples ground truth onto the IMU clock by geodesic rotation and linear
/// position interpolation. IMU samples inside a ground-truth gap or outside
/// its time span are flagged in gap_mask. Throws ValidationError when the
/// time ranges do not overlap.
GroundTruth align_ground_truth(const ImuSequence& imu, const GroundTruth& gt,
                               const AlignOptions& options = {});

/// Ground-truth increments delta R_{i,i+j} = R_i^T R_{i+j} at i = 0, j, 2j, ...
class IncrementTable {
 public:
  struct Entry {
    bool valid = false;
    Rotation delta;
  };

  const std::vector<Entry>& entries(int j) const;
  bool has(int j) const { return table_.count(j) != 0; }
  std::size_t valid_count(int j) const;
  std::vector<int> js() const;

  std::map<int, std::vector<Entry>>& raw() { return table_; }

 private:
  std::map<int, std::vector<Entry>> table_;
};

/// Entry k covers samples [k j, k j + j]; it is omitted (valid = false) when
/// any of those samples is flagged as a gap.
IncrementTable build_increment_table(const GroundTruth& gt, const std::vector<int>& js);

/// Adds fresh i.i.d. Gaussian noise to every channel.
ImuSequence augment(const ImuSequence& imu, double gyro_std, double acc_std, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits

enum class SplitRole { train, val, test };

struct SequenceRef {
  std::string name;
  SplitRole role = SplitRole::train;
  double start_s = 0.0;              ///< relative to the first IMU sample
  std::optional<double> end_s;       ///< empty: until the end
};

/// Config keys: format, root, rate, time_offset_ns, train, val, test. The role
/// keys take comma-separated `name[@start:end]` items, seconds, with an empty
/// or `end` bound meaning the end of the sequence.
struct SplitSpec {
  DatasetFormat format = DatasetFormat::synth;
  std::filesystem::path root;
  double rate = 200.0;
  std::int64_t time_offset_ns = 0;
  std::vector<SequenceRef> sequences;

  static SplitSpec from_config(const KeyValueConfig& cfg);
  std::vector<SequenceRef> with_role(SplitRole role) const;

  /// Throws ValidationError when two windows of the same sequence with
  /// different roles overlap.
  void validate() const;
};

std::pair<std::filesystem::path, std::filesystem::path> sequence_paths(
    const std::filesystem::path& root, const std::string& name, DatasetFormat format);

/// A loaded, aligned and windowed sequence ready for training or evaluation.
struct SequenceData {
  std::string name;
  ImuSequence imu;
  GroundTruth gt;  ///< aligned: gt.size() == imu.size()
};

SequenceData load_split_sequence(const SplitSpec& split, const SequenceRef& ref);

/// Cuts [start_s, end_s) out of an aligned sequence.
SequenceData window_sequence(const SequenceData& seq, double start_s, std::optional<double> end_s);

}  // namespace gyrodenoise
