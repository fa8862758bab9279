#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gyrodenoise/dataset.hpp"
#include "gyrodenoise/gyronet.hpp"

namespace gyrodenoise {

inline constexpr double kRadToDeg = 57.295779513082320876798154814105;

struct AoeResult {
  double deg_3d = 0.0;
  double deg_yaw = 0.0;
};

/// Absolute orientation error. est is left-aligned so that est_0 = gt_0;
/// RMS over all n (n = 0 included) of |log(gt_n^T est_n)| and of the ZYX
/// yaw of gt_n^T est_n, in degrees.
AoeResult aoe(std::span<const Rotation> gt, std::span<const Rotation> est);

struct RoeSample {
  std::size_t start = 0;
  std::size_t end = 0;
  double err_3d = 0.0;   ///< rad
  double err_yaw = 0.0;  ///< rad, absolute value
  double distance = 0.0; ///< m, ground-truth path length
};

struct RoeOptions {
  std::vector<double> distances{7.0, 21.0, 35.0};
  double tolerance = 0.05;  ///< relative
  std::size_t stride = 1;   ///< start indices n = 0, stride, 2 stride, ...
};

/// Relative orientation error over fixed travelled distances. For each n,
/// g(n) is the first index whose path length from n reaches d; pairs whose
/// length exceeds d (1 + tolerance) or whose span touches a gap are skipped.
/// Throws InvalidArgument when the path is shorter than a requested distance.
std::map<double, std::vector<RoeSample>> roe(const GroundTruth& gt, std::span<const Rotation> est,
                                             const RoeOptions& options = {});

/// Linear interpolation between order statistics, p in [0, 100].
double percentile(std::vector<double> values, double p);
double median(std::vector<double> values);

struct RoeSummary {
  std::size_t count = 0;
  double median_deg = 0.0, p25_deg = 0.0, p75_deg = 0.0;
  double median_yaw_deg = 0.0, p25_yaw_deg = 0.0, p75_yaw_deg = 0.0;
};

RoeSummary summarize(const std::vector<RoeSample>& samples);

struct MetricsReport {
  std::string sequence;
  std::string method;
  AoeResult aoe;
  std::map<double, std::vector<RoeSample>> roe;

  std::map<double, RoeSummary> roe_summary() const;
};

/// Methods: "raw", "calibrated", "proposed", "zero".
enum class Method { raw, calibrated, proposed, zero };
Method parse_method(const std::string& name);
std::string to_string(Method m);

struct BaselineInputs {
  const Checkpoint* proposed = nullptr;    ///< full network
  const Checkpoint* calibrated = nullptr;  ///< zeroed-input model
  RoeOptions roe;
};

/// Orientation estimates for samples R .. M-1 of an aligned sequence, where
/// R is the receptive field of the checkpoints used (0 when none is
/// given). All methods start from gt_R.
std::vector<Rotation> estimate(Method method, const SequenceData& seq, const BaselineInputs& inputs,
                               std::size_t first);

/// Evaluation start index shared by all methods.
std::size_t evaluation_start(const BaselineInputs& inputs);

/// One report per requested method, each computed on samples R..M-1.
/// Throws InvalidArgument when a learned method lacks its checkpoint.
std::vector<MetricsReport> run_baselines(const SequenceData& seq, const std::vector<Method>& methods,
                                         const BaselineInputs& inputs);

// ---------------------------------------------------------------------------
// Report files

std::string report_to_json(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> report_from_json(const std::string& text);

/// summary.json, aoe.csv (sequence,method,aoe_3d_deg,aoe_yaw_deg) and
/// roe.csv (sequence,method,distance_m,start,end,path_m,roe_3d_deg,roe_yaw_deg).
void write_reports(const std::filesystem::path& dir, const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> read_reports(const std::filesystem::path& dir);

/// Box plot of ROE per distance bucket and method (median, quartiles,
/// 5 / 95 percentile whiskers).
std::string roe_svg(const std::vector<MetricsReport>& reports, bool yaw = false);

}  // namespace gyrodenoise
