#include "gyrodenoise/dataset.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

// ---------------------------------------------------------------------------
// ImuSequence / GroundTruth

ImuSequence ImuSequence::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw InvalidArgument("ImuSequence::slice out of range");
  ImuSequence out;
  out.nominal_rate = nominal_rate;
  out.t_ns.assign(t_ns.begin() + begin, t_ns.begin() + begin + count);
  out.gyro.assign(gyro.begin() + begin, gyro.begin() + begin + count);
  out.acc.assign(acc.begin() + begin, acc.begin() + begin + count);
  return out;
}

void ImuSequence::validate() const {
  if (gyro.size() != t_ns.size() || acc.size() != t_ns.size()) {
    throw ValidationError("IMU channel lengths differ from timestamp count");
  }
  if (!(nominal_rate > 0.0)) throw ValidationError("IMU nominal rate must be > 0");
  for (std::size_t k = 1; k < t_ns.size(); ++k) {
    if (t_ns[k] <= t_ns[k - 1]) {
      throw ValidationError("IMU timestamps not strictly increasing at sample " + std::to_string(k));
    }
  }
  if (t_ns.size() < 3) return;
  std::vector<std::int64_t> d(t_ns.size() - 1);
  for (std::size_t k = 1; k < t_ns.size(); ++k) d[k - 1] = t_ns[k] - t_ns[k - 1];
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  const double median = static_cast<double>(d[d.size() / 2]) * 1e-9;
  const double expected = 1.0 / nominal_rate;
  if (std::abs(median - expected) > 0.05 * expected) {
    throw ValidationError("IMU median period " + std::to_string(median) +
                          " s is not within 5% of 1/nominal_rate");
  }
}

GroundTruth GroundTruth::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw InvalidArgument("GroundTruth::slice out of range");
  GroundTruth out;
  out.t_ns.assign(t_ns.begin() + begin, t_ns.begin() + begin + count);
  out.rot.assign(rot.begin() + begin, rot.begin() + begin + count);
  out.pos.assign(pos.begin() + begin, pos.begin() + begin + count);
  if (!gap_mask.empty()) out.gap_mask.assign(gap_mask.begin() + begin, gap_mask.begin() + begin + count);
  return out;
}

void GroundTruth::validate() const {
  if (rot.size() != t_ns.size() || pos.size() != t_ns.size() ||
      (!gap_mask.empty() && gap_mask.size() != t_ns.size())) {
    throw ValidationError("ground-truth field lengths differ");
  }
  for (std::size_t k = 1; k < t_ns.size(); ++k) {
    if (t_ns[k] <= t_ns[k - 1]) {
      throw ValidationError("ground-truth timestamps not strictly increasing at row " + std::to_string(k));
    }
  }
  for (std::size_t k = 0; k < rot.size(); ++k) {
    if (rot[k].orthonormality_error() > 1e-6) {
      throw ValidationError("ground-truth rotation " + std::to_string(k) + " is not orthonormal");
    }
  }
}

// ---------------------------------------------------------------------------
// Formats

DatasetFormat parse_format(const std::string& name) {
  if (name == "euroc") return DatasetFormat::euroc;
  if (name == "tumvi") return DatasetFormat::tumvi;
  if (name == "synth") return DatasetFormat::synth;
  throw InvalidArgument("unknown dataset format '" + name + "' (expected euroc, tumvi or synth)");
}

std::string to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::euroc: return "euroc";
    case DatasetFormat::tumvi: return "tumvi";
    case DatasetFormat::synth: return "synth";
  }
  return "synth";
}

namespace {

struct CsvRows {
  std::vector<std::vector<double>> rows;
  std::vector<std::int64_t> stamps;
  std::vector<std::size_t> lines;
};

/// Reads numeric rows. The first column is an integer nanosecond stamp.
CsvRows read_numeric_csv(const std::filesystem::path& path, std::size_t min_cols,
                         std::size_t max_cols, bool require_header) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  CsvRows out;
  std::string line;
  std::size_t lineno = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      seen_header = true;
      continue;
    }
    if (out.rows.empty() && !seen_header && !(std::isdigit(static_cast<unsigned char>(t[0])) || t[0] == '-')) {
      seen_header = true;  // textual header line
      continue;
    }
    if (require_header && !seen_header) throw ParseError(path.string() + ": missing header line", lineno);

    std::vector<std::string> cells;
    {
      std::string cell;
      std::istringstream ss(t);
      while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    }
    if (cells.size() < min_cols || cells.size() > max_cols) {
      throw ParseError(path.string() + ": expected " + std::to_string(min_cols) + " columns, got " +
                           std::to_string(cells.size()),
                       lineno);
    }
    std::int64_t stamp = 0;
    {
      const auto& c = cells[0];
      auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), stamp);
      if (ec != std::errc() || p != c.data() + c.size()) {
        throw ParseError(path.string() + ": bad timestamp '" + c + "'", lineno);
      }
    }
    std::vector<double> vals(min_cols - 1);
    for (std::size_t i = 1; i < min_cols; ++i) {
      const auto& c = cells[i];
      double v = 0.0;
      auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || p != c.data() + c.size()) {
        throw ParseError(path.string() + ": bad number '" + c + "'", lineno);
      }
      if (!std::isfinite(v)) throw ParseError(path.string() + ": non-finite value in row", lineno);
      vals[i - 1] = v;
    }
    out.rows.push_back(std::move(vals));
    out.stamps.push_back(stamp);
    out.lines.push_back(lineno);
  }
  return out;
}

void check_monotonic(const CsvRows& rows, const std::filesystem::path& path) {
  for (std::size_t k = 1; k < rows.stamps.size(); ++k) {
    if (rows.stamps[k] <= rows.stamps[k - 1]) {
      throw ValidationError(path.string() + ": timestamps not strictly increasing at line " +
                            std::to_string(rows.lines[k]));
    }
  }
}

std::size_t max_columns(DatasetFormat f, std::size_t base) {
  return f == DatasetFormat::synth ? base : 64;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ImuSequence load_imu_csv(const std::filesystem::path& path, DatasetFormat format, double nominal_rate) {
  const auto rows = read_numeric_csv(path, 7, max_columns(format, 7), format == DatasetFormat::synth);
  check_monotonic(rows, path);
  ImuSequence imu;
  imu.nominal_rate = nominal_rate;
  imu.t_ns = rows.stamps;
  imu.gyro.reserve(rows.rows.size());
  imu.acc.reserve(rows.rows.size());
  for (const auto& r : rows.rows) {
    imu.gyro.emplace_back(r[0], r[1], r[2]);
    imu.acc.emplace_back(r[3], r[4], r[5]);
  }
  return imu;
}

GroundTruth load_gt_csv(const std::filesystem::path& path, DatasetFormat format) {
  const auto rows = read_numeric_csv(path, 8, max_columns(format, 8), format == DatasetFormat::synth);
  check_monotonic(rows, path);
  GroundTruth gt;
  gt.t_ns = rows.stamps;
  gt.rot.reserve(rows.rows.size());
  gt.pos.reserve(rows.rows.size());
  for (std::size_t k = 0; k < rows.rows.size(); ++k) {
    const auto& r = rows.rows[k];
    gt.pos.emplace_back(r[0], r[1], r[2]);
    Eigen::Quaterniond q(r[3], r[4], r[5], r[6]);
    const double n = q.norm();
    if (!(n > 0.5 && n < 1.5)) throw ParseError(path.string() + ": quaternion far from unit norm", rows.lines[k]);
    q.normalize();
    gt.rot.push_back(Rotation::from_matrix(q.toRotationMatrix(), 1e-9));
  }
  gt.gap_mask.assign(gt.t_ns.size(), 0);
  return gt;
}

std::pair<ImuSequence, GroundTruth> load_sequence(const std::filesystem::path& imu_path,
                                                  const std::filesystem::path& gt_path,
                                                  DatasetFormat format, double nominal_rate) {
  ImuSequence imu = load_imu_csv(imu_path, format, nominal_rate);
  GroundTruth gt = load_gt_csv(gt_path, format);
  imu.validate();
  gt.validate();
  return {std::move(imu), std::move(gt)};
}

void write_imu_csv(const std::filesystem::path& path, const ImuSequence& imu) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "t_ns,gx,gy,gz,ax,ay,az\n";
  for (std::size_t k = 0; k < imu.size(); ++k) {
    out << imu.t_ns[k];
    for (int i = 0; i < 3; ++i) out << ',' << fmt17(imu.gyro[k][i]);
    for (int i = 0; i < 3; ++i) out << ',' << fmt17(imu.acc[k][i]);
    out << '\n';
  }
}

void write_gt_csv(const std::filesystem::path& path, const GroundTruth& gt) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "t_ns,px,py,pz,qw,qx,qy,qz\n";
  for (std::size_t k = 0; k < gt.size(); ++k) {
    Eigen::Quaterniond q(gt.rot[k].matrix());
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    out << gt.t_ns[k];
    for (int i = 0; i < 3; ++i) out << ',' << fmt17(gt.pos[k][i]);
    out << ',' << fmt17(q.w()) << ',' << fmt17(q.x()) << ',' << fmt17(q.y()) << ',' << fmt17(q.z()) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Alignment

GroundTruth align_ground_truth(const ImuSequence& imu, const GroundTruth& gt, const AlignOptions& options) {
  if (gt.size() == 0 || imu.size() == 0) throw ValidationError("align_ground_truth: empty input");
  std::vector<std::int64_t> gt_t(gt.t_ns);
  for (auto& t : gt_t) t += options.time_offset_ns;
  if (gt_t.back() < imu.t_ns.front() || gt_t.front() > imu.t_ns.back()) {
    throw ValidationError("align_ground_truth: IMU and ground-truth time ranges do not overlap");
  }

  double gap_threshold = 0.0;
  if (gt.size() > 2) {
    std::vector<std::int64_t> d(gt.size() - 1);
    for (std::size_t k = 1; k < gt.size(); ++k) d[k - 1] = gt_t[k] - gt_t[k - 1];
    std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
    gap_threshold = options.gap_factor * static_cast<double>(d[d.size() / 2]);
  }

  GroundTruth out;
  const std::size_t n = imu.size();
  out.t_ns = imu.t_ns;
  out.rot.resize(n);
  out.pos.resize(n);
  out.gap_mask.assign(n, 0);

  std::size_t a = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::int64_t t = imu.t_ns[k];
    if (t < gt_t.front()) {
      out.rot[k] = gt.rot.front();
      out.pos[k] = gt.pos.front();
      out.gap_mask[k] = 1;
      continue;
    }
    if (t > gt_t.back()) {
      out.rot[k] = gt.rot.back();
      out.pos[k] = gt.pos.back();
      out.gap_mask[k] = 1;
      continue;
    }
    while (a + 1 < gt_t.size() && gt_t[a + 1] <= t) ++a;
    if (gt_t[a] == t) {
      out.rot[k] = gt.rot[a];
      out.pos[k] = gt.pos[a];
      out.gap_mask[k] = gt.has_gap(a);
      continue;
    }
    const std::size_t b = a + 1;
    const double span = static_cast<double>(gt_t[b] - gt_t[a]);
    const double tau = static_cast<double>(t - gt_t[a]) / span;
    out.rot[k] = so3::interpolate(gt.rot[a], gt.rot[b], tau);
    out.pos[k] = (1.0 - tau) * gt.pos[a] + tau * gt.pos[b];
    const bool gap = (gap_threshold > 0.0 && span > gap_threshold) || gt.has_gap(a) || gt.has_gap(b);
    out.gap_mask[k] = gap ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Increment table

const std::vector<IncrementTable::Entry>& IncrementTable::entries(int j) const {
  auto it = table_.find(j);
  if (it == table_.end()) throw InvalidArgument("IncrementTable: no entries for j = " + std::to_string(j));
  return it->second;
}

std::size_t IncrementTable::valid_count(int j) const {
  const auto& e = entries(j);
  return static_cast<std::size_t>(std::count_if(e.begin(), e.end(), [](const Entry& x) { return x.valid; }));
}

std::vector<int> IncrementTable::js() const {
  std::vector<int> out;
  for (const auto& [j, e] : table_) out.push_back(j);
  return out;
}

IncrementTable build_increment_table(const GroundTruth& gt, const std::vector<int>& js) {
  IncrementTable table;
  const std::size_t n = gt.size();
  // prefix count of gap samples for O(1) window queries
  std::vector<std::size_t> gaps(n + 1, 0);
  for (std::size_t k = 0; k < n; ++k) gaps[k + 1] = gaps[k] + (gt.has_gap(k) ? 1 : 0);

  for (int j : js) {
    if (j < 1) throw InvalidArgument("build_increment_table: j must be >= 1");
    auto& entries = table.raw()[j];
    const std::size_t uj = static_cast<std::size_t>(j);
    for (std::size_t i = 0; i + uj < n; i += uj) {
      IncrementTable::Entry e;
      e.valid = gaps[i + uj + 1] - gaps[i] == 0;
      if (e.valid) e.delta = gt.rot[i].inverse() * gt.rot[i + uj];
      entries.push_back(e);
    }
  }
  return table;
}

ImuSequence augment(const ImuSequence& imu, double gyro_std, double acc_std, std::uint64_t seed) {
  if (gyro_std < 0.0 || acc_std < 0.0) throw InvalidArgument("augment: noise std must be >= 0");
  ImuSequence out = imu;
  if (gyro_std == 0.0 && acc_std == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (int i = 0; i < 3; ++i) out.gyro[k][i] += gyro_std * normal(rng);
    for (int i = 0; i < 3; ++i) out.acc[k][i] += acc_std * normal(rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

SequenceRef parse_ref(const std::string& item, SplitRole role) {
  SequenceRef ref;
  ref.role = role;
  const auto at = item.find('@');
  ref.name = trim(item.substr(0, at));
  if (ref.name.empty()) throw ParseError("split: empty sequence name in '" + item + "'");
  if (at == std::string::npos) return ref;
  const std::string range = item.substr(at + 1);
  const auto colon = range.find(':');
  if (colon == std::string::npos) throw ParseError("split: expected name@start:end in '" + item + "'");
  const std::string a = trim(range.substr(0, colon));
  const std::string b = trim(range.substr(colon + 1));
  try {
    ref.start_s = a.empty() ? 0.0 : std::stod(a);
    if (!b.empty() && b != "end") ref.end_s = std::stod(b);
  } catch (const std::exception&) {
    throw ParseError("split: bad time window in '" + item + "'");
  }
  if (ref.start_s < 0.0 || (ref.end_s && *ref.end_s <= ref.start_s)) {
    throw ParseError("split: empty or negative window in '" + item + "'");
  }
  return ref;
}

}  // namespace

SplitSpec SplitSpec::from_config(const KeyValueConfig& cfg) {
  SplitSpec s;
  s.format = parse_format(cfg.get_string("format", "synth"));
  s.root = cfg.get_string("root", ".");
  s.rate = cfg.get_double("rate", 200.0);
  s.time_offset_ns = cfg.get_int("time_offset_ns", 0);
  const std::pair<const char*, SplitRole> roles[] = {
      {"train", SplitRole::train}, {"val", SplitRole::val}, {"test", SplitRole::test}};
  for (const auto& [key, role] : roles) {
    for (const auto& item : split_list(cfg.get_string(key, ""))) s.sequences.push_back(parse_ref(item, role));
  }
  s.validate();
  return s;
}

std::vector<SequenceRef> SplitSpec::with_role(SplitRole role) const {
  std::vector<SequenceRef> out;
  for (const auto& r : sequences) {
    if (r.role == role) out.push_back(r);
  }
  return out;
}

void SplitSpec::validate() const {
  constexpr double kInf = 1e300;
  for (std::size_t a = 0; a < sequences.size(); ++a) {
    for (std::size_t b = a + 1; b < sequences.size(); ++b) {
      const auto& x = sequences[a];
      const auto& y = sequences[b];
      if (x.name != y.name || x.role == y.role) continue;
      const double x1 = x.end_s.value_or(kInf), y1 = y.end_s.value_or(kInf);
      if (x.start_s < y1 && y.start_s < x1) {
        throw ValidationError("split: sequence '" + x.name + "' has overlapping windows in different roles");
      }
    }
  }
}

std::pair<std::filesystem::path, std::filesystem::path> sequence_paths(const std::filesystem::path& root,
                                                                       const std::string& name,
                                                                       DatasetFormat format) {
  const auto dir = root / name;
  switch (format) {
    case DatasetFormat::euroc:
      return {dir / "mav0" / "imu0" / "data.csv", dir / "mav0" / "state_groundtruth_estimate0" / "data.csv"};
    case DatasetFormat::tumvi:
      return {dir / "mav0" / "imu0" / "data.csv", dir / "mav0" / "mocap0" / "data.csv"};
    case DatasetFormat::synth:
      break;
  }
  return {dir / "imu.csv", dir / "gt.csv"};
}

SequenceData window_sequence(const SequenceData& seq, double start_s, std::optional<double> end_s) {
  if (seq.imu.size() == 0) return seq;
  const std::int64_t t0 = seq.imu.t_ns.front();
  const auto lo_ns = t0 + static_cast<std::int64_t>(std::llround(start_s * 1e9));
  const auto hi_ns = end_s ? t0 + static_cast<std::int64_t>(std::llround(*end_s * 1e9))
                           : std::numeric_limits<std::int64_t>::max();
  const auto& t = seq.imu.t_ns;
  const std::size_t begin = static_cast<std::size_t>(std::lower_bound(t.begin(), t.end(), lo_ns) - t.begin());
  const std::size_t end = static_cast<std::size_t>(std::lower_bound(t.begin(), t.end(), hi_ns) - t.begin());
  if (begin >= end) throw ValidationError("window [" + std::to_string(start_s) + ", ...) of '" + seq.name + "' is empty");
  SequenceData out;
  out.name = seq.name;
  out.imu = seq.imu.slice(begin, end - begin);
  out.gt = seq.gt.slice(begin, end - begin);
  return out;
}

SequenceData load_split_sequence(const SplitSpec& split, const SequenceRef& ref) {
  const auto [imu_path, gt_path] = sequence_paths(split.root, ref.name, split.format);
  auto [imu, gt] = load_sequence(imu_path, gt_path, split.format, split.rate);
  SequenceData seq;
  seq.name = ref.name;
  AlignOptions opts;
  opts.time_offset_ns = split.time_offset_ns;
  seq.gt = align_ground_truth(imu, gt, opts);
  seq.imu = std::move(imu);
  if (ref.start_s == 0.0 && !ref.end_s) return seq;
  return window_sequence(seq, ref.start_s, ref.end_s);
}

}  // namespace gyrodenoise
