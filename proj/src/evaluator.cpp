#include "gyrodenoise/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

using nlohmann::json;

AoeResult aoe(std::span<const Rotation> gt, std::span<const Rotation> est) {
  if (gt.size() != est.size()) {
    throw InvalidArgument("aoe: length mismatch (" + std::to_string(gt.size()) + " vs " + std::to_string(est.size()) +
                          ")");
  }
  if (gt.size() < 2) throw InvalidArgument("aoe: need at least 2 samples");
  const Mat3 align = gt[0].matrix() * est[0].matrix().transpose();
  double s3 = 0.0, sy = 0.0;
  for (std::size_t n = 0; n < gt.size(); ++n) {
    const Mat3 e = gt[n].matrix().transpose() * align * est[n].matrix();
    s3 += so3::log_unchecked(e).squaredNorm();
    const double y = so3::yaw(e);
    sy += y * y;
  }
  const double m = static_cast<double>(gt.size());
  return {std::sqrt(s3 / m) * kRadToDeg, std::sqrt(sy / m) * kRadToDeg};
}

std::map<double, std::vector<RoeSample>> roe(const GroundTruth& gt, std::span<const Rotation> est,
                                             const RoeOptions& options) {
  const std::size_t n = gt.size();
  if (est.size() != n) throw InvalidArgument("roe: estimate and ground truth lengths differ");
  if (gt.pos.size() != n) throw InvalidArgument("roe: ground truth lacks positions");
  if (options.stride == 0) throw InvalidArgument("roe: stride must be >= 1");
  std::vector<double> path(n, 0.0);
  for (std::size_t k = 1; k < n; ++k) path[k] = path[k - 1] + (gt.pos[k] - gt.pos[k - 1]).norm();
  std::vector<std::size_t> gaps(n + 1, 0);
  for (std::size_t k = 0; k < n; ++k) gaps[k + 1] = gaps[k] + (gt.has_gap(k) ? 1 : 0);

  std::map<double, std::vector<RoeSample>> out;
  for (double d : options.distances) {
    if (!(d > 0.0)) throw InvalidArgument("roe: distances must be > 0");
    if (n == 0 || path.back() < d) {
      throw InvalidArgument("roe: path length " + std::to_string(n ? path.back() : 0.0) + " m is shorter than " +
                            std::to_string(d) + " m");
    }
    auto& bucket = out[d];
    std::size_t g = 0;
    for (std::size_t s = 0; s < n; s += options.stride) {
      g = std::max(g, s);
      while (g < n && path[g] - path[s] < d) ++g;
      if (g >= n) break;
      const double len = path[g] - path[s];
      if (len > d * (1.0 + options.tolerance)) continue;
      if (gaps[g + 1] - gaps[s] != 0) continue;
      const Mat3 dg = gt.rot[s].matrix().transpose() * gt.rot[g].matrix();
      const Mat3 de = est[s].matrix().transpose() * est[g].matrix();
      const Mat3 e = dg.transpose() * de;
      bucket.push_back({s, g, so3::log_unchecked(e).norm(), std::abs(so3::yaw(e)), len});
    }
  }
  return out;
}

double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw InvalidArgument("percentile: empty input");
  if (!(p >= 0.0 && p <= 100.0)) throw InvalidArgument("percentile: p must be in [0, 100]");
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return v[lo] + f * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return percentile(std::move(v), 50.0); }

RoeSummary summarize(const std::vector<RoeSample>& samples) {
  RoeSummary s;
  s.count = samples.size();
  if (samples.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.median_deg = s.p25_deg = s.p75_deg = s.median_yaw_deg = s.p25_yaw_deg = s.p75_yaw_deg = nan;
    return s;
  }
  std::vector<double> e3, ey;
  for (const auto& r : samples) {
    e3.push_back(r.err_3d * kRadToDeg);
    ey.push_back(r.err_yaw * kRadToDeg);
  }
  s.median_deg = percentile(e3, 50.0);
  s.p25_deg = percentile(e3, 25.0);
  s.p75_deg = percentile(e3, 75.0);
  s.median_yaw_deg = percentile(ey, 50.0);
  s.p25_yaw_deg = percentile(ey, 25.0);
  s.p75_yaw_deg = percentile(ey, 75.0);
  return s;
}

std::map<double, RoeSummary> MetricsReport::roe_summary() const {
  std::map<double, RoeSummary> out;
  for (const auto& [d, samples] : roe) out[d] = summarize(samples);
  return out;
}

Method parse_method(const std::string& name) {
  if (name == "raw") return Method::raw;
  if (name == "calibrated") return Method::calibrated;
  if (name == "proposed") return Method::proposed;
  if (name == "zero") return Method::zero;
  throw InvalidArgument("unknown method '" + name + "' (expected raw, calibrated, proposed or zero)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::raw: return "raw";
    case Method::calibrated: return "calibrated";
    case Method::proposed: return "proposed";
    case Method::zero: return "zero";
  }
  return "?";
}

std::size_t evaluation_start(const BaselineInputs& inputs) {
  std::size_t r = 0;
  if (inputs.proposed) r = std::max(r, static_cast<std::size_t>(inputs.proposed->params.config.receptive_field()));
  if (inputs.calibrated) r = std::max(r, static_cast<std::size_t>(inputs.calibrated->params.config.receptive_field()));
  return r;
}

namespace {

std::vector<Rotation> run_model(const Checkpoint& ck, bool zeroed, const SequenceData& seq, std::size_t first) {
  ModelParams params = ck.params;
  const auto r = static_cast<std::size_t>(params.config.receptive_field());
  if (first < r) throw InvalidArgument("estimate: evaluation starts before the receptive field is filled");
  const auto w = corrected_gyro(params, seq.imu, zeroed);
  const std::size_t m = seq.imu.size();
  std::span<const Vec3> used(w.data() + (first - r), m - 1 - first);
  return so3::integrate_increments(seq.gt.rot[first], used, seq.imu.dt());
}

}  // namespace

std::vector<Rotation> estimate(Method method, const SequenceData& seq, const BaselineInputs& inputs,
                               std::size_t first) {
  const std::size_t m = seq.imu.size();
  if (seq.gt.size() != m) throw InvalidArgument("estimate: ground truth is not aligned to the IMU");
  if (first + 2 > m) throw InvalidArgument("estimate: sequence too short");
  switch (method) {
    case Method::raw: {
      std::span<const Vec3> w(seq.imu.gyro.data() + first, m - 1 - first);
      return so3::integrate_increments(seq.gt.rot[first], w, seq.imu.dt());
    }
    case Method::zero:
      return std::vector<Rotation>(m - first, seq.gt.rot[first]);
    case Method::calibrated:
      if (!inputs.calibrated) throw InvalidArgument("calibrated method needs a calibration checkpoint");
      return run_model(*inputs.calibrated, true, seq, first);
    case Method::proposed:
      if (!inputs.proposed) throw InvalidArgument("proposed method needs a trained checkpoint");
      return run_model(*inputs.proposed, false, seq, first);
  }
  throw InvalidArgument("estimate: unknown method");
}

std::vector<MetricsReport> run_baselines(const SequenceData& seq, const std::vector<Method>& methods,
                                         const BaselineInputs& inputs) {
  const std::size_t first = evaluation_start(inputs);
  const std::size_t m = seq.imu.size();
  if (first + 2 > m) throw InvalidArgument("run_baselines: sequence " + seq.name + " is too short");
  const GroundTruth gt = seq.gt.slice(first, m - first);

  double path = 0.0;
  for (std::size_t k = 1; k < gt.size(); ++k) path += (gt.pos[k] - gt.pos[k - 1]).norm();
  RoeOptions ro = inputs.roe;
  std::vector<double> skipped;
  ro.distances.clear();
  for (double d : inputs.roe.distances) (d <= path ? ro.distances : skipped).push_back(d);

  std::vector<MetricsReport> out;
  for (Method method : methods) {
    const auto est = estimate(method, seq, inputs, first);
    MetricsReport r;
    r.sequence = seq.name;
    r.method = to_string(method);
    r.aoe = aoe(gt.rot, est);
    if (!ro.distances.empty()) r.roe = roe(gt, est, ro);
    for (double d : skipped) r.roe[d];
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json report_json(const MetricsReport& r) {
  json j;
  j["sequence"] = r.sequence;
  j["method"] = r.method;
  j["aoe_3d_deg"] = r.aoe.deg_3d;
  j["aoe_yaw_deg"] = r.aoe.deg_yaw;
  json buckets = json::array();
  for (const auto& [d, samples] : r.roe) {
    json rows = json::array();
    for (const auto& s : samples) rows.push_back({s.start, s.end, s.err_3d, s.err_yaw, s.distance});
    buckets.push_back({{"distance_m", d}, {"samples", rows}});
  }
  j["roe"] = buckets;
  return j;
}

MetricsReport report_parse(const json& j) {
  MetricsReport r;
  r.sequence = j.at("sequence").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.aoe.deg_3d = j.at("aoe_3d_deg").get<double>();
  r.aoe.deg_yaw = j.at("aoe_yaw_deg").get<double>();
  for (const auto& b : j.at("roe")) {
    auto& bucket = r.roe[b.at("distance_m").get<double>()];
    for (const auto& s : b.at("samples")) {
      bucket.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<double>(),
                        s.at(3).get<double>(), s.at(4).get<double>()});
    }
  }
  return r;
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << s;
}

json summary_json(const std::vector<MetricsReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) {
    json j{{"sequence", r.sequence}, {"method", r.method}, {"aoe_3d_deg", r.aoe.deg_3d},
           {"aoe_yaw_deg", r.aoe.deg_yaw}};
    json roe_j = json::array();
    for (const auto& [d, s] : r.roe_summary()) {
      auto finite = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
      roe_j.push_back({{"distance_m", d},
                       {"count", s.count},
                       {"median_deg", finite(s.median_deg)},
                       {"p25_deg", finite(s.p25_deg)},
                       {"p75_deg", finite(s.p75_deg)},
                       {"median_yaw_deg", finite(s.median_yaw_deg)},
                       {"p25_yaw_deg", finite(s.p25_yaw_deg)},
                       {"p75_yaw_deg", finite(s.p75_yaw_deg)}});
    }
    j["roe"] = roe_j;
    arr.push_back(j);
  }
  return arr;
}

}  // namespace

std::string report_to_json(const std::vector<MetricsReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  return arr.dump();
}

std::vector<MetricsReport> report_from_json(const std::string& text) {
  try {
    const json arr = json::parse(text);
    std::vector<MetricsReport> out;
    for (const auto& j : arr) out.push_back(report_parse(j));
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  }
}

void write_reports(const std::filesystem::path& dir, const std::vector<MetricsReport>& reports) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.json", report_to_json(reports));
  write_file(dir / "summary.json", summary_json(reports).dump(2) + "\n");
  std::string aoe_csv = "sequence,method,aoe_3d_deg,aoe_yaw_deg\n";
  std::string roe_csv = "sequence,method,distance_m,start,end,path_m,roe_3d_deg,roe_yaw_deg\n";
  for (const auto& r : reports) {
    aoe_csv += r.sequence + "," + r.method + "," + num(r.aoe.deg_3d) + "," + num(r.aoe.deg_yaw) + "\n";
    for (const auto& [d, samples] : r.roe) {
      for (const auto& s : samples) {
        roe_csv += r.sequence + "," + r.method + "," + num(d) + "," + std::to_string(s.start) + "," +
                   std::to_string(s.end) + "," + num(s.distance) + "," + num(s.err_3d * kRadToDeg) + "," +
                   num(s.err_yaw * kRadToDeg) + "\n";
      }
    }
  }
  write_file(dir / "aoe.csv", aoe_csv);
  write_file(dir / "roe.csv", roe_csv);
}

std::vector<MetricsReport> read_reports(const std::filesystem::path& dir) {
  std::ifstream in(dir / "report.json", std::ios::binary);
  if (!in) throw ValidationError("cannot read " + (dir / "report.json").string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

std::string roe_svg(const std::vector<MetricsReport>& reports, bool yaw) {
  // Pool samples per (distance, method), methods in first-seen order.
  std::vector<std::string> methods;
  std::map<double, std::map<std::string, std::vector<double>>> pooled;
  for (const auto& r : reports) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    for (const auto& [d, samples] : r.roe) {
      auto& v = pooled[d][r.method];
      for (const auto& s : samples) v.push_back((yaw ? s.err_yaw : s.err_3d) * kRadToDeg);
    }
  }
  const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#7f7f7f", "#9467bd", "#8c564b"};
  double ymax = 0.0;
  for (const auto& [d, by] : pooled)
    for (const auto& [m, v] : by)
      if (!v.empty()) ymax = std::max(ymax, percentile(v, 95.0));
  if (ymax <= 0.0) ymax = 1.0;

  const double left = 60, top = 20, plot_h = 300, box_w = 18, gap = 40;
  const double group_w = static_cast<double>(methods.size()) * (box_w + 6) + gap;
  const double width = left + static_cast<double>(pooled.size()) * group_w + 20 + 120;
  const double height = top + plot_h + 50;
  auto y = [&](double v) { return top + plot_h * (1.0 - std::min(v, ymax) / ymax); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    o << "<text x=\"" << left - 5 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << num(std::round(v * 100) / 100)
      << "</text>\n";
  }
  o << "<text x=\"15\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(-90 15 " << top + plot_h / 2
    << ")\" text-anchor=\"middle\">" << (yaw ? "yaw ROE (deg)" : "ROE (deg)") << "</text>\n";
  double x0 = left + gap / 2;
  for (const auto& [d, by] : pooled) {
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const auto it = by.find(methods[mi]);
      if (it == by.end() || it->second.empty()) continue;
      const auto& v = it->second;
      const double cx = x0 + static_cast<double>(mi) * (box_w + 6) + box_w / 2;
      const double p5 = percentile(v, 5), p25 = percentile(v, 25), p50 = percentile(v, 50), p75 = percentile(v, 75),
                   p95 = percentile(v, 95);
      const char* c = colors[mi % 6];
      o << "<line x1=\"" << cx << "\" y1=\"" << y(p5) << "\" x2=\"" << cx << "\" y2=\"" << y(p95) << "\" stroke=\"" << c
        << "\"/>\n";
      o << "<rect x=\"" << cx - box_w / 2 << "\" y=\"" << y(p75) << "\" width=\"" << box_w << "\" height=\""
        << std::max(0.5, y(p25) - y(p75)) << "\" fill=\"white\" stroke=\"" << c << "\"/>\n";
      o << "<line x1=\"" << cx - box_w / 2 << "\" y1=\"" << y(p50) << "\" x2=\"" << cx + box_w / 2 << "\" y2=\"" << y(p50)
        << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    }
    o << "<text x=\"" << x0 + (group_w - gap) / 2 << "\" y=\"" << top + plot_h + 18 << "\" text-anchor=\"middle\">"
      << num(d) << " m</text>\n";
    x0 += group_w;
  }
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const double ly = top + 14 * static_cast<double>(mi) + 5;
    o << "<rect x=\"" << x0 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << colors[mi % 6]
      << "\"/><text x=\"" << x0 + 14 << "\" y=\"" << ly + 9 << "\">" << methods[mi] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace gyrodenoise
