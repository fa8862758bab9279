// gyrodenoise command-line tool: synth, calibrate, train, integrate,
// evaluate, report.
//
// Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gyrodenoise/config.hpp"
#include "gyrodenoise/dataset.hpp"
#include "gyrodenoise/error.hpp"
#include "gyrodenoise/evaluator.hpp"
#include "gyrodenoise/gyronet.hpp"
#include "gyrodenoise/imu_model.hpp"
#include "gyrodenoise/trainer.hpp"

namespace fs = std::filesystem;
using namespace gyrodenoise;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::set<std::string> kSplitKeys{"format", "root", "rate", "time_offset_ns", "train", "val", "test"};
const std::set<std::string> kTrainKeys{
    "lr0",           "lr_min",           "epochs",          "weight_decay",          "dropout",
    "beta1",         "beta2",            "adam_eps",        "restart_period",        "restart_mult",
    "seed",          "window_length",    "batch_size",      "val_every",             "augment_gyro_std",
    "augment_acc_std", "augment_gyro_bias_std", "huber_delta", "js",                 "zeroed_input"};
const std::set<std::string> kSynthKeys{"duration",       "rate",           "seed",          "components",
                                       "gyro_amplitude", "gyro_freq_min",  "gyro_freq_max", "vel_amplitude",
                                       "vel_vertical_amplitude", "vel_freq_min", "vel_freq_max",
                                       "calib_perturbation", "gyro_bias_max", "acc_bias_max", "gyro_noise",
                                       "acc_noise",      "gyro_bias_walk", "acc_bias_walk", "noise_color",
                                       "calib_from"};

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_short(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", x);
  return buf;
}

/// Relative output paths live under $GYRODENOISE_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  fs::path out(p);
  if (const char* root = std::getenv("GYRODENOISE_OUTPUT_ROOT"); root && *root && out.is_relative()) {
    out = fs::path(root) / out;
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Config file layers: --config, then --split (split keys only), then
/// --set key=value, then dedicated flags (applied by the caller).
struct ConfigSources {
  std::string config;
  std::string split;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigSources& src, bool with_split) {
  cmd->add_option("--config", src.config, "key = value config file")->check(CLI::ExistingFile);
  if (with_split) cmd->add_option("--split", src.split, "dataset split file")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.sets, "override one config key (key=value), repeatable");
}

KeyValueConfig load_layers(const ConfigSources& src, const std::set<std::string>& known) {
  KeyValueConfig cfg;
  auto merge = [&](const fs::path& path) {
    const KeyValueConfig layer = KeyValueConfig::load(path);
    for (const auto& [k, v] : layer.entries()) {
      // a relative data root is taken relative to the file that names it
      if (k == "root" && fs::path(v).is_relative()) {
        cfg.set(k, fs::weakly_canonical(fs::absolute(path).parent_path() / v).string());
      } else {
        cfg.set(k, v);
      }
    }
  };
  if (!src.config.empty()) merge(src.config);
  if (!src.split.empty()) merge(src.split);
  for (const auto& s : src.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  cfg.require_known(known);
  return cfg;
}

std::set<std::string> join(std::set<std::string> a, const std::set<std::string>& b) {
  a.insert(b.begin(), b.end());
  return a;
}

template <typename T>
void override_key(KeyValueConfig& cfg, const std::string& key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_floating_point_v<T>) {
    cfg.set(key, fmt(*v));
  } else if constexpr (std::is_same_v<T, std::string>) {
    cfg.set(key, *v);
  } else {
    cfg.set(key, std::to_string(*v));
  }
}

// ---------------------------------------------------------------------------
// synth

json mat_json(const Mat3& m) {
  json j = json::array();
  for (int r = 0; r < 3; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return j;
}

Mat3 mat_from(const json& j) {
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

template <int N>
json vec_json(const Eigen::Matrix<double, N, 1>& v) {
  json j = json::array();
  for (int i = 0; i < N; ++i) j.push_back(v[i]);
  return j;
}

CalibParams calib_from_manifest(const fs::path& p) {
  try {
    const json j = json::parse(read_text(p)).at("calib");
    CalibParams c;
    c.c_omega = mat_from(j.at("c_omega"));
    c.c_acc = mat_from(j.at("c_acc"));
    for (int i = 0; i < 6; ++i) {
      c.bias[i] = j.at("bias").at(i).get<double>();
      c.noise_std[i] = j.at("noise_std").at(i).get<double>();
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(p.string() + ": malformed manifest: " + e.what());
  }
}

SyntheticScene scene_from_config(const KeyValueConfig& cfg) {
  SyntheticScene s;
  s.duration = cfg.get_double("duration", s.duration);
  s.rate = cfg.get_double("rate", s.rate);
  auto& m = s.motion;
  m.components = static_cast<int>(cfg.get_int("components", m.components));
  m.gyro_amplitude = cfg.get_double("gyro_amplitude", m.gyro_amplitude);
  m.gyro_freq_min = cfg.get_double("gyro_freq_min", m.gyro_freq_min);
  m.gyro_freq_max = cfg.get_double("gyro_freq_max", m.gyro_freq_max);
  m.vel_amplitude = cfg.get_double("vel_amplitude", m.vel_amplitude);
  m.vel_vertical_amplitude = cfg.get_double("vel_vertical_amplitude", m.vel_vertical_amplitude);
  m.vel_freq_min = cfg.get_double("vel_freq_min", m.vel_freq_min);
  m.vel_freq_max = cfg.get_double("vel_freq_max", m.vel_freq_max);
  s.calib_perturbation = cfg.get_double("calib_perturbation", s.calib_perturbation);
  s.gyro_bias_max = cfg.get_double("gyro_bias_max", s.gyro_bias_max);
  s.acc_bias_max = cfg.get_double("acc_bias_max", s.acc_bias_max);
  const double gn = cfg.get_double("gyro_noise", s.noise_std[0]);
  const double an = cfg.get_double("acc_noise", s.noise_std[3]);
  s.noise_std << gn, gn, gn, an, an, an;
  const double gw = cfg.get_double("gyro_bias_walk", 0.0);
  const double aw = cfg.get_double("acc_bias_walk", 0.0);
  s.bias_walk_std << gw, gw, gw, aw, aw, aw;
  s.noise_color = cfg.get_double("noise_color", 0.0);
  if (const auto from = cfg.get("calib_from")) {
    CalibParams c = calib_from_manifest(*from);
    c.noise_std = s.noise_std;
    s.calib = c;
  }
  s.validate();
  return s;
}

int cmd_synth(const ConfigSources& src, std::optional<double> duration, std::optional<double> rate,
              std::optional<long long> seed, std::optional<std::string> calib_from, const std::string& out_arg) {
  KeyValueConfig cfg = load_layers(src, kSynthKeys);
  override_key(cfg, "duration", duration);
  override_key(cfg, "rate", rate);
  override_key(cfg, "seed", seed);
  if (calib_from) cfg.set("calib_from", fs::absolute(*calib_from).string());
  if (!cfg.has("seed")) throw UsageError("synth: --seed is required");
  const auto s = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  const SyntheticScene spec = scene_from_config(cfg);
  const Scene scene = generate_scene(spec, s);

  const fs::path out = output_path(out_arg);
  fs::create_directories(out);
  write_imu_csv(out / "imu.csv", scene.imu);
  write_gt_csv(out / "gt.csv", scene.gt);

  Vec6 mean_bias = Vec6::Zero();
  for (const auto& b : scene.bias) mean_bias += b;
  mean_bias /= static_cast<double>(scene.bias.size());
  json m;
  m["seed"] = s;
  m["duration"] = spec.duration;
  m["rate"] = spec.rate;
  m["samples"] = scene.imu.size();
  m["calib"] = {{"c_omega", mat_json(scene.calib.c_omega)},
                {"c_acc", mat_json(scene.calib.c_acc)},
                {"bias", vec_json<6>(scene.calib.bias)},
                {"noise_std", vec_json<6>(scene.calib.noise_std)}};
  m["bias_walk_std"] = vec_json<6>(spec.bias_walk_std);
  m["noise_color"] = spec.noise_color;
  m["mean_realized_bias"] = vec_json<6>(mean_bias);
  write_text(out / "manifest.json", m.dump(2) + "\n");
  write_text(out / "config.txt", cfg.dump());
  std::cout << "wrote " << scene.imu.size() << " IMU samples to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// calibrate / train

std::vector<SequenceData> load_role(const SplitSpec& split, SplitRole role) {
  std::vector<SequenceData> out;
  for (const auto& ref : split.with_role(role)) out.push_back(load_split_sequence(split, ref));
  return out;
}

struct TrainFlags {
  std::optional<long long> seed, epochs, val_every, stop_after;
  std::optional<double> lr0;
  bool resume = false;
  bool quiet = false;
  std::string out;
};

int cmd_fit(const ConfigSources& src, const TrainFlags& f, bool zeroed) {
  KeyValueConfig cfg = load_layers(src, join(kSplitKeys, kTrainKeys));
  override_key(cfg, "seed", f.seed);
  override_key(cfg, "epochs", f.epochs);
  override_key(cfg, "val_every", f.val_every);
  override_key(cfg, "lr0", f.lr0);
  if (zeroed) cfg.set("zeroed_input", "true");
  if (!cfg.has("seed")) throw UsageError(std::string(zeroed ? "calibrate" : "train") + ": --seed is required");
  if (!cfg.has("train")) throw UsageError("no training sequences: give a split with a 'train' key");
  const TrainConfig tc = TrainConfig::from_config(cfg);
  const SplitSpec split = SplitSpec::from_config(cfg);

  std::vector<TrainSequence> train, val;
  for (const auto& s : load_role(split, SplitRole::train)) train.push_back(make_train_sequence(s, tc.js));
  for (const auto& s : load_role(split, SplitRole::val)) val.push_back(make_train_sequence(s, tc.js));

  const fs::path out = output_path(f.out);
  fs::create_directories(out);
  write_text(out / "run.cfg", cfg.dump());

  ModelParams model = ModelParams::init(NetConfig{}, tc.seed);
  FitOptions opts;
  opts.output_dir = out;
  opts.resume = f.resume;
  opts.stop_after = f.stop_after ? static_cast<int>(*f.stop_after) : 0;
  if (!f.quiet) {
    opts.on_epoch = [](const EpochRecord& r) {
      if (!r.val_loss) return;
      std::fprintf(stderr, "epoch %d  train %.6g  val %.6g  lr %.3g\n", r.epoch, r.train_loss, *r.val_loss, r.lr);
    };
  }
  FitResult res = fit(train, val, model, tc, opts);
  if (val.empty()) {
    std::cout << "finished epoch " << res.best_epoch << " (no validation sequences)\n";
  } else {
    std::cout << "best epoch " << res.best_epoch << "  val loss " << fmt(res.best_val_loss) << "  (initial "
              << fmt(res.initial_val_loss) << ")\n";
  }

  if (zeroed) {
    const StaticCalibration c = static_calibration(res.best.params);
    json j;
    j["c_omega_hat"] = mat_json(c.c_omega);
    j["offset"] = vec_json<3>(c.offset);
    j["sensor_matrix"] = mat_json(c.sensor_matrix());
    j["gyro_bias"] = vec_json<3>(c.gyro_bias());
    write_text(out / "calibration.json", j.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// integrate

SequenceData load_sequence_dir(const std::string& dir, const std::string& format, double rate) {
  const fs::path p = fs::absolute(dir).lexically_normal();
  const fs::path d = p.filename().empty() ? p.parent_path() : p;
  SplitSpec split;
  split.format = parse_format(format);
  split.root = d.parent_path();
  split.rate = rate;
  return load_split_sequence(split, {d.filename().string(), SplitRole::test, 0.0, std::nullopt});
}

int cmd_integrate(const std::string& seq_dir, const std::string& format, double rate, const std::string& method_name,
                  const std::string& checkpoint, const std::string& out_arg) {
  const Method method = parse_method(method_name);
  const SequenceData seq = load_sequence_dir(seq_dir, format, rate);
  std::optional<Checkpoint> ck;
  BaselineInputs in;
  if (method == Method::calibrated || method == Method::proposed) {
    if (checkpoint.empty()) throw UsageError("integrate: --checkpoint is required for method " + method_name);
    ck = load_checkpoint(checkpoint);
    (method == Method::proposed ? in.proposed : in.calibrated) = &*ck;
  }
  const std::size_t first = evaluation_start(in);
  const auto est = estimate(method, seq, in, first);
  GroundTruth out = seq.gt.slice(first, est.size());
  out.rot = est;
  write_gt_csv(output_path(out_arg), out);
  std::cout << "wrote " << est.size() << " orientations from sample " << first << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate / report

void print_table(const std::vector<MetricsReport>& reports) {
  std::printf("%-24s %-11s %9s %9s %9s %9s %9s\n", "sequence", "method", "aoe_deg", "yaw_deg", "roe7", "roe21",
              "roe35");
  std::map<std::string, std::pair<double, double>> mean;
  std::map<std::string, int> count;
  for (const auto& r : reports) {
    const auto s = r.roe_summary();
    auto cell = [&](double d) {
      const auto it = s.find(d);
      return it == s.end() || it->second.count == 0 ? std::string("-") : fmt_short(it->second.median_deg);
    };
    std::printf("%-24s %-11s %9.3f %9.3f %9s %9s %9s\n", r.sequence.c_str(), r.method.c_str(), r.aoe.deg_3d,
                r.aoe.deg_yaw, cell(7.0).c_str(), cell(21.0).c_str(), cell(35.0).c_str());
    mean[r.method].first += r.aoe.deg_3d;
    mean[r.method].second += r.aoe.deg_yaw;
    ++count[r.method];
  }
  for (const auto& [m, v] : mean) {
    std::printf("%-24s %-11s %9.3f %9.3f\n", "average", m.c_str(), v.first / count[m], v.second / count[m]);
  }
}

int cmd_evaluate(const ConfigSources& src, const std::string& methods_arg, const std::string& proposed,
                 const std::string& calibrated, std::size_t stride, bool svg, const std::string& out_arg) {
  const KeyValueConfig cfg = load_layers(src, join(kSplitKeys, kTrainKeys));
  if (!cfg.has("test")) throw UsageError("evaluate: the split has no 'test' sequences");
  const SplitSpec split = SplitSpec::from_config(cfg);
  std::vector<Method> methods;
  for (const auto& m : split_list(methods_arg)) methods.push_back(parse_method(m));
  if (methods.empty()) throw UsageError("evaluate: --methods is empty");

  std::optional<Checkpoint> ck_prop, ck_cal;
  BaselineInputs in;
  in.roe.stride = stride;
  if (!proposed.empty()) in.proposed = &ck_prop.emplace(load_checkpoint(proposed));
  if (!calibrated.empty()) in.calibrated = &ck_cal.emplace(load_checkpoint(calibrated));
  for (Method m : methods) {
    if (m == Method::proposed && !in.proposed) throw UsageError("evaluate: method 'proposed' needs --proposed");
    if (m == Method::calibrated && !in.calibrated) throw UsageError("evaluate: method 'calibrated' needs --calibrated");
  }

  std::vector<MetricsReport> all;
  for (const auto& seq : load_role(split, SplitRole::test)) {
    const auto reps = run_baselines(seq, methods, in);
    all.insert(all.end(), reps.begin(), reps.end());
  }
  const fs::path out = output_path(out_arg);
  write_reports(out, all);
  write_text(out / "run.cfg", cfg.dump());
  if (svg) {
    write_text(out / "roe.svg", roe_svg(all, false));
    write_text(out / "roe_yaw.svg", roe_svg(all, true));
  }
  print_table(all);
  return 0;
}

int cmd_report(const std::string& in_dir, const std::string& svg_path) {
  const auto reps = read_reports(in_dir);
  print_table(reps);
  if (!svg_path.empty()) write_text(output_path(svg_path), roe_svg(reps));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gyro denoising with a dilated convolutional network"};
  app.require_subcommand(1);

  // synth
  ConfigSources synth_src;
  std::optional<double> synth_duration, synth_rate;
  std::optional<long long> synth_seed;
  std::optional<std::string> synth_calib;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene (imu.csv, gt.csv, manifest.json)");
  add_config_options(synth, synth_src, false);
  synth->add_option("--duration", synth_duration, "seconds");
  synth->add_option("--rate", synth_rate, "Hz");
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--calib-from", synth_calib, "reuse the calibration of another scene's manifest.json");
  synth->add_option("--out", synth_out, "output directory")->required();

  // calibrate / train
  ConfigSources cal_src, train_src;
  TrainFlags cal_flags, train_flags;
  auto add_fit = [&](CLI::App* cmd, ConfigSources& src, TrainFlags& f) {
    add_config_options(cmd, src, true);
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--epochs", f.epochs, "number of epochs");
    cmd->add_option("--lr0", f.lr0, "initial learning rate");
    cmd->add_option("--val-every", f.val_every, "validation period in epochs");
    cmd->add_option("--stop-after", f.stop_after, "stop after this epoch, keeping the schedule");
    cmd->add_flag("--resume", f.resume, "continue from the training state in --out");
    cmd->add_flag("--quiet", f.quiet, "no progress lines");
    cmd->add_option("--out", f.out, "output directory")->required();
  };
  auto* calibrate = app.add_subcommand("calibrate", "fit the static calibration (network inputs held at zero)");
  add_fit(calibrate, cal_src, cal_flags);
  auto* train = app.add_subcommand("train", "train the full model");
  add_fit(train, train_src, train_flags);

  // integrate
  std::string int_seq, int_format = "synth", int_method = "proposed", int_ck, int_out;
  double int_rate = 200.0;
  auto* integrate = app.add_subcommand("integrate", "dead-reckon orientation for one sequence");
  integrate->add_option("--seq", int_seq, "sequence directory")->required();
  integrate->add_option("--format", int_format, "synth, euroc or tumvi")->capture_default_str();
  integrate->add_option("--rate", int_rate, "nominal IMU rate, Hz")->capture_default_str();
  integrate->add_option("--method", int_method, "raw, calibrated, proposed or zero")->capture_default_str();
  integrate->add_option("--checkpoint", int_ck, "checkpoint for calibrated / proposed");
  integrate->add_option("--out", int_out, "output CSV (t_ns, position, quaternion)")->required();

  // evaluate
  ConfigSources eval_src;
  std::string eval_methods = "raw,calibrated,proposed,zero", eval_prop, eval_cal, eval_out;
  std::size_t eval_stride = 1;
  bool eval_svg = false;
  auto* evaluate = app.add_subcommand("evaluate", "AOE / ROE reports on the test sequences of a split");
  add_config_options(evaluate, eval_src, true);
  evaluate->add_option("--methods", eval_methods, "comma-separated methods")->capture_default_str();
  evaluate->add_option("--proposed", eval_prop, "checkpoint of the full model");
  evaluate->add_option("--calibrated", eval_cal, "checkpoint from calibrate");
  evaluate->add_option("--stride", eval_stride, "ROE start-index stride")->capture_default_str();
  evaluate->add_flag("--svg", eval_svg, "also write ROE box plots");
  evaluate->add_option("--out", eval_out, "report directory")->required();

  // report
  std::string rep_in, rep_svg;
  auto* report = app.add_subcommand("report", "print a report directory as a table");
  report->add_option("--in", rep_in, "report directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--svg", rep_svg, "write the ROE box plot here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_src, synth_duration, synth_rate, synth_seed, synth_calib, synth_out);
    if (*calibrate) return cmd_fit(cal_src, cal_flags, true);
    if (*train) return cmd_fit(train_src, train_flags, false);
    if (*integrate) return cmd_integrate(int_seq, int_format, int_rate, int_method, int_ck, int_out);
    if (*evaluate) return cmd_evaluate(eval_src, eval_methods, eval_prop, eval_cal, eval_stride, eval_svg, eval_out);
    if (*report) return cmd_report(rep_in, rep_svg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
