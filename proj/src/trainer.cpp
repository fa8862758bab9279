#include "gyrodenoise/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

using nlohmann::json;

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x7a11u};
  return std::mt19937_64(seq);
}

std::size_t round_up(std::size_t x, std::size_t m) { return (x + m - 1) / m * m; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw InvalidArgument(std::string("TrainConfig: ") + name + " must be > 0");
  };
  positive(lr0, "lr0");
  positive(adam_eps, "adam_eps");
  if (!(lr_min >= 0.0 && lr_min <= lr0)) throw InvalidArgument("TrainConfig: lr_min must be in [0, lr0]");
  if (epochs < 1) throw InvalidArgument("TrainConfig: epochs must be >= 1");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("TrainConfig: weight_decay must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("TrainConfig: dropout must be in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("TrainConfig: betas must be in [0, 1)");
  }
  if (restart_period < 1 || restart_mult < 1) throw InvalidArgument("TrainConfig: restart period and mult must be >= 1");
  if (window_length < 2 || batch_size < 1 || val_every < 1) {
    throw InvalidArgument("TrainConfig: window_length, batch_size and val_every must be positive");
  }
  if (augment_gyro_std < 0.0 || augment_acc_std < 0.0 || augment_gyro_bias_std < 0.0) {
    throw InvalidArgument("TrainConfig: augmentation std must be >= 0");
  }
  LossConfig{js, huber_delta, 1.0}.validate();
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg, TrainConfig c) {
  c.lr0 = cfg.get_double("lr0", c.lr0);
  c.lr_min = cfg.get_double("lr_min", c.lr_min);
  c.epochs = static_cast<int>(cfg.get_int("epochs", c.epochs));
  c.weight_decay = cfg.get_double("weight_decay", c.weight_decay);
  c.dropout = cfg.get_double("dropout", c.dropout);
  c.beta1 = cfg.get_double("beta1", c.beta1);
  c.beta2 = cfg.get_double("beta2", c.beta2);
  c.adam_eps = cfg.get_double("adam_eps", c.adam_eps);
  c.restart_period = static_cast<int>(cfg.get_int("restart_period", c.restart_period));
  c.restart_mult = static_cast<int>(cfg.get_int("restart_mult", c.restart_mult));
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(c.seed)));
  c.window_length = static_cast<int>(cfg.get_int("window_length", c.window_length));
  c.batch_size = static_cast<int>(cfg.get_int("batch_size", c.batch_size));
  c.val_every = static_cast<int>(cfg.get_int("val_every", c.val_every));
  c.augment_gyro_std = cfg.get_double("augment_gyro_std", c.augment_gyro_std);
  c.augment_acc_std = cfg.get_double("augment_acc_std", c.augment_acc_std);
  c.augment_gyro_bias_std = cfg.get_double("augment_gyro_bias_std", c.augment_gyro_bias_std);
  c.huber_delta = cfg.get_double("huber_delta", c.huber_delta);
  std::vector<long long> def(c.js.begin(), c.js.end());
  const auto js = cfg.get_ints("js", def);
  c.js.assign(js.begin(), js.end());
  c.zeroed_input = cfg.get_bool("zeroed_input", c.zeroed_input);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) { return from_config(cfg, TrainConfig{}); }

std::string TrainConfig::dump() const {
  std::ostringstream o;
  o << "lr0 = " << fmt(lr0) << "\n"
    << "lr_min = " << fmt(lr_min) << "\n"
    << "epochs = " << epochs << "\n"
    << "weight_decay = " << fmt(weight_decay) << "\n"
    << "dropout = " << fmt(dropout) << "\n"
    << "beta1 = " << fmt(beta1) << "\n"
    << "beta2 = " << fmt(beta2) << "\n"
    << "adam_eps = " << fmt(adam_eps) << "\n"
    << "restart_period = " << restart_period << "\n"
    << "restart_mult = " << restart_mult << "\n"
    << "seed = " << seed << "\n"
    << "window_length = " << window_length << "\n"
    << "batch_size = " << batch_size << "\n"
    << "val_every = " << val_every << "\n"
    << "augment_gyro_std = " << fmt(augment_gyro_std) << "\n"
    << "augment_acc_std = " << fmt(augment_acc_std) << "\n"
    << "augment_gyro_bias_std = " << fmt(augment_gyro_bias_std) << "\n"
    << "huber_delta = " << fmt(huber_delta) << "\n"
    << "js = " << join_ints(js) << "\n"
    << "zeroed_input = " << (zeroed_input ? "true" : "false") << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Optimizer

void AdamState::reset(const std::vector<ModelParams::Named>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.tensor->numel(), 0.0);
    v.emplace_back(p.tensor->numel(), 0.0);
  }
  step = 0;
}

void adam_step(std::vector<ModelParams::Named>& params, AdamState& state, double lr, double weight_decay,
               const AdamOptions& o) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidArgument("adam_step: optimizer state does not match the parameter list");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& t = *params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != t.numel() || v.size() != t.numel()) {
      throw InvalidArgument("adam_step: state shape mismatch for " + params[i].name);
    }
    const bool has_grad = t.grad.size() == t.numel();
    const double shrink = params[i].weight_decay ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t k = 0; k < t.numel(); ++k) {
      const double g = has_grad ? t.grad[k] : 0.0;
      t.data[k] *= shrink;
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g;
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
      t.data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + o.eps);
    }
  }
}

double cosine_warm_restarts(int step, int period0, int t_mult, double lr0, double lr_min) {
  if (step < 0) throw InvalidArgument("cosine_warm_restarts: step must be >= 0");
  if (period0 < 1 || t_mult < 1) throw InvalidArgument("cosine_warm_restarts: period0 and t_mult must be >= 1");
  long long t = step, period = period0;
  while (t >= period) {
    t -= period;
    period *= t_mult;
  }
  const double frac = static_cast<double>(t) / static_cast<double>(period);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// Data

TrainSequence make_train_sequence(const SequenceData& seq, const std::vector<int>& js) {
  if (seq.gt.size() != seq.imu.size()) throw ValidationError(seq.name + ": ground truth is not aligned to the IMU");
  for (std::size_t k = 0; k < seq.imu.size(); ++k) {
    if (!seq.imu.gyro[k].allFinite() || !seq.imu.acc[k].allFinite()) {
      throw ValidationError(seq.name + ": non-finite IMU sample " + std::to_string(k));
    }
  }
  return {seq.name, seq.imu, build_increment_table(seq.gt, js)};
}

void fit_standardization(ModelParams& params, const std::vector<TrainSequence>& seqs) {
  std::array<double, 6> sum{}, sq{};
  double n = 0.0;
  for (const auto& s : seqs) {
    for (std::size_t k = 0; k < s.imu.size(); ++k) {
      for (int c = 0; c < 3; ++c) {
        sum[c] += s.imu.gyro[k][c];
        sum[c + 3] += s.imu.acc[k][c];
      }
    }
    n += static_cast<double>(s.imu.size());
  }
  if (n < 2.0) throw ValidationError("fit_standardization: not enough samples");
  for (int c = 0; c < 6; ++c) params.input_mean[c] = sum[c] / n;
  for (const auto& s : seqs) {
    for (std::size_t k = 0; k < s.imu.size(); ++k) {
      for (int c = 0; c < 3; ++c) {
        const double dg = s.imu.gyro[k][c] - params.input_mean[c];
        const double da = s.imu.acc[k][c] - params.input_mean[c + 3];
        sq[c] += dg * dg;
        sq[c + 3] += da * da;
      }
    }
  }
  for (int c = 0; c < 6; ++c) {
    const double sd = std::sqrt(sq[c] / (n - 1.0));
    params.input_std[c] = sd > 1e-12 ? sd : 1.0;
  }
}

std::vector<std::size_t> epoch_windows(std::size_t sequence_length, int length, int receptive_field, int jmax,
                                       std::size_t offset) {
  const auto r = static_cast<std::size_t>(receptive_field);
  const auto uj = static_cast<std::size_t>(jmax);
  const auto len = static_cast<std::size_t>(length);
  if (len <= r) throw InvalidArgument("epoch_windows: window length must exceed the receptive field");
  const std::size_t sup = (len - r) / uj * uj;
  if (sup == 0) throw InvalidArgument("epoch_windows: window too short to hold one supervised group");
  if (offset % uj != 0) throw InvalidArgument("epoch_windows: offset must be a multiple of jmax");
  std::vector<std::size_t> starts;
  for (std::size_t first = round_up(r, uj) + offset; first - r + len <= sequence_length; first += sup) {
    starts.push_back(first - r);
  }
  return starts;
}

double validation_loss(ModelParams& params, const std::vector<TrainSequence>& seqs, const LossConfig& loss,
                       bool zeroed_input) {
  if (seqs.empty()) throw InvalidArgument("validation_loss: no sequences");
  const auto r = static_cast<std::size_t>(params.config.receptive_field());
  const auto uj = static_cast<std::size_t>(loss.max_j());
  double total = 0.0;
  for (const auto& s : seqs) {
    const std::size_t first = round_up(r, uj);
    if (first + uj >= s.imu.size()) throw ValidationError(s.name + ": too short for validation");
    ad::Graph g;
    ForwardOptions opts;
    opts.zeroed_input = zeroed_input;
    ad::Var out = forward(g, params, pack_imu(s.imu, 0, s.imu.size()), opts);
    out = ad::slice_last(out, first - r, out.shape()[2] - (first - r));
    const LossWindow w{&s.table, first};
    total += increment_loss(out, std::span<const LossWindow>(&w, 1), loss).value()[0];
  }
  return total / static_cast<double>(seqs.size());
}

// ---------------------------------------------------------------------------
// Fit

namespace {

struct Files {
  std::filesystem::path dir;
  std::filesystem::path metrics() const { return dir / "metrics.csv"; }
  std::filesystem::path best() const { return dir / "checkpoint.json"; }
  std::filesystem::path last() const { return dir / "last.json"; }
  std::filesystem::path state() const { return dir / "train_state.json"; }
  std::filesystem::path config() const { return dir / "config.txt"; }
};

std::string csv_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + (r.val_loss ? fmt(*r.val_loss) : "") + "," +
         fmt(r.lr) + "\n";
}

Checkpoint snapshot(const ModelParams& m, const TrainConfig& cfg, int epoch, double val) {
  Checkpoint ck;
  ck.params = m;
  ck.zeroed_input = cfg.zeroed_input;
  ck.meta["epoch"] = std::to_string(epoch);
  ck.meta["val_loss"] = fmt(val);
  ck.meta["seed"] = std::to_string(cfg.seed);
  return ck;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << s;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ResumeState {
  int epoch = 0;
  double best_val = 0.0;
  int best_epoch = 0;
  double initial_val = 0.0;
  AdamState adam;
};

void save_state(const Files& f, const ResumeState& s) {
  json j;
  j["epoch"] = s.epoch;
  j["best_val_loss"] = s.best_val;
  j["best_epoch"] = s.best_epoch;
  j["initial_val_loss"] = s.initial_val;
  j["adam_step"] = s.adam.step;
  j["adam_m"] = s.adam.m;
  j["adam_v"] = s.adam.v;
  write_text(f.state(), j.dump());
}

ResumeState load_state(const Files& f) {
  try {
    const json j = json::parse(read_text(f.state()));
    ResumeState s;
    s.epoch = j.at("epoch").get<int>();
    s.best_val = j.at("best_val_loss").get<double>();
    s.best_epoch = j.at("best_epoch").get<int>();
    s.initial_val = j.at("initial_val_loss").get<double>();
    s.adam.step = j.at("adam_step").get<std::int64_t>();
    s.adam.m = j.at("adam_m").get<std::vector<std::vector<double>>>();
    s.adam.v = j.at("adam_v").get<std::vector<std::vector<double>>>();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed training state: ") + e.what());
  }
}

/// Keeps the header and rows with epoch <= last_epoch.
void truncate_metrics(const std::filesystem::path& p, int last_epoch) {
  std::istringstream in(read_text(p));
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= last_epoch) out += line + "\n";
  }
  write_text(p, out);
}

}  // namespace

FitResult fit(const std::vector<TrainSequence>& train, const std::vector<TrainSequence>& val, ModelParams& model,
              const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (train.empty()) throw ValidationError("fit: empty training set");
  model.config.dropout = config.dropout;
  const int r = model.config.receptive_field();
  const LossConfig loss{config.js, config.huber_delta, train.front().imu.dt()};
  const int jmax = loss.max_j();
  const std::size_t sup = static_cast<std::size_t>((config.window_length - r) / jmax * jmax);
  if (config.window_length <= r || sup == 0) {
    throw ValidationError("fit: window_length " + std::to_string(config.window_length) +
                          " leaves no supervised samples after the receptive field " + std::to_string(r));
  }
  for (const auto& s : train) {
    if (epoch_windows(s.imu.size(), config.window_length, r, jmax, 0).empty()) {
      throw ValidationError("fit: training sequence '" + s.name + "' is shorter than one window");
    }
  }

  const Files files{options.output_dir};
  const bool write = !options.output_dir.empty();
  if (write) std::filesystem::create_directories(options.output_dir);

  auto params = model.trainable();
  for (auto& p : params) p.tensor->requires_grad = true;
  const AdamOptions adam_opts{config.beta1, config.beta2, config.adam_eps};
  const bool have_val = !val.empty();

  FitResult result;
  ResumeState st;
  if (options.resume && write && std::filesystem::exists(files.state())) {
    st = load_state(files);
    Checkpoint last = load_checkpoint(files.last());
    model = last.params;
    model.config.dropout = config.dropout;
    params = model.trainable();
    for (auto& p : params) p.tensor->requires_grad = true;
    result.best = load_checkpoint(files.best());
    if (st.adam.m.size() != params.size()) throw ParseError("training state does not match the model");
    truncate_metrics(files.metrics(), st.epoch);
  } else {
    fit_standardization(model, train);
    st.adam.reset(params);
    st.initial_val = have_val ? validation_loss(model, val, loss, config.zeroed_input)
                              : std::numeric_limits<double>::infinity();
    st.best_val = st.initial_val;
    result.best = snapshot(model, config, 0, st.best_val);
    if (write) {
      write_text(files.metrics(), "epoch,train_loss,val_loss,lr\n");
      write_text(files.config(), config.dump());
    }
  }

  const int last_epoch = options.stop_after > 0 ? std::min(options.stop_after, config.epochs) : config.epochs;
  const auto b = static_cast<std::size_t>(config.batch_size);
  const auto t = static_cast<std::size_t>(config.window_length);

  for (int epoch = st.epoch + 1; epoch <= last_epoch; ++epoch) {
    const double lr =
        cosine_warm_restarts(epoch - 1, config.restart_period, config.restart_mult, config.lr0, config.lr_min);
    auto rng = epoch_rng(config.seed, epoch);

    std::vector<std::pair<std::size_t, std::size_t>> windows;
    for (std::size_t s = 0; s < train.size(); ++s) {
      std::uniform_int_distribution<std::size_t> pick(0, sup / static_cast<std::size_t>(jmax) - 1);
      auto starts = epoch_windows(train[s].imu.size(), config.window_length, r, jmax, pick(rng) * jmax);
      if (starts.empty()) starts = epoch_windows(train[s].imu.size(), config.window_length, r, jmax, 0);
      for (auto w : starts) windows.emplace_back(s, w);
    }
    std::shuffle(windows.begin(), windows.end(), rng);

    std::normal_distribution<double> normal(0.0, 1.0);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t first = 0; first < windows.size(); first += b) {
      const std::size_t nb = std::min(b, windows.size() - first);
      Batch batch;
      batch.imu = ad::Tensor({nb, 6, t});
      for (std::size_t i = 0; i < nb; ++i) {
        const auto [s, start] = windows[first + i];
        const ad::Tensor x = pack_imu(train[s].imu, start, t);
        double* dst = batch.imu.data.data() + i * 6 * t;
        std::array<double, 6> offset{};
        if (config.augment_gyro_bias_std > 0.0) {
          for (std::size_t c = 0; c < 3; ++c) offset[c] = config.augment_gyro_bias_std * normal(rng);
        }
        for (std::size_t c = 0; c < 6; ++c) {
          const double sd = c < 3 ? config.augment_gyro_std : config.augment_acc_std;
          for (std::size_t k = 0; k < t; ++k) {
            dst[c * t + k] = x.data[c * t + k] + offset[c] + (sd > 0.0 ? sd * normal(rng) : 0.0);
          }
        }
        batch.windows.push_back({&train[s].table, start + static_cast<std::size_t>(r)});
      }
      ForwardOptions fo;
      fo.train = true;
      fo.zeroed_input = config.zeroed_input;
      fo.dropout_seed = rng();
      ad::Graph g;
      ad::Var l;
      try {
        l = total_loss(g, model, batch, loss, fo);
      } catch (const InvalidArgument& e) {
        // inputs are finite, so a non-finite rotation comes from the model
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
      }
      const double lv = l.value()[0];
      if (!std::isfinite(lv)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch), epoch);
      }
      model.zero_grad();
      g.backward(l);
      adam_step(params, st.adam, lr, config.weight_decay, adam_opts);
      loss_sum += lv;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / batches;
    rec.lr = lr;
    const bool checkpoint_epoch = epoch % config.val_every == 0 || epoch == last_epoch;
    if (checkpoint_epoch && have_val) {
      double v = 0.0;
      try {
        v = validation_loss(model, val, loss, config.zeroed_input);
      } catch (const InvalidArgument& e) {
        throw DivergenceError("validation diverged at epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
      }
      if (!std::isfinite(v)) {
        throw DivergenceError("validation loss became non-finite at epoch " + std::to_string(epoch), epoch);
      }
      rec.val_loss = v;
      if (v < st.best_val) {
        st.best_val = v;
        st.best_epoch = epoch;
        result.best = snapshot(model, config, epoch, v);
      }
    }
    if (!have_val && epoch == last_epoch) {
      st.best_epoch = epoch;
      result.best = snapshot(model, config, epoch, rec.train_loss);
    }
    st.epoch = epoch;
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    if (write) {
      std::ofstream(files.metrics(), std::ios::app | std::ios::binary) << csv_row(rec);
      if (checkpoint_epoch) {
        save_checkpoint(files.best(), result.best);
        save_checkpoint(files.last(), snapshot(model, config, epoch, rec.val_loss.value_or(rec.train_loss)));
        save_state(files, st);
      }
    }
  }
  if (write && last_epoch <= st.epoch && result.history.empty()) save_checkpoint(files.best(), result.best);

  result.best_val_loss = st.best_val;
  result.initial_val_loss = st.initial_val;
  result.best_epoch = st.best_epoch;
  for (auto& p : result.best.params.trainable()) p.tensor->grad.clear();
  return result;
}

}  // namespace gyrodenoise
