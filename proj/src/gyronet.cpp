#include "gyrodenoise/gyronet.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "gyrodenoise/error.hpp"

namespace gyrodenoise {

using nlohmann::json;

int NetConfig::receptive_field() const {
  int r = 0;
  for (std::size_t i = 0; i < kernels.size(); ++i) r += (kernels[i] - 1) * dilations[i];
  return r;
}

int NetConfig::nominal_window() const {
  int w = 0;
  for (std::size_t i = 0; i < kernels.size(); ++i) w = std::max(w, kernels[i] * dilations[i]);
  return w;
}

void NetConfig::validate() const {
  if (kernels.empty() || kernels.size() != dilations.size() || channels.size() != kernels.size() + 1) {
    throw InvalidArgument("NetConfig: need one kernel and dilation per layer and layers + 1 channel sizes");
  }
  if (channels.front() != 6) throw InvalidArgument("NetConfig: the network reads 6 IMU channels");
  if (channels.back() != 3) throw InvalidArgument("NetConfig: the network emits a 3-vector correction");
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (kernels[i] < 1 || dilations[i] < 1 || channels[i + 1] < 1) {
      throw InvalidArgument("NetConfig: kernel, dilation and channel sizes must be >= 1");
    }
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("NetConfig: dropout must be in [0, 1)");
  if (!(output_gain > 0.0)) throw InvalidArgument("NetConfig: output_gain must be > 0");
}

ModelParams ModelParams::init(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  const std::size_t layers = config.layers();
  for (std::size_t l = 0; l < layers; ++l) {
    const auto cin = static_cast<std::size_t>(config.channels[l]);
    const auto cout = static_cast<std::size_t>(config.channels[l + 1]);
    const auto k = static_cast<std::size_t>(config.kernels[l]);
    ad::Tensor w({cout, cin, k});
    ad::Tensor b({cout});
    if (l + 1 < layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : w.data) v = u(rng);
      for (auto& v : b.data) v = u(rng);
      p.bn_gamma.emplace_back(ad::Shape{cout}, 1.0);
      p.bn_beta.emplace_back(ad::Shape{cout}, 0.0);
      p.bn_stats.push_back(ad::BatchNormStats::initialized(cout));
    }
    p.conv_w.push_back(std::move(w));
    p.conv_b.push_back(std::move(b));
  }
  p.c_omega = ad::Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  for (auto& n : p.trainable()) n.tensor->requires_grad = true;
  return p;
}

std::vector<ModelParams::Named> ModelParams::trainable() {
  std::vector<Named> out;
  out.push_back({"c_omega", &c_omega, false});
  const std::size_t layers = conv_w.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string s = std::to_string(l + 1);
    out.push_back({"conv" + s + ".weight", &conv_w[l], true});
    out.push_back({"conv" + s + ".bias", &conv_b[l], l + 1 < layers});
    if (l < bn_gamma.size()) {
      out.push_back({"bn" + s + ".gamma", &bn_gamma[l], true});
      out.push_back({"bn" + s + ".beta", &bn_beta[l], false});
    }
  }
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t n = c_omega.numel();
  for (const auto& t : conv_w) n += t.numel();
  for (const auto& t : conv_b) n += t.numel();
  for (const auto& t : bn_gamma) n += t.numel();
  for (const auto& t : bn_beta) n += t.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& n : trainable()) n.tensor->zero_grad();
}

ParamBreakdown count_params(const NetConfig& config) {
  config.validate();
  ParamBreakdown b;
  for (std::size_t l = 0; l < config.layers(); ++l) {
    const auto cin = static_cast<std::size_t>(config.channels[l]);
    const auto cout = static_cast<std::size_t>(config.channels[l + 1]);
    b.conv += cout * cin * static_cast<std::size_t>(config.kernels[l]) + cout;
    if (l + 1 < config.layers()) b.batchnorm += 2 * cout;
  }
  return b;
}

std::size_t count_params(const ModelParams& params) { return params.count(); }

ad::Tensor pack_imu(const ImuSequence& imu, std::size_t begin, std::size_t count) {
  if (begin + count > imu.size()) throw InvalidArgument("pack_imu: range out of bounds");
  ad::Tensor t({1, 6, count});
  for (std::size_t i = 0; i < count; ++i) {
    for (int c = 0; c < 3; ++c) {
      t.data[static_cast<std::size_t>(c) * count + i] = imu.gyro[begin + i][c];
      t.data[static_cast<std::size_t>(c + 3) * count + i] = imu.acc[begin + i][c];
    }
  }
  return t;
}

namespace {

ad::Var network(ad::Graph& graph, ModelParams& p, ad::Var x, bool train, bool batch_stats_only,
                std::uint64_t seed) {
  const std::size_t layers = p.conv_w.size();
  for (std::size_t l = 0; l < layers; ++l) {
    x = ad::conv1d(x, graph.parameter(p.conv_w[l]), graph.parameter(p.conv_b[l]), p.config.dilations[l]);
    if (l + 1 == layers) break;
    const ad::BnMode mode = batch_stats_only ? ad::BnMode::batch_stats : (train ? ad::BnMode::train : ad::BnMode::eval);
    x = ad::batchnorm1d(x, graph.parameter(p.bn_gamma[l]), graph.parameter(p.bn_beta[l]), p.bn_stats[l], mode);
    x = ad::gelu(x);
    if (!batch_stats_only) x = ad::dropout(x, p.config.dropout, train, seed + 0x9e3779b97f4a7c15ULL * (l + 1));
  }
  return ad::scale(x, p.config.output_gain);
}

}  // namespace

ad::Var forward(ad::Graph& graph, ModelParams& params, const ad::Tensor& imu, const ForwardOptions& options) {
  if (imu.rank() != 3 || imu.dim(1) != 6) {
    throw InvalidArgument("forward: expected raw IMU tensor [B, 6, T], got " + ad::shape_str(imu.shape));
  }
  const std::size_t nb = imu.dim(0), t = imu.dim(2);
  const auto r = static_cast<std::size_t>(params.config.receptive_field());
  if (t < r + 1) {
    throw InvalidArgument("forward: window of " + std::to_string(t) + " samples is shorter than receptive field + 1 (" +
                          std::to_string(r + 1) + ")");
  }
  const std::size_t t_out = t - r;

  // C omega_imu on the supervised samples.
  ad::Tensor gyro({nb, 3, t_out});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      std::copy_n(imu.data.begin() + (b * 6 + c) * t + r, t_out, gyro.data.begin() + (b * 3 + c) * t_out);
    }
  }
  ad::Var c_mat = ad::reshape(graph.parameter(params.c_omega), {3, 3, 1});
  ad::Var calibrated = ad::conv1d(graph.constant(std::move(gyro)), c_mat, ad::Var{}, 1);

  ad::Var correction;
  if (options.zeroed_input) {
    const std::size_t len = r + 2;
    ad::Tensor zeros({1, 6, len});
    for (std::size_t c = 0; c < 6; ++c) {
      std::fill_n(zeros.data.begin() + c * len, len, -params.input_mean[c] / params.input_std[c]);
    }
    ad::Var c = network(graph, params, graph.constant(std::move(zeros)), options.train, true, 0);
    c = ad::slice_last(c, 0, 1);
    const std::vector<std::size_t> rows(nb, 0);
    correction = ad::broadcast_last(ad::gather_rows(c, rows), t_out);
  } else {
    ad::Tensor x = imu;
    x.grad.clear();
    x.requires_grad = false;
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t c = 0; c < 6; ++c) {
        double* p = x.data.data() + (b * 6 + c) * t;
        const double m = params.input_mean[c], s = params.input_std[c];
        for (std::size_t i = 0; i < t; ++i) p[i] = (p[i] - m) / s;
      }
    }
    correction = network(graph, params, graph.constant(std::move(x)), options.train, false, options.dropout_seed);
  }
  return ad::add(calibrated, correction);
}

std::vector<Vec3> corrected_gyro(ModelParams& params, const ImuSequence& imu, bool zeroed_input) {
  ad::Graph graph;
  ForwardOptions opts;
  opts.zeroed_input = zeroed_input;
  const ad::Var out = forward(graph, params, pack_imu(imu, 0, imu.size()), opts);
  const auto& v = out.value();
  const std::size_t t = v.dim(2);
  std::vector<Vec3> w(t);
  for (std::size_t i = 0; i < t; ++i) w[i] = Vec3(v.data[i], v.data[t + i], v.data[2 * t + i]);
  return w;
}

std::vector<Rotation> integrate_corrected(ModelParams& params, const ImuSequence& imu, const Rotation& r0, double dt,
                                         bool zeroed_input) {
  const auto w = corrected_gyro(params, imu, zeroed_input);
  return so3::integrate_increments(r0, w, dt);
}

StaticCalibration static_calibration(ModelParams& params) {
  const auto n = static_cast<std::size_t>(params.config.receptive_field()) + 2;
  ImuSequence zeros;
  for (std::size_t k = 0; k < n; ++k) {
    zeros.t_ns.push_back(static_cast<std::int64_t>(k) * 5'000'000);
    zeros.gyro.push_back(Vec3::Zero());
    zeros.acc.push_back(Vec3::Zero());
  }
  StaticCalibration s;
  s.offset = corrected_gyro(params, zeros, true).front();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) s.c_omega(r, c) = params.c_omega.data[static_cast<std::size_t>(3 * r + c)];
  return s;
}

Vec3 StaticCalibration::gyro_bias() const { return -c_omega.inverse() * offset; }

Mat3 StaticCalibration::sensor_matrix() const { return c_omega.inverse(); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kFormatTag = "gyrodenoise-checkpoint";
constexpr int kFormatVersion = 1;

json tensor_json(const ad::Tensor& t) { return json{{"shape", t.shape}, {"data", t.data}}; }

void load_tensor(const json& j, ad::Tensor& t, const std::string& name) {
  const auto shape = j.at("shape").get<ad::Shape>();
  auto data = j.at("data").get<std::vector<double>>();
  if (shape != t.shape) {
    throw ParseError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                     ad::shape_str(t.shape));
  }
  if (data.size() != t.numel()) throw ParseError("checkpoint tensor '" + name + "' has wrong element count");
  t.data = std::move(data);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  const ModelParams& p = ck.params;
  json j;
  j["format"] = kFormatTag;
  j["version"] = kFormatVersion;
  j["config"] = {{"kernels", p.config.kernels},
                 {"dilations", p.config.dilations},
                 {"channels", p.config.channels},
                 {"dropout", p.config.dropout},
                 {"output_gain", p.config.output_gain}};
  j["zeroed_input"] = ck.zeroed_input;
  json tensors = json::object();
  auto& mp = const_cast<ModelParams&>(p);
  for (const auto& n : mp.trainable()) tensors[n.name] = tensor_json(*n.tensor);
  j["tensors"] = tensors;
  json bn = json::array();
  for (const auto& s : p.bn_stats) bn.push_back({{"mean", s.mean}, {"var", s.var}});
  j["bn_running"] = bn;
  j["input_mean"] = p.input_mean;
  j["input_std"] = p.input_std;
  j["meta"] = ck.meta;
  return j.dump();
}

Checkpoint parse_checkpoint(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kFormatTag) throw ParseError("not a gyrodenoise checkpoint");
    if (j.at("version").get<int>() != kFormatVersion) {
      throw ParseError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
    }
    NetConfig cfg;
    const auto& c = j.at("config");
    cfg.kernels = c.at("kernels").get<std::vector<int>>();
    cfg.dilations = c.at("dilations").get<std::vector<int>>();
    cfg.channels = c.at("channels").get<std::vector<int>>();
    cfg.dropout = c.at("dropout").get<double>();
    cfg.output_gain = c.at("output_gain").get<double>();
    Checkpoint ck;
    ck.params = ModelParams::init(cfg, 0);
    ck.zeroed_input = j.at("zeroed_input").get<bool>();
    const auto& tensors = j.at("tensors");
    for (auto& n : ck.params.trainable()) load_tensor(tensors.at(n.name), *n.tensor, n.name);
    const auto& bn = j.at("bn_running");
    if (bn.size() != ck.params.bn_stats.size()) throw ParseError("checkpoint batchnorm layer count mismatch");
    for (std::size_t i = 0; i < bn.size(); ++i) {
      ck.params.bn_stats[i].mean = bn[i].at("mean").get<std::vector<double>>();
      ck.params.bn_stats[i].var = bn[i].at("var").get<std::vector<double>>();
    }
    ck.params.input_mean = j.at("input_mean").get<std::array<double, 6>>();
    ck.params.input_std = j.at("input_std").get<std::array<double, 6>>();
    ck.meta = j.at("meta").get<std::map<std::string, std::string>>();
    return ck;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(ck);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace gyrodenoise
