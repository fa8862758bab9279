#include "gyrodenoise/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <random>

#include "gyrodenoise/error.hpp"
#include "gyrodenoise/so3.hpp"

namespace gyrodenoise::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using CMap3 = Eigen::Map<const Mat3>;
using Map3 = Eigen::Map<Mat3>;
using Vec3 = Eigen::Vector3d;

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != ad::numel(shape)) {
    throw InvalidArgument("Tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  }
}

const Tensor& Var::value() const { return graph->value(id); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::parameter(Tensor& t) {
  if (t.data.size() != ad::numel(t.shape)) throw InvalidArgument("parameter: data/shape mismatch");
  Node n;
  n.bound = &t;
  n.needs_grad = t.requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.bound ? *n.bound : n.value;
}

Var Graph::record(Tensor value, std::vector<int> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  n.parents = std::move(parents);
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

std::vector<double>& Graph::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw InvalidArgument("backward: variable belongs to another graph");
  if (value(loss.id).numel() != 1) {
    throw InvalidArgument("backward: loss must be a scalar, got shape " + shape_str(value(loss.id).shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.bound) {
      auto& g = n.bound->grad;
      if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

namespace {

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) throw InvalidArgument("operands belong to different graphs");
}

void require_shape(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / structural

Var add(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_shape(x.shape == y.shape, "add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.data[i] + y.data[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    for (int p : {a, b}) {
      if (!g.needs_grad(p)) continue;
      auto& gp = g.grad_buffer(p);
      for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_shape(x.shape == y.shape, "mul: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.data[i] * y.data[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& xa = g.value(a).data;
    const auto& xb = g.value(b).data;
    if (g.needs_grad(a)) {
      auto& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * xb[i];
    }
    if (g.needs_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * xa[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = s * x.data[i];
  return a.graph->record(std::move(out), {a.id}, [a = a.id, s](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data) s += v;
  return a.graph->record(Tensor({1}, {s}), {a.id}, [a = a.id](Graph& g, int self) {
    const double go = g.out_grad(self)[0];
    auto& ga = g.grad_buffer(a);
    for (auto& v : ga) v += go;
  });
}

Var mean(Var a) {
  const std::size_t n = a.numel();
  if (n == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(Var a, Shape shape) {
  const Tensor& x = a.value();
  require_shape(ad::numel(shape) == x.numel(), "reshape: " + shape_str(x.shape) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), x.data);
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var slice_last(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  require_shape(x.rank() >= 1 && start + len <= x.shape.back(), "slice_last: range out of bounds");
  const std::size_t t = x.shape.back();
  const std::size_t rows = x.numel() / t;
  Shape s = x.shape;
  s.back() = len;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data.begin() + r * t + start, len, out.data.begin() + r * len);
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, start, len, t, rows](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < len; ++i) ga[r * t + start + i] += go[r * len + i];
    }
  });
}

Var broadcast_last(Var a, std::size_t t) {
  const Tensor& x = a.value();
  require_shape(x.rank() >= 1 && x.shape.back() == 1, "broadcast_last: last axis must be 1");
  const std::size_t rows = x.numel();
  Shape s = x.shape;
  s.back() = t;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.data.begin() + r * t, t, x.data[r]);
  return a.graph->record(std::move(out), {a.id}, [a = a.id, t, rows](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < t; ++i) s += go[r * t + i];
      ga[r] += s;
    }
  });
}

Var transpose_last2(Var a) {
  const Tensor& x = a.value();
  require_shape(x.rank() == 3, "transpose_last2: expected [B, C, T]");
  const std::size_t b = x.dim(0), c = x.dim(1), t = x.dim(2);
  Tensor out({b, t, c});
  for (std::size_t i = 0; i < b; ++i) {
    CMapMat src(x.data.data() + i * c * t, c, t);
    MapMat(out.data.data() + i * c * t, t, c) = src.transpose();
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, b, c, t](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < b; ++i) {
      MapMat(ga.data() + i * c * t, c, t) += CMapMat(go.data() + i * c * t, t, c).transpose();
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  require_shape(x.rank() >= 1, "gather_rows: scalar input");
  const std::size_t stride = x.numel() / x.dim(0);
  Shape s = x.shape;
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require_shape(rows[r] < x.dim(0), "gather_rows: index out of range");
    std::copy_n(x.data.begin() + rows[r] * stride, stride, out.data.begin() + r * stride);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.graph->record(std::move(out), {a.id}, [a = a.id, idx = std::move(idx), stride](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& ga = g.grad_buffer(a);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t i = 0; i < stride; ++i) ga[idx[r] * stride + i] += go[r * stride + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

/// col[(ci*K + k), t] = x[ci, t + k*d]
void im2col(const double* x, std::size_t cin, std::size_t t_in, std::size_t k, std::size_t d,
            std::size_t t_out, RowMat& col) {
  col.resize(static_cast<Eigen::Index>(cin * k), static_cast<Eigen::Index>(t_out));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      std::copy_n(x + ci * t_in + kk * d, t_out, col.data() + (ci * k + kk) * t_out);
    }
  }
}

}  // namespace

Var conv1d(Var x, Var w, Var bias, int dilation) {
  require_same_graph(x, w);
  const bool has_bias = bias.id >= 0;
  if (has_bias) require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_shape(dilation >= 1, "conv1d: dilation must be >= 1");
  require_shape(wv.rank() == 3, "conv1d: weight must be [Cout, Cin, K], got " + shape_str(wv.shape));
  require_shape(xv.rank() == 2 || xv.rank() == 3, "conv1d: input must be [B, Cin, T] or [Cin, T]");
  const bool batched = xv.rank() == 3;
  const std::size_t nb = batched ? xv.dim(0) : 1;
  const std::size_t cin = xv.shape[xv.rank() - 2];
  const std::size_t t_in = xv.shape.back();
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  const std::size_t d = static_cast<std::size_t>(dilation);
  require_shape(k >= 1, "conv1d: kernel size must be >= 1");
  require_shape(wv.dim(1) == cin, "conv1d: weight expects " + std::to_string(wv.dim(1)) + " input channels, got " +
                                      std::to_string(cin));
  require_shape(t_in >= (k - 1) * d + 1, "conv1d: input length " + std::to_string(t_in) +
                                             " shorter than receptive span " + std::to_string((k - 1) * d + 1));
  if (has_bias) require_shape(bias.numel() == cout, "conv1d: bias length mismatch");
  const std::size_t t_out = t_in - (k - 1) * d;

  Tensor out(batched ? Shape{nb, cout, t_out} : Shape{cout, t_out});
  CMapMat wm(wv.data.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin * k));
  RowMat col;
  for (std::size_t b = 0; b < nb; ++b) {
    MapMat y(out.data.data() + b * cout * t_out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(t_out));
    if (k == 1 && d == 1) {
      y.noalias() = wm * CMapMat(xv.data.data() + b * cin * t_in, static_cast<Eigen::Index>(cin),
                                 static_cast<Eigen::Index>(t_in));
    } else {
      im2col(xv.data.data() + b * cin * t_in, cin, t_in, k, d, t_out, col);
      y.noalias() = wm * col;
    }
    if (has_bias) {
      const auto& bv = bias.value().data;
      for (std::size_t o = 0; o < cout; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bv[o];
    }
  }

  std::vector<int> parents{x.id, w.id};
  if (has_bias) parents.push_back(bias.id);
  return x.graph->record(
      std::move(out), std::move(parents),
      [xi = x.id, wi = w.id, bi = bias.id, has_bias, nb, cin, t_in, cout, k, d, t_out](Graph& g, int self) {
        const auto& go = g.out_grad(self);
        const auto& xd = g.value(xi).data;
        const auto& wd = g.value(wi).data;
        const auto ecout = static_cast<Eigen::Index>(cout);
        const auto eck = static_cast<Eigen::Index>(cin * k);
        const auto etout = static_cast<Eigen::Index>(t_out);
        CMapMat wm(wd.data(), ecout, eck);
        RowMat col, dcol;
        const bool need_x = g.needs_grad(xi);
        const bool need_w = g.needs_grad(wi);
        const bool need_b = has_bias && g.needs_grad(bi);
        for (std::size_t b = 0; b < nb; ++b) {
          CMapMat dy(go.data() + b * cout * t_out, ecout, etout);
          if (need_b) {
            auto& gb = g.grad_buffer(bi);
            // plain loop: Eigen's vectorized sum peels by address, which breaks bitwise reproducibility
            for (std::size_t o = 0; o < cout; ++o) {
              const double* row = go.data() + (b * cout + o) * t_out;
              double acc = 0.0;
              for (std::size_t k2 = 0; k2 < t_out; ++k2) acc += row[k2];
              gb[o] += acc;
            }
          }
          if (need_w) {
            MapMat dw(g.grad_buffer(wi).data(), ecout, eck);
            if (k == 1 && d == 1) {
              dw.noalias() += dy * CMapMat(xd.data() + b * cin * t_in, static_cast<Eigen::Index>(cin),
                                           static_cast<Eigen::Index>(t_in)).transpose();
            } else {
              im2col(xd.data() + b * cin * t_in, cin, t_in, k, d, t_out, col);
              dw.noalias() += dy * col.transpose();
            }
          }
          if (need_x) {
            auto& gx = g.grad_buffer(xi);
            double* gxb = gx.data() + b * cin * t_in;
            if (k == 1 && d == 1) {
              MapMat(gxb, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(t_in)).noalias() +=
                  wm.transpose() * dy;
            } else {
              dcol.noalias() = wm.transpose() * dy;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                  const double* src = dcol.data() + (ci * k + kk) * t_out;
                  double* dst = gxb + ci * t_in + kk * d;
                  for (std::size_t t = 0; t < t_out; ++t) dst[t] += src[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization

Var batchnorm1d(Var x, Var gamma, Var beta, BatchNormStats& stats, BnMode mode, double momentum, double eps) {
  require_same_graph(x, gamma);
  require_same_graph(x, beta);
  const Tensor& xv = x.value();
  require_shape(xv.rank() == 3, "batchnorm1d: input must be [B, C, T]");
  const std::size_t nb = xv.dim(0), c = xv.dim(1), t = xv.dim(2);
  require_shape(gamma.numel() == c && beta.numel() == c, "batchnorm1d: affine size mismatch");
  const std::size_t n = nb * t;
  const bool use_batch = mode != BnMode::eval;
  if (use_batch && n < 2) throw InvalidArgument("batchnorm1d: batch statistics need more than one sample per channel");
  if (!use_batch && (!stats.ready() || stats.mean.size() != c)) {
    throw InvalidArgument("batchnorm1d: eval mode with uninitialized running statistics");
  }
  if (mode == BnMode::train && (!stats.ready() || stats.mean.size() != c)) stats = BatchNormStats::initialized(c);

  auto xhat = std::make_shared<std::vector<double>>(xv.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  Tensor out(xv.shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (use_batch) {
      double s = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* p = xv.data.data() + (b * c + ch) * t;
        for (std::size_t i = 0; i < t; ++i) s += p[i];
      }
      mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* p = xv.data.data() + (b * c + ch) * t;
        for (std::size_t i = 0; i < t; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(n);
      if (mode == BnMode::train) {
        stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mu;
        stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * ss / static_cast<double>(n - 1);
      }
    } else {
      mu = stats.mean[ch];
      var = stats.var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = (b * c + ch) * t;
      for (std::size_t i = 0; i < t; ++i) {
        const double xh = (xv.data[off + i] - mu) * is;
        (*xhat)[off + i] = xh;
        out.data[off + i] = gv[ch] * xh + bv[ch];
      }
    }
  }

  return x.graph->record(
      std::move(out), {x.id, gamma.id, beta.id},
      [xi = x.id, gi = gamma.id, bi = beta.id, xhat, inv_std, nb, c, t, n, use_batch](Graph& g, int self) {
        const auto& go = g.out_grad(self);
        const auto& gv = g.value(gi).data;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * c + ch) * t;
            for (std::size_t i = 0; i < t; ++i) {
              sum_dy += go[off + i];
              sum_dy_xh += go[off + i] * (*xhat)[off + i];
            }
          }
          if (g.needs_grad(gi)) g.grad_buffer(gi)[ch] += sum_dy_xh;
          if (g.needs_grad(bi)) g.grad_buffer(bi)[ch] += sum_dy;
          if (!g.needs_grad(xi)) continue;
          auto& gx = g.grad_buffer(xi);
          const double k = gv[ch] * (*inv_std)[ch];
          const double mean_dy = sum_dy / static_cast<double>(n);
          const double mean_dy_xh = sum_dy_xh / static_cast<double>(n);
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * c + ch) * t;
            for (std::size_t i = 0; i < t; ++i) {
              gx[off + i] += use_batch ? k * (go[off + i] - mean_dy - (*xhat)[off + i] * mean_dy_xh)
                                       : k * go[off + i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Activations

namespace {
constexpr double kGeluC = 0.7978845608;
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = gelu_value(xv.data[i]);
  return x.graph->record(std::move(out), {x.id}, [xi = x.id](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& xd = g.value(xi).data;
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double v = xd[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += go[i] * d;
    }
  });
}

Var dropout(Var x, double p, bool train, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  const Tensor& xv = x.value();
  auto mask = std::make_shared<std::vector<double>>(xv.numel());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    (*mask)[i] = u(rng) < p ? 0.0 : keep_scale;
    out.data[i] = xv.data[i] * (*mask)[i];
  }
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, mask](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Rotations

Var so3_exp(Var v) {
  const Tensor& vv = v.value();
  require_shape(vv.rank() == 2 && vv.dim(1) == 3, "so3_exp: expected [N, 3], got " + shape_str(vv.shape));
  const std::size_t n = vv.dim(0);
  Tensor out({n, 3, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 phi(vv.data[3 * i], vv.data[3 * i + 1], vv.data[3 * i + 2]);
    Map3(out.data.data() + 9 * i) = so3::exp(phi).matrix();
  }
  return v.graph->record(std::move(out), {v.id}, [vi = v.id, n](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& vd = g.value(vi).data;
    const auto& rd = g.value(self).data;
    auto& gv = g.grad_buffer(vi);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 phi(vd[3 * i], vd[3 * i + 1], vd[3 * i + 2]);
      const Mat3 a = CMap3(rd.data() + 9 * i).transpose() * CMap3(go.data() + 9 * i);
      const Vec3 w(a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1));
      const Vec3 d = so3::right_jacobian(phi).transpose() * w;
      for (int c = 0; c < 3; ++c) gv[3 * i + c] += d[c];
    }
  });
}

Var so3_log(Var r) {
  const Tensor& rv = r.value();
  require_shape(rv.rank() == 3 && rv.dim(1) == 3 && rv.dim(2) == 3, "so3_log: expected [N, 3, 3]");
  const std::size_t n = rv.dim(0);
  Tensor out({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 phi = so3::log_unchecked(so3::Mat3(CMap3(rv.data.data() + 9 * i)));
    for (int c = 0; c < 3; ++c) out.data[3 * i + c] = phi[c];
  }
  return r.graph->record(std::move(out), {r.id}, [ri = r.id, n](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& rd = g.value(ri).data;
    const auto& phid = g.value(self).data;
    auto& gr = g.grad_buffer(ri);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 phi(phid[3 * i], phid[3 * i + 1], phid[3 * i + 2]);
      const Vec3 up(go[3 * i], go[3 * i + 1], go[3 * i + 2]);
      const Vec3 u = so3::right_jacobian_inverse(phi).transpose() * up;
      const Mat3 gm = 0.5 * CMap3(rd.data() + 9 * i) * Mat3(so3::hat(u));
      Map3(gr.data() + 9 * i) += gm;
    }
  });
}

Var pair_products(Var r) {
  const Tensor& rv = r.value();
  require_shape(rv.rank() == 3 && rv.dim(1) == 3 && rv.dim(2) == 3, "pair_products: expected [N, 3, 3]");
  require_shape(rv.dim(0) % 2 == 0, "pair_products: odd number of rotations");
  const std::size_t m = rv.dim(0) / 2;
  Tensor out({m, 3, 3});
  for (std::size_t i = 0; i < m; ++i) {
    Map3(out.data.data() + 9 * i).noalias() =
        CMap3(rv.data.data() + 18 * i) * CMap3(rv.data.data() + 18 * i + 9);
  }
  return r.graph->record(std::move(out), {r.id}, [ri = r.id, m](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& rd = g.value(ri).data;
    auto& gr = g.grad_buffer(ri);
    for (std::size_t i = 0; i < m; ++i) {
      CMap3 dc(go.data() + 9 * i);
      CMap3 a(rd.data() + 18 * i);
      CMap3 b(rd.data() + 18 * i + 9);
      Map3(gr.data() + 18 * i).noalias() += dc * b.transpose();
      Map3(gr.data() + 18 * i + 9).noalias() += a.transpose() * dc;
    }
  });
}

Var matmul3(Var a, Var b, bool ta, bool tb) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_shape(av.rank() == 3 && av.dim(1) == 3 && av.dim(2) == 3 && bv.shape == av.shape,
                "matmul3: expected matching [N, 3, 3] operands");
  const std::size_t n = av.dim(0);
  Tensor out({n, 3, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const Mat3 x = ta ? Mat3(CMap3(av.data.data() + 9 * i).transpose()) : Mat3(CMap3(av.data.data() + 9 * i));
    const Mat3 y = tb ? Mat3(CMap3(bv.data.data() + 9 * i).transpose()) : Mat3(CMap3(bv.data.data() + 9 * i));
    Map3(out.data.data() + 9 * i).noalias() = x * y;
  }
  return a.graph->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, ta, tb, n](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& ad_ = g.value(ai).data;
    const auto& bd = g.value(bi).data;
    for (std::size_t i = 0; i < n; ++i) {
      CMap3 dc(go.data() + 9 * i);
      const Mat3 x = ta ? Mat3(CMap3(ad_.data() + 9 * i).transpose()) : Mat3(CMap3(ad_.data() + 9 * i));
      const Mat3 y = tb ? Mat3(CMap3(bd.data() + 9 * i).transpose()) : Mat3(CMap3(bd.data() + 9 * i));
      if (g.needs_grad(ai)) {
        const Mat3 dx = dc * y.transpose();
        Map3(g.grad_buffer(ai).data() + 9 * i) += ta ? Mat3(dx.transpose()) : dx;
      }
      if (g.needs_grad(bi)) {
        const Mat3 dy = x.transpose() * dc;
        Map3(g.grad_buffer(bi).data() + 9 * i) += tb ? Mat3(dy.transpose()) : dy;
      }
    }
  });
}

double huber_value(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

Var huber(Var x, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("huber: delta must be > 0");
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = huber_value(xv.data[i], delta);
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, delta](Graph& g, int self) {
    const auto& go = g.out_grad(self);
    const auto& xd = g.value(xi).data;
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double v = xd[i];
      const double d = std::abs(v) <= delta ? v : (v > 0.0 ? delta : -delta);
      gx[i] += go[i] * d;
    }
  });
}

}  // namespace gyrodenoise::ad
