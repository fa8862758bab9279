#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gyrodenoise::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  ///< empty until the first backward pass touches it
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(ad::numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t numel() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  void zero_grad() { grad.assign(data.size(), 0.0); }
};

/// Running statistics of a batch-normalization layer. Empty vectors mean
/// "not initialized".
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;

  static BatchNormStats initialized(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
  bool ready() const { return !mean.empty() && mean.size() == var.size(); }
};

enum class BnMode {
  train,        ///< batch statistics, running statistics updated
  eval,         ///< running statistics
  batch_stats,  ///< batch statistics, running statistics untouched
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
};

/// Tape of recorded operations. Nodes are stored in execution order, so
/// iterating backwards visits every node after all of its consumers.
///
/// A Graph belongs to one thread. Parameters are bound by reference; backward()
/// accumulates into Tensor::grad of every bound tensor with requires_grad.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Binds an external tensor. It must outlive the graph.
  Var parameter(Tensor& t);
  Var constant(Tensor t);

  /// Gradient accumulation; throws InvalidArgument unless `loss` is a scalar.
  void backward(Var loss);

  const Tensor& value(int id) const;
  /// Gradient of a node from the most recent backward(); empty if unreached.
  const std::vector<double>& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Op-implementation interface.
  Var record(Tensor value, std::vector<int> parents, BackwardFn fn);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  const std::vector<double>& out_grad(int id) const { return nodes_[id].grad; }
  /// Zero-initialized on first use. Only valid for nodes with needs_grad.
  std::vector<double>& grad_buffer(int id);

 private:
  struct Node {
    Tensor value;
    Tensor* bound = nullptr;
    std::vector<int> parents;
    BackwardFn backward;
    bool needs_grad = false;
    std::vector<double> grad;
  };
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise / structural

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

/// [.., T] -> [.., len], taking elements start..start+len-1 of the last axis.
Var slice_last(Var a, std::size_t start, std::size_t len);
/// [.., 1] -> [.., T]
Var broadcast_last(Var a, std::size_t t);
/// [B, C, T] -> [B, T, C]
Var transpose_last2(Var a);
/// Picks rows (first-axis slices) by index.
Var gather_rows(Var a, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Network layers

/// Causal valid dilated convolution. x: [B, Cin, T] or [Cin, T];
/// w: [Cout, Cin, K]; bias: [Cout] or null (id < 0). Output index t reads
/// inputs t, t + d, ..., t + (K-1) d, so it aligns with input sample
/// t + (K-1) d and only looks backwards from it. T' = T - (K-1) d.
Var conv1d(Var x, Var w, Var bias, int dilation);

/// Normalizes every channel of x: [B, C, T] over the batch and time axes.
Var batchnorm1d(Var x, Var gamma, Var beta, BatchNormStats& stats, BnMode mode,
                double momentum = 0.1, double eps = 1e-5);

/// x Phi(x) with the tanh approximation
/// 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
Var gelu(Var x);
double gelu_value(double x);

/// Train mode zeroes each element with probability p and scales survivors
/// by 1/(1-p). Eval mode (train = false) or p = 0 is the identity.
Var dropout(Var x, double p, bool train, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Rotation ops. Rotations are stored as [N, 3, 3] row-major blocks.

/// [N, 3] rotation vectors -> [N, 3, 3]
Var so3_exp(Var v);
/// [N, 3, 3] -> [N, 3]. Gradient uses the inverse right Jacobian and is exact
/// for perturbations tangent to SO(3).
Var so3_log(Var r);
/// [2M, 3, 3] -> [M, 3, 3], out[m] = r[2m] r[2m+1].
Var pair_products(Var r);
/// [N, 3, 3] x [N, 3, 3] -> op(a) op(b) per item.
Var matmul3(Var a, Var b, bool transpose_a, bool transpose_b);

/// Elementwise Huber: 0.5 x^2 for |x| <= delta, delta (|x| - delta / 2) above.
Var huber(Var x, double delta);
double huber_value(double x, double delta);

}  // namespace gyrodenoise::ad
