#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "partrag/rng.hpp"

namespace partrag {

/// Dense row-major tensor of 64-bit reals. Rank 1 or 2; all ops treat a
/// rank-1 tensor of length n as a 1 x n row.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::span<const double> values);
  static Tensor identity(std::size_t n);
  static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng,
                      double stddev = 1.0);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  std::span<double> row_span(std::size_t r);
  std::span<const double> row_span(std::size_t r) const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const;

  /// Bit-exact equality of shape and payload.
  bool bit_equal(const Tensor& other) const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const Tensor& t);

/// Named trainable tensor. `grad` accumulates across backward passes until
/// zero_grad().
struct Parameter {
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;
  void zero_grad();
};

/// Ordered collection of parameters with stable addresses.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Parameter& at(std::size_t i) { return *params_[i]; }
  const Parameter& at(std::size_t i) const { return *params_[i]; }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Copies values from `other`; names and shapes must match.
  void assign_values(const ParameterSet& other);
  /// Appends all parameters of `other` with `prefix` prepended to their names.
  void append(const std::string& prefix, const ParameterSet& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward() walks them once in reverse. A graph is single-threaded;
/// independent graphs may run on independent threads.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient of the last backward() output w.r.t. `v` (zeros if untouched).
  Tensor grad(Var v) const;

  void backward(Var scalar_output);
  /// Adds leaf gradients into their bound Parameter::grad.
  void accumulate_param_grads() const;

  std::size_t node_count() const { return nodes_.size(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Used by op implementations.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  void add_grad(Var v, const Tensor& g);
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must belong to the same graph.

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a[r x c] + row[1 x c] broadcast over rows.
Var add_row(Var a, Var row);
/// a[r x c] * col[r x 1] broadcast over columns.
Var mul_col(Var a, Var col);

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
/// x W + b; `bias` may be a default-constructed Var (no bias).
Var linear(Var x, Var w, Var bias);

Var relu(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
/// Column-wise mean over rows: [r x c] -> [1 x c].
Var mean_rows(Var a);
/// Column-wise max over rows: [r x c] -> [1 x c]; first maximum wins ties.
Var max_rows(Var a);
/// Row-wise sum: [r x c] -> [r x 1].
Var sum_cols(Var a);

Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
/// Repeats a [1 x c] row `count` times.
Var repeat_row(Var row, std::size_t count);

/// Per-row softmax with the row maximum subtracted before exponentiation.
Var softmax_rows(Var logits);
Var log_softmax_rows(Var logits);
/// Unit Euclidean norm per row; throws DegenerateInputError on a zero row.
Var l2_normalize_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Multi-head scaled dot-product attention. q: [n x w], k, v: [m x w].
/// With group > 0 the attention is block-diagonal: row i attends only to
/// rows of the same contiguous block of `group` rows (requires n == m).
Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t group = 0);

Var mse(Var a, Var b);
/// Mean cross-entropy of row logits against integer class targets.
Var cross_entropy(Var logits, const std::vector<std::size_t>& targets);

}  // namespace ops

/// Plain (non-differentiable) helpers on tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_stable(const Tensor& logits);
Tensor l2_normalize(const Tensor& v);

/// Central-difference gradient check.
///
/// `f` must build a scalar on the given graph from the leaf it receives.
/// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& params,
                  double h = 1e-5);

/// Same check over parameters of a set. `f` builds the scalar output using
/// g.param(...) for the set's parameters. At most `coords_per_param`
/// coordinates are probed per parameter (chosen by `rng`); 0 probes all.
double grad_check(const std::function<Var(Graph&)>& f, ParameterSet& params,
                  std::size_t coords_per_param, Rng& rng, double h = 1e-5);

}  // namespace partrag
