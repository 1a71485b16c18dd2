#include "partrag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "partrag/errors.hpp"
#include "partrag/kernels.hpp"

namespace partrag {

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 2) {
    throw DimensionError("tensor rank must be 1 or 2");
  }
  std::size_t n = 1;
  for (auto s : shape_) n *= s;
  if (n != data_.size()) {
    throw DimensionError("tensor payload length " + std::to_string(data_.size()) +
                         " does not match shape product " + std::to_string(n));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Tensor t(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    for (double v : row) t.data_[i++] = v;
  }
  return t;
}

Tensor Tensor::row(std::span<const double> values) {
  Tensor t(1, values.size());
  std::copy(values.begin(), values.end(), t.data_.begin());
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::randn(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Tensor t(rows, cols);
  for (auto& v : t.data_) v = stddev * rng.normal();
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return shape_.size() == 2 ? shape_[0] : 1;
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  return shape_.back();
}

std::span<double> Tensor::row_span(std::size_t r) {
  return std::span<double>(data_).subspan(r * cols(), cols());
}

std::span<const double> Tensor::row_span(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * cols(), cols());
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

bool Tensor::same_shape(const Tensor& other) const {
  return rows() == other.rows() && cols() == other.cols();
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(double)) == 0);
}

std::string shape_string(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) os << "x";
    os << t.shape()[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Parameters

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(value) {
  zero_grad();
}

void Parameter::zero_grad() { std::fill(grad.data().begin(), grad.data().end(), 0.0); }

ParameterSet::ParameterSet(const ParameterSet& other) {
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    params_.clear();
    for (const auto& p : other.params_)
      params_.push_back(std::make_unique<Parameter>(*p));
  }
  return *this;
}

Parameter& ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
  return *params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw ConfigError("unknown parameter: " + name);
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw ConfigError("unknown parameter: " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p->name == name; });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParameterSet::assign_values(const ParameterSet& other) {
  if (other.size() != size()) throw DimensionError("parameter set size mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    if (params_[i]->name != other.at(i).name ||
        !params_[i]->value.same_shape(other.at(i).value)) {
      throw DimensionError("parameter mismatch at " + params_[i]->name);
    }
    params_[i]->value = other.at(i).value;
  }
}

void ParameterSet::append(const std::string& prefix, const ParameterSet& other) {
  for (std::size_t i = 0; i < other.size(); ++i)
    add(prefix + other.at(i).name, other.at(i).value);
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, true, &p});
  return Var{this, nodes_.size() - 1};
}

Tensor Graph::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.empty()) {
    Tensor z = n.value;
    std::fill(z.data().begin(), z.data().end(), 0.0);
    return z;
  }
  return n.grad;
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg,
                        nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg,
                        nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.empty()) {
    n.grad = n.value;
    std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
  }
  return n.grad;
}

void Graph::add_grad(Var v, const Tensor& g) {
  if (!nodes_[v.id].requires_grad) return;
  auto& buf = grad_buffer(v);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::backward(Var out) {
  if (nodes_[out.id].value.size() != 1) {
    throw DimensionError("backward() needs a scalar output, got " +
                         shape_string(nodes_[out.id].value));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[out.id].requires_grad) return;
  nodes_[out.id].grad = nodes_[out.id].value;
  nodes_[out.id].grad[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

void Graph::accumulate_param_grads() const {
  for (const auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto dst = n.param->grad.data();
    auto src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

Tensor zeros_like(const Tensor& t) { return Tensor(t.rows(), t.cols()); }

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw DimensionError("vars belong to different graphs");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) +
                         " vs " + shape_string(b));
  }
}

template <typename F, typename D>
Var unary(Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y = zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.graph->record(std::move(y), {a}, [a, df](Graph& g, const Tensor& dy) {
    const Tensor& x = g.value(a);
    Tensor dx = zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * df(x[i]);
    g.add_grad(a, dx);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

namespace ops {

Var add(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    g.add_grad(a, dy);
    g.add_grad(b, dy);
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    g.add_grad(a, dy);
    Tensor neg = dy;
    for (auto& v : neg.data()) v = -v;
    g.add_grad(b, neg);
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (g.requires_grad(a)) {
      Tensor da = zeros_like(av);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = dy[i] * bv[i];
      g.add_grad(a, da);
    }
    if (g.requires_grad(b)) {
      Tensor db = zeros_like(bv);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = dy[i] * av[i];
      g.add_grad(b, db);
    }
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= s;
  return a.graph->record(std::move(y), {a}, [a, s](Graph& g, const Tensor& dy) {
    Tensor dx = dy;
    for (auto& v : dx.data()) v *= s;
    g.add_grad(a, dx);
  });
}

Var add_scalar(Var a, double s) {
  Tensor y = a.value();
  for (auto& v : y.data()) v += s;
  return a.graph->record(std::move(y), {a},
                         [a](Graph& g, const Tensor& dy) { g.add_grad(a, dy); });
}

Var add_row(Var a, Var row) {
  require_same_graph(a, row);
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  if (r.size() != x.cols()) throw DimensionError("add_row: width mismatch");
  Tensor y = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(i, j) + r[j];
  return a.graph->record(std::move(y), {a, row}, [a, row](Graph& g, const Tensor& dy) {
    g.add_grad(a, dy);
    if (g.requires_grad(row)) {
      Tensor dr = g.value(row);
      std::fill(dr.data().begin(), dr.data().end(), 0.0);
      for (std::size_t i = 0; i < dy.rows(); ++i)
        for (std::size_t j = 0; j < dy.cols(); ++j) dr[j] += dy(i, j);
      g.add_grad(row, dr);
    }
  });
}

Var mul_col(Var a, Var col) {
  require_same_graph(a, col);
  const Tensor& x = a.value();
  const Tensor& c = col.value();
  if (c.size() != x.rows()) throw DimensionError("mul_col: height mismatch");
  Tensor y = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(i, j) * c[i];
  return a.graph->record(std::move(y), {a, col}, [a, col](Graph& g, const Tensor& dy) {
    const Tensor& x = g.value(a);
    const Tensor& c = g.value(col);
    if (g.requires_grad(a)) {
      Tensor dx = zeros_like(x);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) dx(i, j) = dy(i, j) * c[i];
      g.add_grad(a, dx);
    }
    if (g.requires_grad(col)) {
      Tensor dc = c;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += dy(i, j) * x(i, j);
        dc[i] = s;
      }
      g.add_grad(col, dc);
    }
  });
}

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.cols() != w.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(x) + " * " +
                         shape_string(w));
  }
  Tensor y(x.rows(), w.cols());
  kernels::matmul(x.data(), w.data(), y.data(), x.rows(), x.cols(), w.cols());
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    const Tensor& x = g.value(a);
    const Tensor& w = g.value(b);
    if (g.requires_grad(a)) {
      Tensor dx(x.rows(), x.cols());
      kernels::matmul_nt(dy.data(), w.data(), dx.data(), dy.rows(), dy.cols(), w.rows());
      g.add_grad(a, dx);
    }
    if (g.requires_grad(b)) {
      Tensor dw(w.rows(), w.cols());
      kernels::matmul_tn(x.data(), dy.data(), dw.data(), x.rows(), x.cols(), dy.cols());
      g.add_grad(b, dw);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.cols() != w.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(x) +
                         " * " + shape_string(w) + "^T");
  }
  Tensor y(x.rows(), w.rows());
  kernels::matmul_nt(x.data(), w.data(), y.data(), x.rows(), x.cols(), w.rows());
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    const Tensor& x = g.value(a);
    const Tensor& w = g.value(b);
    if (g.requires_grad(a)) {
      Tensor dx(x.rows(), x.cols());
      kernels::matmul(dy.data(), w.data(), dx.data(), dy.rows(), dy.cols(), w.cols());
      g.add_grad(a, dx);
    }
    if (g.requires_grad(b)) {
      Tensor dw(w.rows(), w.cols());
      kernels::matmul_tn(dy.data(), x.data(), dw.data(), dy.rows(), dy.cols(), x.cols());
      g.add_grad(b, dw);
    }
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(j, i) = x(i, j);
  return a.graph->record(std::move(y), {a}, [a](Graph& g, const Tensor& dy) {
    Tensor dx(dy.cols(), dy.rows());
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) dx(j, i) = dy(i, j);
    g.add_grad(a, dx);
  });
}

Var linear(Var x, Var w, Var bias) {
  Var y = matmul(x, w);
  return bias.graph == nullptr ? y : add_row(y, bias);
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  return unary(
      a,
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
      },
      [](double x) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        const double th = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var softplus(Var a) {
  return unary(
      a, [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); },
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor(1, 1, s), {a}, [a](Graph& g, const Tensor& dy) {
    Tensor dx = zeros_like(g.value(a));
    std::fill(dx.data().begin(), dx.data().end(), dy[0]);
    g.add_grad(a, dx);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a) {
  const Tensor& x = a.value();
  Tensor y(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y[j] += x(i, j);
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (auto& v : y.data()) v *= inv;
  return a.graph->record(std::move(y), {a}, [a, inv](Graph& g, const Tensor& dy) {
    Tensor dx = zeros_like(g.value(a));
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) = dy[j] * inv;
    g.add_grad(a, dx);
  });
}

Var max_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rows() == 0) throw DimensionError("max_rows of empty tensor");
  Tensor y(1, x.cols());
  std::vector<std::size_t> arg(x.cols(), 0);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double best = x(0, j);
    for (std::size_t i = 1; i < x.rows(); ++i) {
      if (x(i, j) > best) {
        best = x(i, j);
        arg[j] = i;
      }
    }
    y[j] = best;
  }
  return a.graph->record(std::move(y), {a},
                         [a, arg = std::move(arg)](Graph& g, const Tensor& dy) {
                           Tensor dx = zeros_like(g.value(a));
                           for (std::size_t j = 0; j < arg.size(); ++j)
                             dx(arg[j], j) += dy[j];
                           g.add_grad(a, dx);
                         });
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
    y[i] = s;
  }
  return a.graph->record(std::move(y), {a}, [a](Graph& g, const Tensor& dy) {
    Tensor dx = zeros_like(g.value(a));
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) = dy[i];
    g.add_grad(a, dx);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  if (begin + count > x.rows()) throw DimensionError("slice_rows out of range");
  Tensor y(count, x.cols());
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()),
              count * x.cols(), y.data().begin());
  return a.graph->record(std::move(y), {a}, [a, begin](Graph& g, const Tensor& dy) {
    Tensor& buf = g.grad_buffer(a);
    const std::size_t off = begin * buf.cols();
    for (std::size_t i = 0; i < dy.size(); ++i) buf[off + i] += dy[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  if (begin + count > x.cols()) throw DimensionError("slice_cols out of range");
  Tensor y(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) y(i, j) = x(i, begin + j);
  return a.graph->record(std::move(y), {a}, [a, begin](Graph& g, const Tensor& dy) {
    Tensor& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) buf(i, begin + j) += dy(i, j);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: width mismatch");
    r += p.rows();
  }
  Tensor y(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              y.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return parts[0].graph->record(std::move(y), parts, [parts](Graph& g, const Tensor& dy) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = g.value(p).size();
      if (g.requires_grad(p)) {
        Tensor& buf = g.grad_buffer(p);
        for (std::size_t i = 0; i < n; ++i) buf[i] += dy[off + i];
      }
      off += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: height mismatch");
    c += p.cols();
  }
  Tensor y(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) y(i, off + j) = v(i, j);
    off += v.cols();
  }
  return parts[0].graph->record(std::move(y), parts, [parts](Graph& g, const Tensor& dy) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t w = g.value(p).cols();
      if (g.requires_grad(p)) {
        Tensor& buf = g.grad_buffer(p);
        for (std::size_t i = 0; i < buf.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) buf(i, j) += dy(i, off + j);
      }
      off += w;
    }
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  const Tensor& x = a.value();
  Tensor y(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw DimensionError("gather_rows index out of range");
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(rows[i], j);
  }
  return a.graph->record(std::move(y), {a}, [a, rows](Graph& g, const Tensor& dy) {
    Tensor& buf = g.grad_buffer(a);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < buf.cols(); ++j) buf(rows[i], j) += dy(i, j);
  });
}

Var repeat_row(Var row, std::size_t count) {
  const Tensor& r = row.value();
  Tensor y(count, r.size());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < r.size(); ++j) y(i, j) = r[j];
  return row.graph->record(std::move(y), {row}, [row](Graph& g, const Tensor& dy) {
    Tensor& buf = g.grad_buffer(row);
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) buf[j] += dy(i, j);
  });
}

Var softmax_rows(Var logits) {
  Tensor y = softmax_stable(logits.value());
  return logits.graph->record(y, {logits}, [logits, y](Graph& g, const Tensor& dy) {
    Tensor dx = zeros_like(y);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * dy(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - dot);
    }
    g.add_grad(logits, dx);
  });
}

Var log_softmax_rows(Var logits) {
  const Tensor& x = logits.value();
  Tensor y = zeros_like(x);
  Tensor p = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += std::exp(x(i, j) - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      y(i, j) = x(i, j) - mx - lz;
      p(i, j) = std::exp(y(i, j));
    }
  }
  return logits.graph->record(std::move(y), {logits},
                              [logits, p = std::move(p)](Graph& g, const Tensor& dy) {
                                Tensor dx = zeros_like(p);
                                for (std::size_t i = 0; i < p.rows(); ++i) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < p.cols(); ++j) s += dy(i, j);
                                  for (std::size_t j = 0; j < p.cols(); ++j)
                                    dx(i, j) = dy(i, j) - p(i, j) * s;
                                }
                                g.add_grad(logits, dx);
                              });
}

Var l2_normalize_rows(Var a) {
  const Tensor& x = a.value();
  Tensor y = l2_normalize(x);
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row_span(i)) s += v * v;
    norms[i] = std::sqrt(s);
  }
  return a.graph->record(
      y, {a}, [a, y, norms = std::move(norms)](Graph& g, const Tensor& dy) {
        Tensor dx = zeros_like(y);
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * dy(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            dx(i, j) = (dy(i, j) - y(i, j) * dot) / norms[i];
        }
        g.add_grad(a, dx);
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& in = x.value();
  const std::size_t r = in.rows();
  const std::size_t c = in.cols();
  if (gain.value().size() != c || bias.value().size() != c) {
    throw DimensionError("layer_norm: affine width mismatch");
  }
  Tensor xhat(r, c);
  std::vector<double> inv_std(r);
  Tensor y(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in(i, j) - mu) * (in(i, j) - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (in(i, j) - mu) * inv_std[i];
      y(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return x.graph->record(
      std::move(y), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& g, const Tensor& dy) {
        const std::size_t r = xhat.rows();
        const std::size_t c = xhat.cols();
        const Tensor& gv = g.value(gain);
        if (g.requires_grad(gain) || g.requires_grad(bias)) {
          Tensor dg(1, c), db(1, c);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              dg[j] += dy(i, j) * xhat(i, j);
              db[j] += dy(i, j);
            }
          g.add_grad(gain, dg);
          g.add_grad(bias, db);
        }
        if (g.requires_grad(x)) {
          Tensor dx(r, c);
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = dy(i, j) * gv[j];
              s1 += dh;
              s2 += dh * xhat(i, j);
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = dy(i, j) * gv[j];
              dx(i, j) = inv_std[i] / n * (n * dh - s1 - xhat(i, j) * s2);
            }
          }
          g.add_grad(x, dx);
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t group) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t n = Q.rows();
  const std::size_t m = K.rows();
  const std::size_t w = Q.cols();
  if (K.cols() != w || V.cols() != w || V.rows() != m) {
    throw DimensionError("attention: q/k/v widths or lengths disagree");
  }
  if (heads == 0 || w % heads != 0) throw DimensionError("attention: heads must divide width");
  if (group > 0 && (n != m || n % group != 0)) {
    throw DimensionError("attention: grouped attention needs n == m divisible by group");
  }
  const std::size_t dh = w / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t span = group > 0 ? group : m;

  // probs[(h * n + i) * span + jj], key index j = lo(i) + jj
  std::vector<double> probs(heads * n * span);
  Tensor out(n, w);
  std::vector<double> row(span);
  const double* qd = Q.data().data();
  const double* kd = K.data().data();
  const double* vd = V.data().data();
  double* od = out.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lo = group > 0 ? (i / group) * group : 0;
      const double* qi = qd + i * w + c0;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t jj = 0; jj < span; ++jj) {
        const double* kj = kd + (lo + jj) * w + c0;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        row[jj] = s * sc;
        mx = std::max(mx, row[jj]);
      }
      double z = 0.0;
      for (std::size_t jj = 0; jj < span; ++jj) {
        row[jj] = std::exp(row[jj] - mx);
        z += row[jj];
      }
      double* p = probs.data() + (h * n + i) * span;
      for (std::size_t jj = 0; jj < span; ++jj) p[jj] = row[jj] / z;
      double* oi = od + i * w + c0;
      for (std::size_t jj = 0; jj < span; ++jj) {
        const double pj = p[jj];
        const double* vj = vd + (lo + jj) * w + c0;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
      }
    }
  }

  return q.graph->record(
      std::move(out), {q, k, v},
      [q, k, v, heads, group, dh, sc, span, probs = std::move(probs)](Graph& g,
                                                                      const Tensor& dO) {
        const Tensor& Q = g.value(q);
        const Tensor& K = g.value(k);
        const Tensor& V = g.value(v);
        const std::size_t n = Q.rows();
        Tensor dQ(Q.rows(), Q.cols()), dK(K.rows(), K.cols()), dV(V.rows(), V.cols());
        std::vector<double> dp(span);
        const std::size_t w = Q.cols();
        const double *qd = Q.data().data(), *kd = K.data().data(), *vd = V.data().data();
        const double* dod = dO.data().data();
        double *dqd = dQ.data().data(), *dkd = dK.data().data(), *dvd = dV.data().data();
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t lo = group > 0 ? (i / group) * group : 0;
            const double* p = probs.data() + (h * n + i) * span;
            const double* doi = dod + i * w + c0;
            double dot = 0.0;
            for (std::size_t jj = 0; jj < span; ++jj) {
              const double* vj = vd + (lo + jj) * w + c0;
              double* dvj = dvd + (lo + jj) * w + c0;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) {
                s += doi[c] * vj[c];
                dvj[c] += p[jj] * doi[c];
              }
              dp[jj] = s;
              dot += p[jj] * s;
            }
            const double* qi = qd + i * w + c0;
            double* dqi = dqd + i * w + c0;
            for (std::size_t jj = 0; jj < span; ++jj) {
              const double ds = p[jj] * (dp[jj] - dot) * sc;
              const double* kj = kd + (lo + jj) * w + c0;
              double* dkj = dkd + (lo + jj) * w + c0;
              for (std::size_t c = 0; c < dh; ++c) {
                dqi[c] += ds * kj[c];
                dkj[c] += ds * qi[c];
              }
            }
          }
        }
        g.add_grad(q, dQ);
        g.add_grad(k, dK);
        g.add_grad(v, dV);
      });
}

Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  if (targets.size() != logits.rows()) throw DimensionError("cross_entropy: target count");
  Var lp = log_softmax_rows(logits);
  Tensor pick(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.cols()) throw DimensionError("cross_entropy: class index");
    pick(i, targets[i]) = -1.0 / static_cast<double>(targets.size());
  }
  return sum(mul(lp, logits.graph->constant(std::move(pick))));
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Plain helpers

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a) + " * " +
                         shape_string(b));
  }
  Tensor c(a.rows(), b.cols());
  kernels::matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor softmax_stable(const Tensor& logits) {
  Tensor y(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      y(i, j) = std::exp(logits(i, j) - mx);
      z += y(i, j);
    }
    for (std::size_t j = 0; j < logits.cols(); ++j) y(i, j) /= z;
  }
  return y;
}

Tensor l2_normalize(const Tensor& v) {
  Tensor y(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double s = 0.0;
    for (double x : v.row_span(i)) s += x * x;
    if (!(s > 0.0)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(i) +
                                 " has zero norm");
    }
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < v.cols(); ++j) y(i, j) = v(i, j) * inv;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double scalar_of(Var out) {
  if (out.value().size() != 1) throw DimensionError("grad_check needs a scalar function");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& params,
                  double h) {
  Tensor analytic;
  {
    Graph g;
    Var p = g.leaf(params);
    Var out = f(g, p);
    scalar_of(out);
    g.backward(out);
    analytic = g.grad(p);
  }
  if (!analytic.all_finite()) throw NumericalError("grad_check: non-finite gradient");
  auto eval = [&](const Tensor& at) {
    Graph g;
    return scalar_of(f(g, g.leaf(at)));
  };
  double worst = 0.0;
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const double fp = eval(probe);
    probe[i] = params[i] - h;
    const double fm = eval(probe);
    probe[i] = params[i];
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

double grad_check(const std::function<Var(Graph&)>& f, ParameterSet& params,
                  std::size_t coords_per_param, Rng& rng, double h) {
  params.zero_grad();
  {
    Graph g;
    Var out = f(g);
    scalar_of(out);
    g.backward(out);
    g.accumulate_param_grads();
  }
  auto eval = [&]() {
    Graph g;
    return scalar_of(f(g));
  };
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params.at(pi);
    if (!p.grad.all_finite()) throw NumericalError("grad_check: non-finite gradient");
    std::vector<std::size_t> coords(p.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords_per_param > 0 && coords.size() > coords_per_param) {
      for (std::size_t i = 0; i < coords_per_param; ++i) {
        const auto j = i + rng.below(coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(coords_per_param);
    }
    for (auto c : coords) {
      const double orig = p.value[c];
      p.value[c] = orig + h;
      const double fp = eval();
      p.value[c] = orig - h;
      const double fm = eval();
      p.value[c] = orig;
      worst = std::max(worst, rel_error(p.grad[c], (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace partrag
