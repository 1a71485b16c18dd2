#include "partrag/module.hpp"

#include <cmath>

namespace partrag {

Var Binder::operator()(const std::string& name) {
  const std::string full = prefix_ + name;
  if (auto it = cache_.find(full); it != cache_.end()) return it->second;
  Var v = trainable_ && params_ != nullptr ? g_.param(params_->get(full))
                                           : g_.constant(cparams_->get(full).value);
  cache_.emplace(full, v);
  return v;
}

Binder Binder::sub(const std::string& more) const {
  if (params_ != nullptr) return Binder(g_, *params_, prefix_ + more, trainable_);
  return Binder(g_, *cparams_, prefix_ + more);
}

Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  return Tensor::randn(rows, cols, rng, std::sqrt(2.0 / static_cast<double>(rows + cols)));
}

void add_mlp(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
             std::size_t out, Rng& rng) {
  ps.add(name + ".w1", glorot(in, hidden, rng));
  ps.add(name + ".b1", Tensor(1, hidden));
  ps.add(name + ".w2", glorot(hidden, out, rng));
  ps.add(name + ".b2", Tensor(1, out));
}

Var mlp(Binder& b, const std::string& name, Var x) {
  Var h = ops::gelu(ops::linear(x, b(name + ".w1"), b(name + ".b1")));
  return ops::linear(h, b(name + ".w2"), b(name + ".b2"));
}

}  // namespace partrag
