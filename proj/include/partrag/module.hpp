#pragma once

#include <string>
#include <unordered_map>

#include "partrag/tensor.hpp"

namespace partrag {

/// Binds named parameters of a set into one graph, at most once per name.
/// A non-trainable binder inserts values as constants so no gradient flows
/// back into the set (used for momentum encoders and inference).
class Binder {
 public:
  Binder(Graph& g, ParameterSet& params, std::string prefix = {}, bool trainable = true)
      : g_(g), params_(&params), cparams_(&params), prefix_(std::move(prefix)),
        trainable_(trainable) {}
  Binder(Graph& g, const ParameterSet& params, std::string prefix = {})
      : g_(g), cparams_(&params), prefix_(std::move(prefix)) {}

  Var operator()(const std::string& name);
  Graph& graph() { return g_; }
  const ParameterSet& params() const { return *cparams_; }
  const std::string& prefix() const { return prefix_; }
  /// Binder over the same set with a longer prefix.
  Binder sub(const std::string& more) const;

 private:
  Graph& g_;
  ParameterSet* params_ = nullptr;
  const ParameterSet* cparams_;
  std::string prefix_;
  bool trainable_ = false;
  std::unordered_map<std::string, Var> cache_;
};

/// Gaussian init with stddev sqrt(2 / (fan_in + fan_out)).
Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng);

/// Two-layer GELU MLP: in -> hidden -> out, named <name>.w1/.b1/.w2/.b2.
void add_mlp(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
             std::size_t out, Rng& rng);
Var mlp(Binder& b, const std::string& name, Var x);

}  // namespace partrag
