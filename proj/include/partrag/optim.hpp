#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "partrag/tensor.hpp"

namespace partrag {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;  // 0 = constant rate after warmup
};

/// Linear warmup followed by cosine decay to zero at total_steps.
double scheduled_lr(const AdamWConfig& cfg, std::size_t step);

/// AdamW over one parameter set. `multiplier(name)` scales the rate per
/// parameter (0 freezes it); the default is 1 for every parameter.
class AdamW {
 public:
  using Multiplier = std::function<double(const std::string& name)>;

  AdamW(ParameterSet& params, AdamWConfig cfg, Multiplier multiplier = {});

  /// Clips, applies one update from the accumulated grads and zeroes them.
  /// Returns the pre-clip global gradient norm.
  double step();

  std::size_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParameterSet& params_;
  AdamWConfig cfg_;
  std::vector<double> mult_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// theta_m <- m * theta_m + (1 - m) * theta_t, elementwise over matching sets.
void momentum_update(ParameterSet& shadow, const ParameterSet& online, double m);

}  // namespace partrag
