#include "partrag/optim.hpp"

#include <cmath>
#include <numbers>

#include "partrag/errors.hpp"

namespace partrag {

double scheduled_lr(const AdamWConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps == 0 || cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps) /
               static_cast<double>(cfg.total_steps - cfg.warmup_steps));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParameterSet& params, AdamWConfig cfg, Multiplier multiplier)
    : params_(params), cfg_(cfg) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_.at(i);
    mult_.push_back(multiplier ? multiplier(p.name) : 1.0);
    Tensor z = p.value;
    std::fill(z.data().begin(), z.data().end(), 0.0);
    m_.push_back(z);
    v_.push_back(z);
  }
}

double AdamW::step() {
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (mult_[i] == 0.0) continue;
    for (double g : params_.at(i).grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("AdamW: non-finite gradient norm");
  const double clip =
      (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  const double lr = scheduled_lr(cfg_, t_);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_.at(i);
    const double rate = lr * mult_[i];
    if (rate != 0.0) {
      auto w = p.value.data();
      auto g = p.grad.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
      }
    }
    p.zero_grad();
  }
  return norm;
}

void momentum_update(ParameterSet& shadow, const ParameterSet& online, double m) {
  if (shadow.size() != online.size()) {
    throw DimensionError("momentum_update: parameter sets differ in size");
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    auto& s = shadow.at(i);
    const auto& o = online.at(i);
    if (s.name != o.name || !s.value.same_shape(o.value) ||
        s.value.size() != o.value.size()) {
      throw DimensionError("momentum_update: shape mismatch at " + s.name);
    }
    auto sv = s.value.data();
    auto ov = o.value.data();
    for (std::size_t j = 0; j < sv.size(); ++j) sv[j] = m * sv[j] + (1.0 - m) * ov[j];
  }
}

}  // namespace partrag
