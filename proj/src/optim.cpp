#include "fmq/optim.hpp"

#include <cmath>

namespace fmq {

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : cfg_(cfg), params_(std::move(params)) {
  moments_.reserve(params_.size());
  for (Param* p : params_)
    moments_.push_back({DenseArray(p->value.shape, 0.0f), DenseArray(p->value.shape, 0.0f)});
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_count_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Param& p = *params_[pi];
    Moments& mo = moments_[pi];
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const float g = p.grad.data[i];
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
      float& m = mo.m.data[i];
      float& v = mo.v.data[i];
      m = cfg_.beta1 * m + (1.0f - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0f - cfg_.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p.value.data[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

void ema_update(std::span<Param* const> target, std::span<const Param* const> online,
                float tau) {
  if (!(tau > 0.0f && tau <= 1.0f)) throw DomainError("ema tau must be in (0, 1]");
  if (target.size() != online.size()) throw ConfigError("ema parameter group mismatch");
  for (size_t i = 0; i < target.size(); ++i) {
    DenseArray& t = target[i]->value;
    const DenseArray& o = online[i]->value;
    if (!t.same_shape(o)) throw ConfigError("ema parameter shape mismatch");
    for (size_t j = 0; j < t.data.size(); ++j)
      t.data[j] = (1.0f - tau) * t.data[j] + tau * o.data[j];
  }
}

}  // namespace fmq
