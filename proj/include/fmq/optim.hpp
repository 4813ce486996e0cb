#pragma once

#include <span>
#include <vector>

#include "fmq/tape.hpp"

namespace fmq {

struct AdamConfig {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction over a fixed parameter group.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param*> params, AdamConfig cfg);

  // Applies one update from the accumulated Param gradients, then increments
  // the step counter. Throws NumericError on non-finite gradients.
  void step();
  int64_t steps() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }

 private:
  struct Moments {
    DenseArray m, v;
  };
  AdamConfig cfg_;
  std::vector<Param*> params_;
  std::vector<Moments> moments_;
  int64_t step_count_ = 0;
};

// target <- (1 - tau) * target + tau * online, elementwise.
void ema_update(std::span<Param* const> target, std::span<const Param* const> online,
                float tau);

}  // namespace fmq
