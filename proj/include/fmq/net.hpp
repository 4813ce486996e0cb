#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fmq/rng.hpp"
#include "fmq/tape.hpp"

namespace fmq {

// One network input. Vector slots enter as-is; time slots are scalars lifted
// to a fixed sinusoidal embedding before concatenation.
struct SlotSpec {
  enum class Kind { kVector, kTime };
  Kind kind = Kind::kVector;
  int width = 0;  // vector width, or embedded width for time slots

  static SlotSpec vec(int w) { return {Kind::kVector, w}; }
  static SlotSpec time(int embed_dim) { return {Kind::kTime, embed_dim}; }
};

struct MlpConfig {
  std::vector<SlotSpec> slots;
  std::vector<int> hidden;
  int out = 1;
  bool layer_norm = false;          // hidden layers only
  bool layer_norm_after_act = false;
  float fourier_fmin = 1.0f;
  float fourier_fmax = 5.0f;

  int input_width() const {
    int w = 0;
    for (const auto& s : slots) w += s.width;
    return w;
  }
};

// Dense MLP with GELU hidden activations and an identity output layer.
class MlpNet {
 public:
  MlpNet() = default;
  MlpNet(MlpConfig cfg, Rng& rng, std::string param_prefix);

  const MlpConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  void zero_grad();

  // Plain evaluation. Vector slots: [B, width]; time slots: [B, 1].
  DenseArray forward(std::span<const DenseArray> slots) const;

  struct JvpOut {
    DenseArray value;
    DenseArray tangent;
  };
  // Directional derivative along per-slot tangents (empty array = zero
  // tangent; time slots take [B,1] scalar tangents).
  JvpOut forward_jvp(std::span<const DenseArray> slots,
                     std::span<const DenseArray> tangents) const;

  Tensor forward_tape(Tape& tape, std::span<const Tensor> slots) const;
  // Forward-mode pair on the tape: the tangent graph is recorded with the
  // same primitives, so reverse mode can differentiate through it.
  Dual forward_tape_dual(Tape& tape, std::span<const Dual> slots) const;

  MlpNet clone(const std::string& new_prefix) const;
  void copy_values_from(const MlpNet& other);
  uint64_t value_hash() const;

  void for_each_param(const std::function<void(Param&)>& fn);
  void for_each_param(const std::function<void(const Param&)>& fn) const;

 private:
  struct Layer {
    Param w, b;
    Param ln_gain, ln_bias;
    bool has_ln = false;
    bool gelu = false;
  };

  void check_slots(std::span<const DenseArray> slots) const;
  DenseArray assemble_input(std::span<const DenseArray> slots) const;

  MlpConfig cfg_;
  std::string prefix_;
  std::vector<FourierBasis> bases_;  // one per time slot, in slot order
  std::vector<Layer> layers_;
};

// Runs `build_loss` on a fresh tape, backpropagates, and accumulates
// parameter gradients. Returns the loss value.
double grad(MlpNet& net, const std::function<Tensor(Tape&)>& build_loss);

}  // namespace fmq
