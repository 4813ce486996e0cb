#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmq/dense.hpp"

namespace fmq {

// Trainable tensor with a persistent gradient accumulator.
struct Param {
  std::string name;
  DenseArray value;
  DenseArray grad;

  Param() = default;
  Param(std::string n, DenseArray v) : name(std::move(n)), value(std::move(v)) {
    grad = DenseArray(value.shape, 0.0f);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

// Fixed sinusoidal basis for scalar time inputs: per frequency f, the pair
// [sin(2*pi*f*t), cos(2*pi*f*t)]. Frequencies are log-spaced in [fmin, fmax].
struct FourierBasis {
  int dim = 0;  // total embedded width, 2 * freqs.size()
  std::vector<float> freqs;

  static FourierBasis make(int dim, float fmin = 1.0f, float fmax = 5.0f);
};

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  kLeaf,
  kMatMul,
  kAddBias,
  kAdd,
  kSub,
  kMul,
  kRowScale,
  kScale,
  kGelu,
  kGeluGrad,
  kLayerNorm,
  kFourier,
  kFourierDt,
  kConcat,
  kSumSqMean,
};

// Define-by-run computation tape over DenseArray values. Node values are
// computed eagerly; backward() walks the recorded graph once in reverse and
// accumulates parameter gradients into the bound Param objects.
class Tape {
 public:
  Tensor param(Param& p);
  Tensor constant(DenseArray v);
  // Leaf whose gradient is retained so callers can read input gradients.
  Tensor input(DenseArray v);

  Tensor matmul(Tensor a, Tensor b);
  Tensor add_bias(Tensor x, Tensor bias);
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  // y[i,j] = x[i,j] * s[i], s has shape [rows, 1].
  Tensor row_scale(Tensor x, Tensor s);
  Tensor scale(Tensor x, float c);
  Tensor gelu(Tensor x);
  // Elementwise derivative of gelu, as a first-class differentiable value.
  Tensor gelu_grad(Tensor x);
  Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, float eps = 1e-5f);
  Tensor fourier(Tensor t, const FourierBasis& basis);
  // d/dt of the fourier embedding. Input gradients do not flow through it.
  Tensor fourier_dt(Tensor t, const FourierBasis& basis);
  Tensor concat(std::span<const Tensor> parts);
  // Mean over rows of the squared row L2 norm: (1/rows) * sum(x^2), f64 accum.
  Tensor sum_sq_mean(Tensor x);
  Tensor detach(Tensor x);

  const DenseArray& value(Tensor t) const { return val(t.id); }
  // Valid after backward(); zero-shaped if the node never received gradient.
  const DenseArray& grad(Tensor t) const { return nodes_[t.id].grad; }
  double scalar(Tensor t) const;

  void backward(Tensor loss);
  void reset();
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    bool needs_grad = false;
    int p0 = -1, p1 = -1, p2 = -1;
    int list_begin = 0, list_count = 0;
    float fparam = 0.0f;
    Param* bound = nullptr;
    const FourierBasis* basis = nullptr;
    DenseArray value;
    DenseArray grad;
    DenseArray aux;
  };

  const DenseArray& val(int id) const {
    const Node& n = nodes_[id];
    return n.bound ? n.bound->value : n.value;
  }
  DenseArray& grad_buf(int id);
  Tensor push(Node n);
  Tensor wrap(int id) { return Tensor{this, id}; }
  void backward_node(int id);

  std::vector<Node> nodes_;
  std::vector<int> concat_pool_;
  std::unordered_map<const Param*, int> param_leaves_;
};

// Forward-mode value/tangent pair built from tape primitives, so tangents stay
// differentiable by the reverse pass. An invalid tangent is a structural zero.
struct Dual {
  Tensor primal;
  Tensor tangent;
};

float gelu_scalar(float x);
float gelu_grad_scalar(float x);
float gelu_hess_scalar(float x);

}  // namespace fmq
