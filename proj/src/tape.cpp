#include "fmq/tape.hpp"

#include <cmath>

namespace fmq {

namespace {
constexpr float kInvSqrt2 = 0.7071067811865476f;
constexpr float kInvSqrt2Pi = 0.3989422804014327f;
constexpr double kTwoPi = 6.283185307179586;

inline float norm_cdf(float x) { return 0.5f * (1.0f + std::erff(x * kInvSqrt2)); }
inline float norm_pdf(float x) { return kInvSqrt2Pi * std::exp(-0.5f * x * x); }
}  // namespace

float gelu_scalar(float x) { return x * norm_cdf(x); }
float gelu_grad_scalar(float x) { return norm_cdf(x) + x * norm_pdf(x); }
float gelu_hess_scalar(float x) { return norm_pdf(x) * (2.0f - x * x); }

FourierBasis FourierBasis::make(int dim, float fmin, float fmax) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("fourier embedding dim must be positive and even");
  if (!(fmin > 0.0f) || !(fmax >= fmin)) throw ConfigError("fourier frequency range invalid");
  FourierBasis b;
  b.dim = dim;
  const int m = dim / 2;
  b.freqs.resize(m);
  for (int i = 0; i < m; ++i) {
    const double frac = (m == 1) ? 0.0 : static_cast<double>(i) / (m - 1);
    b.freqs[i] = static_cast<float>(fmin * std::pow(static_cast<double>(fmax) / fmin, frac));
  }
  return b;
}

Tensor Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return wrap(static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::param(Param& p) {
  auto it = param_leaves_.find(&p);
  if (it != param_leaves_.end()) return wrap(it->second);
  Node n;
  n.op = Op::kLeaf;
  n.bound = &p;
  n.needs_grad = true;
  Tensor t = push(std::move(n));
  param_leaves_.emplace(&p, t.id);
  return t;
}

Tensor Tape::constant(DenseArray v) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  n.needs_grad = false;
  return push(std::move(n));
}

Tensor Tape::input(DenseArray v) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  n.needs_grad = true;
  return push(std::move(n));
}

DenseArray& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = DenseArray(val(id).shape, 0.0f);
  return n.grad;
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  const DenseArray& av = val(a.id);
  const DenseArray& bv = val(b.id);
  if (av.cols() != bv.rows()) throw ConfigError("matmul shape mismatch");
  Node n;
  n.op = Op::kMatMul;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  n.value = DenseArray::matrix(av.rows(), bv.cols());
  gemm_nn(av.data.data(), bv.data.data(), n.value.data.data(), av.rows(), av.cols(), bv.cols());
  return push(std::move(n));
}

Tensor Tape::add_bias(Tensor x, Tensor bias) {
  const DenseArray& xv = val(x.id);
  const DenseArray& bv = val(bias.id);
  if (bv.size() != xv.cols()) throw ConfigError("bias width mismatch");
  Node n;
  n.op = Op::kAddBias;
  n.p0 = x.id;
  n.p1 = bias.id;
  n.needs_grad = nodes_[x.id].needs_grad || nodes_[bias.id].needs_grad;
  n.value = xv;
  for (int i = 0; i < xv.rows(); ++i) {
    float* row = n.value.row(i);
    for (int j = 0; j < xv.cols(); ++j) row[j] += bv.data[j];
  }
  return push(std::move(n));
}

Tensor Tape::add(Tensor a, Tensor b) {
  const DenseArray& av = val(a.id);
  const DenseArray& bv = val(b.id);
  if (!av.same_shape(bv)) throw ConfigError("add shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  n.value = av;
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += bv.data[i];
  return push(std::move(n));
}

Tensor Tape::sub(Tensor a, Tensor b) {
  const DenseArray& av = val(a.id);
  const DenseArray& bv = val(b.id);
  if (!av.same_shape(bv)) throw ConfigError("sub shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  n.value = av;
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] -= bv.data[i];
  return push(std::move(n));
}

Tensor Tape::mul(Tensor a, Tensor b) {
  const DenseArray& av = val(a.id);
  const DenseArray& bv = val(b.id);
  if (!av.same_shape(bv)) throw ConfigError("mul shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  n.value = av;
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= bv.data[i];
  return push(std::move(n));
}

Tensor Tape::row_scale(Tensor x, Tensor s) {
  const DenseArray& xv = val(x.id);
  const DenseArray& sv = val(s.id);
  if (sv.rows() != xv.rows() || sv.cols() != 1) throw ConfigError("row_scale expects [rows,1] scale");
  Node n;
  n.op = Op::kRowScale;
  n.p0 = x.id;
  n.p1 = s.id;
  n.needs_grad = nodes_[x.id].needs_grad || nodes_[s.id].needs_grad;
  n.value = xv;
  for (int i = 0; i < xv.rows(); ++i) {
    const float c = sv.data[static_cast<size_t>(i)];
    float* row = n.value.row(i);
    for (int j = 0; j < xv.cols(); ++j) row[j] *= c;
  }
  return push(std::move(n));
}

Tensor Tape::scale(Tensor x, float c) {
  const DenseArray& xv = val(x.id);
  Node n;
  n.op = Op::kScale;
  n.p0 = x.id;
  n.fparam = c;
  n.needs_grad = nodes_[x.id].needs_grad;
  n.value = xv;
  for (auto& v : n.value.data) v *= c;
  return push(std::move(n));
}

Tensor Tape::gelu(Tensor x) {
  const DenseArray& xv = val(x.id);
  Node n;
  n.op = Op::kGelu;
  n.p0 = x.id;
  n.needs_grad = nodes_[x.id].needs_grad;
  n.value = xv;
  for (auto& v : n.value.data) v = gelu_scalar(v);
  return push(std::move(n));
}

Tensor Tape::gelu_grad(Tensor x) {
  const DenseArray& xv = val(x.id);
  Node n;
  n.op = Op::kGeluGrad;
  n.p0 = x.id;
  n.needs_grad = nodes_[x.id].needs_grad;
  n.value = xv;
  for (auto& v : n.value.data) v = gelu_grad_scalar(v);
  return push(std::move(n));
}

Tensor Tape::layer_norm(Tensor x, Tensor gain, Tensor bias, float eps) {
  const DenseArray& xv = val(x.id);
  const DenseArray& gv = val(gain.id);
  const DenseArray& bv = val(bias.id);
  const int cols = xv.cols();
  if (gv.size() != cols || bv.size() != cols) throw ConfigError("layer_norm affine width mismatch");
  Node n;
  n.op = Op::kLayerNorm;
  n.p0 = x.id;
  n.p1 = gain.id;
  n.p2 = bias.id;
  n.fparam = eps;
  n.needs_grad =
      nodes_[x.id].needs_grad || nodes_[gain.id].needs_grad || nodes_[bias.id].needs_grad;
  n.value = DenseArray::matrix(xv.rows(), cols);
  n.aux = DenseArray::matrix(xv.rows(), 2);
  for (int i = 0; i < xv.rows(); ++i) {
    const float* row = xv.row(i);
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += row[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= cols;
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    n.aux.at(i, 0) = static_cast<float>(mu);
    n.aux.at(i, 1) = inv;
    float* out = n.value.row(i);
    for (int j = 0; j < cols; ++j)
      out[j] = gv.data[j] * (row[j] - static_cast<float>(mu)) * inv + bv.data[j];
  }
  return push(std::move(n));
}

Tensor Tape::fourier(Tensor t, const FourierBasis& basis) {
  const DenseArray& tv = val(t.id);
  if (tv.cols() != 1) throw ConfigError("fourier expects [rows,1] input");
  Node n;
  n.op = Op::kFourier;
  n.p0 = t.id;
  n.basis = &basis;
  n.needs_grad = nodes_[t.id].needs_grad;
  const int m = static_cast<int>(basis.freqs.size());
  n.value = DenseArray::matrix(tv.rows(), basis.dim);
  for (int i = 0; i < tv.rows(); ++i) {
    const double ti = tv.data[static_cast<size_t>(i)];
    float* row = n.value.row(i);
    for (int j = 0; j < m; ++j) {
      const double a = kTwoPi * basis.freqs[j] * ti;
      row[2 * j] = static_cast<float>(std::sin(a));
      row[2 * j + 1] = static_cast<float>(std::cos(a));
    }
  }
  return push(std::move(n));
}

Tensor Tape::fourier_dt(Tensor t, const FourierBasis& basis) {
  const DenseArray& tv = val(t.id);
  if (tv.cols() != 1) throw ConfigError("fourier_dt expects [rows,1] input");
  Node n;
  n.op = Op::kFourierDt;
  n.p0 = t.id;
  n.basis = &basis;
  n.needs_grad = false;
  const int m = static_cast<int>(basis.freqs.size());
  n.value = DenseArray::matrix(tv.rows(), basis.dim);
  for (int i = 0; i < tv.rows(); ++i) {
    const double ti = tv.data[static_cast<size_t>(i)];
    float* row = n.value.row(i);
    for (int j = 0; j < m; ++j) {
      const double w = kTwoPi * basis.freqs[j];
      const double a = w * ti;
      row[2 * j] = static_cast<float>(w * std::cos(a));
      row[2 * j + 1] = static_cast<float>(-w * std::sin(a));
    }
  }
  return push(std::move(n));
}

Tensor Tape::concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ConfigError("concat of zero parts");
  int rows = val(parts[0].id).rows();
  int cols = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    const DenseArray& v = val(p.id);
    if (v.rows() != rows) throw ConfigError("concat row mismatch");
    cols += v.cols();
    needs = needs || nodes_[p.id].needs_grad;
  }
  Node n;
  n.op = Op::kConcat;
  n.needs_grad = needs;
  n.list_begin = static_cast<int>(concat_pool_.size());
  n.list_count = static_cast<int>(parts.size());
  for (const Tensor& p : parts) concat_pool_.push_back(p.id);
  n.value = DenseArray::matrix(rows, cols);
  int off = 0;
  for (const Tensor& p : parts) {
    const DenseArray& v = val(p.id);
    for (int i = 0; i < rows; ++i) {
      const float* src = v.row(i);
      float* dst = n.value.row(i) + off;
      for (int j = 0; j < v.cols(); ++j) dst[j] = src[j];
    }
    off += v.cols();
  }
  return push(std::move(n));
}

Tensor Tape::sum_sq_mean(Tensor x) {
  const DenseArray& xv = val(x.id);
  Node n;
  n.op = Op::kSumSqMean;
  n.p0 = x.id;
  n.needs_grad = nodes_[x.id].needs_grad;
  double acc = 0.0;
  for (float v : xv.data) acc += static_cast<double>(v) * v;
  acc /= std::max(1, xv.rows());
  n.value = DenseArray({1});
  n.value.data[0] = static_cast<float>(acc);
  return push(std::move(n));
}

Tensor Tape::detach(Tensor x) {
  Node n;
  n.op = Op::kLeaf;
  n.value = val(x.id);
  n.needs_grad = false;
  return push(std::move(n));
}

double Tape::scalar(Tensor t) const {
  const DenseArray& v = val(t.id);
  if (v.size() != 1) throw ConfigError("scalar() on non-scalar tensor");
  return static_cast<double>(v.data[0]);
}

void Tape::backward(Tensor loss) {
  const DenseArray& lv = val(loss.id);
  if (lv.size() != 1) throw ConfigError("backward expects a scalar loss");
  if (!std::isfinite(lv.data[0])) throw NumericError("non-finite loss value");
  if (!nodes_[loss.id].needs_grad) return;
  grad_buf(loss.id).data[0] = 1.0f;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.data.empty()) continue;
    backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[id];
  const DenseArray& g = n.grad;
  auto wants = [&](int pid) { return pid >= 0 && nodes_[pid].needs_grad; };

  switch (n.op) {
    case Op::kLeaf: {
      if (n.bound) {
        for (size_t i = 0; i < g.data.size(); ++i) n.bound->grad.data[i] += g.data[i];
      }
      return;
    }
    case Op::kMatMul: {
      const DenseArray& a = val(n.p0);
      const DenseArray& b = val(n.p1);
      const int m = a.rows(), k = a.cols(), out = b.cols();
      if (wants(n.p0)) {
        // gA += gY * B^T
        std::vector<float> bt(static_cast<size_t>(k) * out);
        transpose(b.data.data(), bt.data(), k, out);
        gemm_nn_acc(g.data.data(), bt.data(), grad_buf(n.p0).data.data(), m, out, k);
      }
      if (wants(n.p1)) {
        // gB += A^T * gY
        std::vector<float> at(static_cast<size_t>(m) * k);
        transpose(a.data.data(), at.data(), m, k);
        gemm_nn_acc(at.data(), g.data.data(), grad_buf(n.p1).data.data(), k, m, out);
      }
      return;
    }
    case Op::kAddBias: {
      if (wants(n.p0)) {
        DenseArray& gx = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
      }
      if (wants(n.p1)) {
        DenseArray& gb = grad_buf(n.p1);
        const int cols = val(n.p0).cols();
        for (int i = 0; i < g.rows(); ++i) {
          const float* row = g.row(i);
          for (int j = 0; j < cols; ++j) gb.data[j] += row[j];
        }
      }
      return;
    }
    case Op::kAdd: {
      for (int pid : {n.p0, n.p1}) {
        if (!wants(pid)) continue;
        DenseArray& gp = grad_buf(pid);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] += g.data[i];
      }
      return;
    }
    case Op::kSub: {
      if (wants(n.p0)) {
        DenseArray& gp = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] += g.data[i];
      }
      if (wants(n.p1)) {
        DenseArray& gp = grad_buf(n.p1);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] -= g.data[i];
      }
      return;
    }
    case Op::kMul: {
      const DenseArray& a = val(n.p0);
      const DenseArray& b = val(n.p1);
      if (wants(n.p0)) {
        DenseArray& gp = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] += g.data[i] * b.data[i];
      }
      if (wants(n.p1)) {
        DenseArray& gp = grad_buf(n.p1);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] += g.data[i] * a.data[i];
      }
      return;
    }
    case Op::kRowScale: {
      const DenseArray& x = val(n.p0);
      const DenseArray& s = val(n.p1);
      const int cols = x.cols();
      if (wants(n.p0)) {
        DenseArray& gx = grad_buf(n.p0);
        for (int i = 0; i < x.rows(); ++i) {
          const float c = s.data[static_cast<size_t>(i)];
          const float* grow = g.row(i);
          float* gxrow = gx.row(i);
          for (int j = 0; j < cols; ++j) gxrow[j] += c * grow[j];
        }
      }
      if (wants(n.p1)) {
        DenseArray& gs = grad_buf(n.p1);
        for (int i = 0; i < x.rows(); ++i) {
          const float* grow = g.row(i);
          const float* xrow = x.row(i);
          double acc = 0.0;
          for (int j = 0; j < cols; ++j) acc += static_cast<double>(grow[j]) * xrow[j];
          gs.data[static_cast<size_t>(i)] += static_cast<float>(acc);
        }
      }
      return;
    }
    case Op::kScale: {
      if (wants(n.p0)) {
        DenseArray& gp = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i) gp.data[i] += n.fparam * g.data[i];
      }
      return;
    }
    case Op::kGelu: {
      if (wants(n.p0)) {
        const DenseArray& x = val(n.p0);
        DenseArray& gp = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i)
          gp.data[i] += gelu_grad_scalar(x.data[i]) * g.data[i];
      }
      return;
    }
    case Op::kGeluGrad: {
      if (wants(n.p0)) {
        const DenseArray& x = val(n.p0);
        DenseArray& gp = grad_buf(n.p0);
        for (size_t i = 0; i < g.data.size(); ++i)
          gp.data[i] += gelu_hess_scalar(x.data[i]) * g.data[i];
      }
      return;
    }
    case Op::kLayerNorm: {
      const DenseArray& x = val(n.p0);
      const DenseArray& gain = val(n.p1);
      const int cols = x.cols();
      DenseArray* gx = wants(n.p0) ? &grad_buf(n.p0) : nullptr;
      DenseArray* gg = wants(n.p1) ? &grad_buf(n.p1) : nullptr;
      DenseArray* gb = wants(n.p2) ? &grad_buf(n.p2) : nullptr;
      std::vector<float> xhat(static_cast<size_t>(cols));
      std::vector<float> h(static_cast<size_t>(cols));
      for (int i = 0; i < x.rows(); ++i) {
        const float mu = n.aux.at(i, 0);
        const float inv = n.aux.at(i, 1);
        const float* xrow = x.row(i);
        const float* grow = g.row(i);
        for (int j = 0; j < cols; ++j) xhat[j] = (xrow[j] - mu) * inv;
        if (gb)
          for (int j = 0; j < cols; ++j) gb->data[j] += grow[j];
        if (gg)
          for (int j = 0; j < cols; ++j) gg->data[j] += grow[j] * xhat[j];
        if (gx) {
          double mean_h = 0.0, mean_hx = 0.0;
          for (int j = 0; j < cols; ++j) {
            h[j] = grow[j] * gain.data[j];
            mean_h += h[j];
            mean_hx += static_cast<double>(h[j]) * xhat[j];
          }
          mean_h /= cols;
          mean_hx /= cols;
          float* gxrow = gx->row(i);
          for (int j = 0; j < cols; ++j)
            gxrow[j] += static_cast<float>(
                (h[j] - mean_h - xhat[j] * mean_hx) * static_cast<double>(inv));
        }
      }
      return;
    }
    case Op::kFourier: {
      if (wants(n.p0)) {
        const DenseArray& t = val(n.p0);
        const FourierBasis& basis = *n.basis;
        DenseArray& gt = grad_buf(n.p0);
        const int m = static_cast<int>(basis.freqs.size());
        for (int i = 0; i < t.rows(); ++i) {
          const double ti = t.data[static_cast<size_t>(i)];
          const float* grow = g.row(i);
          double acc = 0.0;
          for (int j = 0; j < m; ++j) {
            const double w = kTwoPi * basis.freqs[j];
            const double a = w * ti;
            acc += w * (std::cos(a) * grow[2 * j] - std::sin(a) * grow[2 * j + 1]);
          }
          gt.data[static_cast<size_t>(i)] += static_cast<float>(acc);
        }
      }
      return;
    }
    case Op::kFourierDt:
      return;  // time inputs are constants
    case Op::kConcat: {
      int off = 0;
      for (int c = 0; c < n.list_count; ++c) {
        const int pid = concat_pool_[static_cast<size_t>(n.list_begin) + c];
        const DenseArray& pv = val(pid);
        if (wants(pid)) {
          DenseArray& gp = grad_buf(pid);
          for (int i = 0; i < pv.rows(); ++i) {
            const float* src = g.row(i) + off;
            float* dst = gp.row(i);
            for (int j = 0; j < pv.cols(); ++j) dst[j] += src[j];
          }
        }
        off += pv.cols();
      }
      return;
    }
    case Op::kSumSqMean: {
      if (wants(n.p0)) {
        const DenseArray& x = val(n.p0);
        DenseArray& gp = grad_buf(n.p0);
        const float c = 2.0f * g.data[0] / std::max(1, x.rows());
        for (size_t i = 0; i < x.data.size(); ++i) gp.data[i] += c * x.data[i];
      }
      return;
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  concat_pool_.clear();
  param_leaves_.clear();
}

}  // namespace fmq
