#include "fmq/net.hpp"

#include <cmath>
#include <cstring>

namespace fmq {

namespace {
constexpr double kTwoPi = 6.283185307179586;

void embed_time(const FourierBasis& basis, const DenseArray& t, DenseArray& out) {
  const int m = static_cast<int>(basis.freqs.size());
  out = DenseArray::matrix(t.rows(), basis.dim);
  for (int i = 0; i < t.rows(); ++i) {
    const double ti = t.data[static_cast<size_t>(i)];
    float* row = out.row(i);
    for (int j = 0; j < m; ++j) {
      const double a = kTwoPi * basis.freqs[j] * ti;
      row[2 * j] = static_cast<float>(std::sin(a));
      row[2 * j + 1] = static_cast<float>(std::cos(a));
    }
  }
}

// d(embed)/dt scaled by the scalar tangent dt per row.
void embed_time_tangent(const FourierBasis& basis, const DenseArray& t, const DenseArray& dt,
                        DenseArray& out) {
  const int m = static_cast<int>(basis.freqs.size());
  out = DenseArray::matrix(t.rows(), basis.dim);
  for (int i = 0; i < t.rows(); ++i) {
    const double ti = t.data[static_cast<size_t>(i)];
    const double di = dt.data[static_cast<size_t>(i)];
    float* row = out.row(i);
    for (int j = 0; j < m; ++j) {
      const double w = kTwoPi * basis.freqs[j];
      const double a = w * ti;
      row[2 * j] = static_cast<float>(di * w * std::cos(a));
      row[2 * j + 1] = static_cast<float>(-di * w * std::sin(a));
    }
  }
}
}  // namespace

MlpNet::MlpNet(MlpConfig cfg, Rng& rng, std::string param_prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(param_prefix)) {
  if (cfg_.slots.empty()) throw ConfigError("mlp needs at least one input slot");
  if (cfg_.out <= 0) throw ConfigError("mlp output width must be positive");
  for (const auto& s : cfg_.slots) {
    if (s.kind == SlotSpec::Kind::kTime)
      bases_.push_back(FourierBasis::make(s.width, cfg_.fourier_fmin, cfg_.fourier_fmax));
    if (s.width <= 0) throw ConfigError("slot width must be positive");
  }

  int in = cfg_.input_width();
  std::vector<int> widths = cfg_.hidden;
  widths.push_back(cfg_.out);
  for (size_t li = 0; li < widths.size(); ++li) {
    const int out = widths[li];
    Layer layer;
    const std::string base = prefix_ + "l" + std::to_string(li) + ".";
    DenseArray w = DenseArray::matrix(in, out);
    const float std_dev = 1.0f / std::sqrt(static_cast<float>(in));
    for (auto& v : w.data) v = std_dev * rng.normal_f();
    layer.w = Param(base + "w", std::move(w));
    layer.b = Param(base + "b", DenseArray({out}, 0.0f));
    layer.gelu = li + 1 < widths.size();
    layer.has_ln = layer.gelu && cfg_.layer_norm;
    if (layer.has_ln) {
      layer.ln_gain = Param(base + "ln_g", DenseArray({out}, 1.0f));
      layer.ln_bias = Param(base + "ln_b", DenseArray({out}, 0.0f));
    }
    layers_.push_back(std::move(layer));
    in = out;
  }
}

std::vector<Param*> MlpNet::params() {
  std::vector<Param*> out;
  for (auto& l : layers_) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    if (l.has_ln) {
      out.push_back(&l.ln_gain);
      out.push_back(&l.ln_bias);
    }
  }
  return out;
}

std::vector<const Param*> MlpNet::params() const {
  std::vector<const Param*> out;
  for (const auto& l : layers_) {
    out.push_back(&l.w);
    out.push_back(&l.b);
    if (l.has_ln) {
      out.push_back(&l.ln_gain);
      out.push_back(&l.ln_bias);
    }
  }
  return out;
}

void MlpNet::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

void MlpNet::check_slots(std::span<const DenseArray> slots) const {
  if (slots.size() != cfg_.slots.size()) throw ConfigError("wrong number of input slots");
  const int rows = slots.empty() ? 0 : slots[0].rows();
  for (size_t i = 0; i < slots.size(); ++i) {
    const auto& spec = cfg_.slots[i];
    const int want = spec.kind == SlotSpec::Kind::kTime ? 1 : spec.width;
    if (slots[i].cols() != want || slots[i].rows() != rows)
      throw ConfigError("input slot shape mismatch");
  }
}

DenseArray MlpNet::assemble_input(std::span<const DenseArray> slots) const {
  check_slots(slots);
  const int rows = slots[0].rows();
  DenseArray in = DenseArray::matrix(rows, cfg_.input_width());
  int off = 0;
  size_t time_idx = 0;
  DenseArray emb;
  for (size_t i = 0; i < slots.size(); ++i) {
    const DenseArray* src = &slots[i];
    if (cfg_.slots[i].kind == SlotSpec::Kind::kTime) {
      embed_time(bases_[time_idx++], slots[i], emb);
      src = &emb;
    }
    for (int r = 0; r < rows; ++r) {
      const float* s = src->row(r);
      float* d = in.row(r) + off;
      for (int c = 0; c < src->cols(); ++c) d[c] = s[c];
    }
    off += src->cols();
  }
  return in;
}

DenseArray MlpNet::forward(std::span<const DenseArray> slots) const {
  DenseArray h = assemble_input(slots);
  DenseArray next;
  for (const Layer& l : layers_) {
    const int rows = h.rows(), in = h.cols(), out = l.w.value.cols();
    next = DenseArray::matrix(rows, out);
    gemm_nn(h.data.data(), l.w.value.data.data(), next.data.data(), rows, in, out);
    for (int r = 0; r < rows; ++r) {
      float* row = next.row(r);
      for (int c = 0; c < out; ++c) row[c] += l.b.value.data[c];
    }
    if (l.has_ln && !cfg_.layer_norm_after_act) {
      for (int r = 0; r < rows; ++r) {
        float* row = next.row(r);
        double mu = 0.0;
        for (int c = 0; c < out; ++c) mu += row[c];
        mu /= out;
        double var = 0.0;
        for (int c = 0; c < out; ++c) {
          const double d = row[c] - mu;
          var += d * d;
        }
        var /= out;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
        for (int c = 0; c < out; ++c)
          row[c] = l.ln_gain.value.data[c] * (row[c] - static_cast<float>(mu)) * inv +
                   l.ln_bias.value.data[c];
      }
    }
    if (l.gelu)
      for (auto& v : next.data) v = gelu_scalar(v);
    if (l.has_ln && cfg_.layer_norm_after_act) {
      for (int r = 0; r < rows; ++r) {
        float* row = next.row(r);
        double mu = 0.0;
        for (int c = 0; c < out; ++c) mu += row[c];
        mu /= out;
        double var = 0.0;
        for (int c = 0; c < out; ++c) {
          const double d = row[c] - mu;
          var += d * d;
        }
        var /= out;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
        for (int c = 0; c < out; ++c)
          row[c] = l.ln_gain.value.data[c] * (row[c] - static_cast<float>(mu)) * inv +
                   l.ln_bias.value.data[c];
      }
    }
    h = std::move(next);
  }
  return h;
}

MlpNet::JvpOut MlpNet::forward_jvp(std::span<const DenseArray> slots,
                                   std::span<const DenseArray> tangents) const {
  check_slots(slots);
  if (tangents.size() != slots.size()) throw ConfigError("wrong number of tangent slots");
  const int rows = slots[0].rows();
  for (size_t i = 0; i < tangents.size(); ++i) {
    if (tangents[i].size() == 0) continue;
    if (!tangents[i].same_shape(slots[i])) throw ConfigError("tangent shape mismatch");
  }

  DenseArray h = assemble_input(slots);
  DenseArray dh = DenseArray::matrix(rows, cfg_.input_width());
  {
    int off = 0;
    size_t time_idx = 0;
    DenseArray demb;
    for (size_t i = 0; i < slots.size(); ++i) {
      const bool is_time = cfg_.slots[i].kind == SlotSpec::Kind::kTime;
      const int width = is_time ? bases_[time_idx].dim : slots[i].cols();
      if (tangents[i].size() != 0) {
        const DenseArray* src = &tangents[i];
        if (is_time) {
          embed_time_tangent(bases_[time_idx], slots[i], tangents[i], demb);
          src = &demb;
        }
        for (int r = 0; r < rows; ++r) {
          const float* s = src->row(r);
          float* d = dh.row(r) + off;
          for (int c = 0; c < width; ++c) d[c] = s[c];
        }
      }
      if (is_time) ++time_idx;
      off += width;
    }
  }

  DenseArray next, dnext;
  for (const Layer& l : layers_) {
    const int in = h.cols(), out = l.w.value.cols();
    next = DenseArray::matrix(rows, out);
    dnext = DenseArray::matrix(rows, out);
    gemm_nn(h.data.data(), l.w.value.data.data(), next.data.data(), rows, in, out);
    gemm_nn(dh.data.data(), l.w.value.data.data(), dnext.data.data(), rows, in, out);
    for (int r = 0; r < rows; ++r) {
      float* row = next.row(r);
      for (int c = 0; c < out; ++c) row[c] += l.b.value.data[c];
    }
    if (l.has_ln) {
      // Differential of the row normalization, applied jointly to (x, dx).
      const bool pre = !cfg_.layer_norm_after_act;
      if (!pre)
        throw ConfigError("jvp through post-activation layer norm is not supported");
      for (int r = 0; r < rows; ++r) {
        float* x = next.row(r);
        float* dx = dnext.row(r);
        double mu = 0.0, dmu = 0.0;
        for (int c = 0; c < out; ++c) {
          mu += x[c];
          dmu += dx[c];
        }
        mu /= out;
        dmu /= out;
        double var = 0.0, dvar = 0.0;
        for (int c = 0; c < out; ++c) {
          const double d = x[c] - mu;
          var += d * d;
          dvar += 2.0 * d * (dx[c] - dmu);
        }
        var /= out;
        dvar /= out;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        const double dinv = -0.5 * inv * inv * inv * dvar;
        for (int c = 0; c < out; ++c) {
          const double xc = x[c] - mu;
          const double g = l.ln_gain.value.data[c];
          dx[c] = static_cast<float>(g * ((dx[c] - dmu) * inv + xc * dinv));
          x[c] = static_cast<float>(g * xc * inv + l.ln_bias.value.data[c]);
        }
      }
    }
    if (l.gelu) {
      for (size_t i = 0; i < next.data.size(); ++i) {
        dnext.data[i] *= gelu_grad_scalar(next.data[i]);
        next.data[i] = gelu_scalar(next.data[i]);
      }
    }
    h = std::move(next);
    dh = std::move(dnext);
  }
  return {std::move(h), std::move(dh)};
}

Tensor MlpNet::forward_tape(Tape& tape, std::span<const Tensor> slots) const {
  if (slots.size() != cfg_.slots.size()) throw ConfigError("wrong number of input slots");
  std::vector<Tensor> parts;
  size_t time_idx = 0;
  for (size_t i = 0; i < slots.size(); ++i) {
    if (cfg_.slots[i].kind == SlotSpec::Kind::kTime)
      parts.push_back(tape.fourier(slots[i], bases_[time_idx++]));
    else
      parts.push_back(slots[i]);
  }
  Tensor h = tape.concat(parts);
  for (const Layer& l : layers_) {
    h = tape.add_bias(tape.matmul(h, tape.param(const_cast<Param&>(l.w))),
                      tape.param(const_cast<Param&>(l.b)));
    if (l.has_ln && !cfg_.layer_norm_after_act)
      h = tape.layer_norm(h, tape.param(const_cast<Param&>(l.ln_gain)),
                          tape.param(const_cast<Param&>(l.ln_bias)));
    if (l.gelu) h = tape.gelu(h);
    if (l.has_ln && cfg_.layer_norm_after_act)
      h = tape.layer_norm(h, tape.param(const_cast<Param&>(l.ln_gain)),
                          tape.param(const_cast<Param&>(l.ln_bias)));
  }
  return h;
}

Dual MlpNet::forward_tape_dual(Tape& tape, std::span<const Dual> slots) const {
  if (slots.size() != cfg_.slots.size()) throw ConfigError("wrong number of input slots");
  std::vector<Tensor> parts;
  std::vector<Tensor> dparts;
  bool any_tangent = false;
  size_t time_idx = 0;
  for (size_t i = 0; i < slots.size(); ++i) {
    if (cfg_.slots[i].kind == SlotSpec::Kind::kTime) {
      const FourierBasis& basis = bases_[time_idx++];
      parts.push_back(tape.fourier(slots[i].primal, basis));
      if (slots[i].tangent.valid()) {
        Tensor dt = tape.fourier_dt(slots[i].primal, basis);
        dparts.push_back(tape.row_scale(dt, slots[i].tangent));
        any_tangent = true;
      } else {
        dparts.push_back(Tensor{});
      }
    } else {
      parts.push_back(slots[i].primal);
      dparts.push_back(slots[i].tangent);
      any_tangent = any_tangent || slots[i].tangent.valid();
    }
  }
  if (!any_tangent) throw ConfigError("dual forward requires at least one tangent");

  for (size_t i = 0; i < dparts.size(); ++i) {
    if (!dparts[i].valid())
      dparts[i] = tape.constant(DenseArray(tape.value(parts[i]).shape, 0.0f));
  }
  Tensor h = tape.concat(parts);
  Tensor dh = tape.concat(dparts);

  for (const Layer& l : layers_) {
    if (l.has_ln)
      throw ConfigError("dual forward through layer-norm layers is not supported");
    Tensor w = tape.param(const_cast<Param&>(l.w));
    Tensor z = tape.add_bias(tape.matmul(h, w), tape.param(const_cast<Param&>(l.b)));
    Tensor dz = tape.matmul(dh, w);
    if (l.gelu) {
      h = tape.gelu(z);
      dh = tape.mul(tape.gelu_grad(z), dz);
    } else {
      h = z;
      dh = dz;
    }
  }
  return {h, dh};
}

MlpNet MlpNet::clone(const std::string& new_prefix) const {
  MlpNet out;
  out.cfg_ = cfg_;
  out.prefix_ = new_prefix;
  out.bases_ = bases_;
  out.layers_.reserve(layers_.size());
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Layer c;
    const std::string base = new_prefix + "l" + std::to_string(li) + ".";
    c.w = Param(base + "w", l.w.value);
    c.b = Param(base + "b", l.b.value);
    c.gelu = l.gelu;
    c.has_ln = l.has_ln;
    if (l.has_ln) {
      c.ln_gain = Param(base + "ln_g", l.ln_gain.value);
      c.ln_bias = Param(base + "ln_b", l.ln_bias.value);
    }
    out.layers_.push_back(std::move(c));
  }
  return out;
}

void MlpNet::copy_values_from(const MlpNet& other) {
  auto mine = params();
  auto theirs = other.params();
  if (mine.size() != theirs.size()) throw ConfigError("copy between incompatible nets");
  for (size_t i = 0; i < mine.size(); ++i) {
    if (!mine[i]->value.same_shape(theirs[i]->value))
      throw ConfigError("copy between incompatible nets");
    mine[i]->value.data = theirs[i]->value.data;
  }
}

uint64_t MlpNet::value_hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : params()) {
    for (float v : p->value.data) {
      uint32_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      std::memcpy(&bits, &v, sizeof(bits));
      for (int s = 0; s < 32; s += 8) {
        h ^= (bits >> s) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

void MlpNet::for_each_param(const std::function<void(Param&)>& fn) {
  for (Param* p : params()) fn(*p);
}

void MlpNet::for_each_param(const std::function<void(const Param&)>& fn) const {
  for (const Param* p : params()) fn(*p);
}

double grad(MlpNet& net, const std::function<Tensor(Tape&)>& build_loss) {
  net.zero_grad();
  Tape tape;
  Tensor loss = build_loss(tape);
  const double value = tape.scalar(loss);
  tape.backward(loss);
  return value;
}

}  // namespace fmq
