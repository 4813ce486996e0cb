#pragma once

#include <cmath>
#include <vector>

#include "fmq/net.hpp"

// Test-side oracles. The double-precision evaluator below re-implements the
// network math independently of the library's float path so finite-difference
// checks are not polluted by f32 rounding.
namespace fmq::testing {

inline bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

struct DSlots {
  // One entry per slot; time slots hold a single scalar per row.
  std::vector<std::vector<double>> values;
};

inline double dgelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Double-precision forward pass for a single sample.
inline std::vector<double> eval_double(const MlpNet& net, const DSlots& slots) {
  const MlpConfig& cfg = net.config();
  std::vector<double> in;
  {
    size_t time_idx = 0;
    std::vector<FourierBasis> bases;
    for (const auto& s : cfg.slots)
      if (s.kind == SlotSpec::Kind::kTime)
        bases.push_back(FourierBasis::make(s.width, cfg.fourier_fmin, cfg.fourier_fmax));
    for (size_t si = 0; si < cfg.slots.size(); ++si) {
      if (cfg.slots[si].kind == SlotSpec::Kind::kTime) {
        const auto& basis = bases[time_idx++];
        const double t = slots.values[si][0];
        for (float f : basis.freqs) {
          const double a = 2.0 * M_PI * f * t;
          in.push_back(std::sin(a));
          in.push_back(std::cos(a));
        }
      } else {
        for (double v : slots.values[si]) in.push_back(v);
      }
    }
  }

  std::vector<const Param*> ps = net.params();
  size_t pi = 0;
  const size_t n_layers = cfg.hidden.size() + 1;
  std::vector<double> h = std::move(in);
  for (size_t li = 0; li < n_layers; ++li) {
    const bool is_hidden = li + 1 < n_layers;
    const Param& w = *ps[pi++];
    const Param& b = *ps[pi++];
    const int rows_w = w.value.shape[0];
    const int cols_w = w.value.shape[1];
    std::vector<double> z(cols_w, 0.0);
    for (int i = 0; i < rows_w; ++i)
      for (int j = 0; j < cols_w; ++j)
        z[j] += h[i] * static_cast<double>(w.value.data[static_cast<size_t>(i) * cols_w + j]);
    for (int j = 0; j < cols_w; ++j) z[j] += static_cast<double>(b.value.data[j]);
    if (is_hidden && cfg.layer_norm && !cfg.layer_norm_after_act) {
      const Param& g = *ps[pi++];
      const Param& beta = *ps[pi++];
      double mu = 0.0;
      for (double v : z) mu += v;
      mu /= cols_w;
      double var = 0.0;
      for (double v : z) var += (v - mu) * (v - mu);
      var /= cols_w;
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int j = 0; j < cols_w; ++j)
        z[j] = static_cast<double>(g.value.data[j]) * (z[j] - mu) * inv +
               static_cast<double>(beta.value.data[j]);
    }
    if (is_hidden)
      for (auto& v : z) v = dgelu(v);
    h = std::move(z);
  }
  return h;
}

}  // namespace fmq::testing
