#include "fmq/dense.hpp"

#include <cstring>

namespace fmq {

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  gemm_nn_acc(a, b, c, m, k, n);
}

void gemm_nn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  // i-k-j order keeps the inner loop contiguous on both B and C so the
  // compiler can vectorize without reassociating a reduction.
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose(const float* in, float* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<size_t>(j) * rows + i] = in[static_cast<size_t>(i) * cols + j];
}

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double norm2_f64(std::span<const float> a) {
  return std::sqrt(dot_f64(a, a));
}

}  // namespace fmq
