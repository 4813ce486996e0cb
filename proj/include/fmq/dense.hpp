#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmq {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define FMQ_CHECK(cond, msg)                              \
  do {                                                    \
    if (!(cond)) throw ::fmq::NumericError(std::string("check failed: ") + (msg)); \
  } while (0)

// Row-major float tensor. Training state lives in rank-1/2 arrays; the shape
// vector is kept general so checkpoints can carry any rank.
struct DenseArray {
  std::vector<int> shape;
  std::vector<float> data;

  DenseArray() = default;
  DenseArray(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), fill);
  }
  static DenseArray matrix(int rows, int cols, float fill = 0.0f) {
    return DenseArray({rows, cols}, fill);
  }
  static DenseArray vec(std::vector<float> v) {
    DenseArray a;
    a.shape = {static_cast<int>(v.size())};
    a.data = std::move(v);
    return a;
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw ConfigError("negative dimension in shape");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 0); }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
  float* row(int r) { return data.data() + static_cast<size_t>(r) * cols(); }
  const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols(); }

  bool same_shape(const DenseArray& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
  void require_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string("non-finite values in ") + what);
  }
};

// C[M x N] = A[M x K] * B[K x N], overwriting C.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n);
// C[M x N] += A[M x K] * B[K x N].
void gemm_nn_acc(const float* a, const float* b, float* c, int m, int k, int n);
// out[cols x rows] = transpose(in[rows x cols]).
void transpose(const float* in, float* out, int rows, int cols);

double dot_f64(std::span<const float> a, std::span<const float> b);
double norm2_f64(std::span<const float> a);

}  // namespace fmq
