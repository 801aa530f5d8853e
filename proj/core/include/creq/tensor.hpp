#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace creq {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);

/// Dense row-major tensor of 64-bit floats, rank <= 3.
/// Values constructed from external input are checked finite.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  /// Validating constructor for data coming from outside the library
  /// (files, user input). Rejects NaN/Inf and shape/data mismatches.
  static Tensor from_data(Shape shape, std::vector<double> data);
  /// Trusted constructor for values produced internally.
  static Tensor wrap(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t rows() const { return shape_[0]; }
  int64_t cols() const { return shape_[shape_.size() - 1]; }

  double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool bit_equal(const Tensor& other) const;

  bool requires_grad = false;

 private:
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {}

  Shape shape_;
  std::vector<double> data_;
};

// 2-D kernels shared by the eager path and the autodiff tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transposed(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor silu(const Tensor& x);
Tensor slice_cols(const Tensor& a, int64_t begin, int64_t count);
Tensor concat_cols(std::span<const Tensor* const> parts);
double sum_all(const Tensor& a);
double mean_squared(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

// raw matmul kernel, C[p x r] = A[p x q] * B[q x r], C is overwritten
void matmul_raw(const double* a, const double* b, double* c, int64_t p, int64_t q, int64_t r);

/// Counter-based SplitMix64 generator; the single source of randomness.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  /// in [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  /// standard normal via Box-Muller, deterministic for a given seed
  double gaussian();
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds

  Tensor gaussian_tensor(Shape shape, double std_dev = 1.0);

  /// Derive an independent stream for a tagged sub-purpose.
  static uint64_t derive(uint64_t seed, uint64_t tag);

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

[[noreturn]] void fail(const std::string& message);

}  // namespace creq
