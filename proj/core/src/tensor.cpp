#include "creq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace creq {

void fail(const std::string& message) { throw std::runtime_error(message); }

int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

Tensor Tensor::zeros(Shape shape) {
  if (shape.size() > 3) fail("tensor rank > 3");
  int64_t n = creq::numel(shape);
  if (n < 0) fail("negative tensor extent");
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (shape.size() > 3) fail("tensor rank > 3");
  if (creq::numel(shape) != static_cast<int64_t>(data.size()))
    fail("tensor shape/data size mismatch");
  for (double v : data)
    if (!std::isfinite(v)) fail("tensor holds non-finite value");
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::wrap(Shape shape, std::vector<double> data) {
  if (shape.size() > 3) fail("tensor rank > 3");
  if (creq::numel(shape) != static_cast<int64_t>(data.size()))
    fail("tensor shape/data size mismatch");
  return Tensor(std::move(shape), std::move(data));
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

void matmul_raw(const double* a, const double* b, double* c, int64_t p, int64_t q, int64_t r) {
  if (q == 0) return;
  for (int64_t i = 0; i < p; ++i) {
    const double* arow = a + i * q;
    double* __restrict crow = c + i * r;
    for (int64_t j = 0; j < r; ++j) crow[j] = arow[0] * b[j];
    for (int64_t k = 1; k < q; ++k) {
      const double aik = arow[k];
      const double* __restrict brow = b + k * r;
      for (int64_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) fail("matmul expects 2-D tensors");
  if (a.cols() != b.rows()) fail("matmul inner dimension mismatch");
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  matmul_raw(a.raw(), b.raw(), c.raw(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transposed(const Tensor& a) {
  if (a.rank() != 2) fail("transpose expects 2-D tensor");
  Tensor t = Tensor::zeros({a.cols(), a.rows()});
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail("add shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += b.at(i);
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail("sub shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) -= b.at(i);
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail("mul shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= b.at(i);
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= s;
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) fail("softmax_rows expects 2-D tensor");
  Tensor out = a;
  const int64_t rows = a.rows(), cols = a.cols();
  for (int64_t i = 0; i < rows; ++i) {
    double mx = out.at(i, 0);
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, out.at(i, j));
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double e = std::exp(out.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) /= sum;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) fail("layer_norm expects 2-D input");
  const int64_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols) fail("layer_norm gain/bias size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j)
      out.at(i, j) = (x.at(i, j) - mean) * inv * gain.at(j) + bias.at(j);
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = out.at(i);
    out.at(i) = v / (1.0 + std::exp(-v));
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t count) {
  if (a.rank() != 2) fail("slice_cols expects 2-D tensor");
  if (begin < 0 || count <= 0 || begin + count > a.cols()) fail("slice_cols out of range");
  Tensor out = Tensor::zeros({a.rows(), count});
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < count; ++j) out.at(i, j) = a.at(i, begin + j);
  return out;
}

Tensor concat_cols(std::span<const Tensor* const> parts) {
  if (parts.empty()) fail("concat_cols with no parts");
  int64_t rows = parts[0]->rows();
  int64_t cols = 0;
  for (const Tensor* t : parts) {
    if (t->rank() != 2 || t->rows() != rows) fail("concat_cols row mismatch");
    cols += t->cols();
  }
  Tensor out = Tensor::zeros({rows, cols});
  int64_t off = 0;
  for (const Tensor* t : parts) {
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < t->cols(); ++j) out.at(i, off + j) = t->at(i, j);
    off += t->cols();
  }
  return out;
}

double sum_all(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i);
  return s;
}

double mean_squared(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail("mean_squared shape mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.at(i) - b.at(i);
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i)));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail("max_abs_diff shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

uint64_t Rng::next_u64() {
  uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::gaussian() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (lo > hi) fail("uniform_int empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(next_u64() % span);
}

Tensor Rng::gaussian_tensor(Shape shape, double std_dev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = gaussian() * std_dev;
  return t;
}

uint64_t Rng::derive(uint64_t seed, uint64_t tag) {
  Rng r(seed ^ (0xA0761D6478BD642FULL * (tag + 1)));
  return r.next_u64();
}

}  // namespace creq
