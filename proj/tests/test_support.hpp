// Shared helpers for the test suites: independent oracles and generators.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "creq/autodiff.hpp"
#include "creq/tensor.hpp"

namespace testsupport {

using creq::Rng;
using creq::Tensor;

inline Tensor random_tensor(Rng& rng, creq::Shape shape, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.gaussian() * scale;
  return t;
}

// triple-loop matmul, kept deliberately naive and independent of the library kernel
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

// central finite differences of a scalar-valued function of one tensor
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double eps = 1e-5) {
  Tensor grad = Tensor::zeros(x.shape());
  Tensor probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe.at(i);
    probe.at(i) = orig + eps;
    const double hi = f(probe);
    probe.at(i) = orig - eps;
    const double lo = f(probe);
    probe.at(i) = orig;
    grad.at(i) = (hi - lo) / (2.0 * eps);
  }
  return grad;
}

inline double max_rel_err(const Tensor& got, const Tensor& want, double floor = 1e-8) {
  double worst = 0.0;
  for (int64_t i = 0; i < got.numel(); ++i) {
    double denom = std::max(std::fabs(want.at(i)), floor);
    worst = std::max(worst, std::fabs(got.at(i) - want.at(i)) / denom);
  }
  return worst;
}

}  // namespace testsupport
