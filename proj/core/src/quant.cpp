#include "creq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace creq::quant {

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::kPerTensor: return "per_tensor";
    case Granularity::kPerChannel: return "per_channel";
    case Granularity::kPerToken: return "per_token";
  }
  return "?";
}

namespace {

// Scale mantissas are kept to 35 significant bits so every (code - beta) * alpha
// product is exact in double precision; re-deriving params from dequantized
// data then reproduces identical params, which keeps repeated fake-quant
// bit-stable.
double snap_scale(double x) {
  int e = 0;
  double m = std::frexp(x, &e);
  return std::ldexp(std::round(std::ldexp(m, 35)), e - 35);
}

struct GroupView {
  const double* base;
  int64_t count;
  int64_t stride;
};

// Group layout: per_tensor = everything, per_token = rows, per_channel = columns.
GroupView group_view(const Tensor& x, Granularity g, int64_t group) {
  switch (g) {
    case Granularity::kPerTensor:
      return {x.raw(), x.numel(), 1};
    case Granularity::kPerToken:
      return {x.raw() + group * x.cols(), x.cols(), 1};
    case Granularity::kPerChannel:
      return {x.raw() + group, x.rows(), x.cols()};
  }
  fail("bad granularity");
}

double round_half_away(double v) { return std::round(v); }

}  // namespace

int64_t group_count(const Tensor& x, Granularity g) {
  switch (g) {
    case Granularity::kPerTensor:
      return 1;
    case Granularity::kPerToken:
      if (x.rank() != 2) fail("per_token quantization expects a 2-D tensor");
      return x.rows();
    case Granularity::kPerChannel:
      if (x.rank() != 2) fail("per_channel quantization expects a 2-D tensor");
      return x.cols();
  }
  fail("bad granularity");
}

QuantParams compute_quant_params(const Tensor& x, int bits, Granularity granularity) {
  if (bits < 2 || bits > 16) fail("bits must be in [2, 16]");
  if (x.numel() == 0) fail("cannot quantize an empty tensor");
  QuantParams p;
  p.bits = bits;
  p.granularity = granularity;
  const int64_t k = p.levels();
  const int64_t groups = group_count(x, granularity);
  p.alpha.resize(static_cast<size_t>(groups));
  p.beta.resize(static_cast<size_t>(groups));
  for (int64_t g = 0; g < groups; ++g) {
    GroupView view = group_view(x, granularity, g);
    double mn = view.base[0], mx = view.base[0];
    for (int64_t i = 1; i < view.count; ++i) {
      double v = view.base[i * view.stride];
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    double alpha;
    int64_t beta;
    if (mn == mx) {
      // degenerate constant group: keep the constant losslessly
      alpha = std::max(std::fabs(mn), 1.0) / static_cast<double>(k);
      beta = mn < 0.0 ? k : 0;
    } else {
      alpha = snap_scale((mx - mn) / static_cast<double>(k));
      beta = static_cast<int64_t>(-round_half_away(mn / alpha));
    }
    p.alpha[static_cast<size_t>(g)] = alpha;
    p.beta[static_cast<size_t>(g)] = beta;
  }
  return p;
}

QuantizedTensor quantize(const Tensor& x, const QuantParams& p) {
  if (p.groups() != group_count(x, p.granularity)) fail("quantize params/tensor group mismatch");
  QuantizedTensor out;
  out.shape = x.shape();
  out.codes.assign(static_cast<size_t>(x.numel()), 0);
  const double k = static_cast<double>(p.levels());
  for (int64_t g = 0; g < p.groups(); ++g) {
    GroupView view = group_view(x, p.granularity, g);
    const double alpha = p.alpha[static_cast<size_t>(g)];
    const double beta = static_cast<double>(p.beta[static_cast<size_t>(g)]);
    const int64_t offset = view.base - x.raw();
    for (int64_t i = 0; i < view.count; ++i) {
      const int64_t idx = offset + i * view.stride;
      double code = round_half_away(x.at(idx) / alpha) + beta;
      code = std::clamp(code, 0.0, k);
      out.codes[static_cast<size_t>(idx)] = static_cast<int32_t>(code);
    }
  }
  return out;
}

Tensor dequantize(const QuantizedTensor& q, const QuantParams& p) {
  Tensor out = Tensor::zeros(q.shape);
  if (p.groups() != group_count(out, p.granularity)) fail("dequantize params/tensor group mismatch");
  const int64_t k = p.levels();
  for (int64_t g = 0; g < p.groups(); ++g) {
    GroupView view = group_view(out, p.granularity, g);
    const double alpha = p.alpha[static_cast<size_t>(g)];
    const double beta = static_cast<double>(p.beta[static_cast<size_t>(g)]);
    const int64_t offset = view.base - out.raw();
    for (int64_t i = 0; i < view.count; ++i) {
      const int64_t idx = offset + i * view.stride;
      const int32_t code = q.codes[static_cast<size_t>(idx)];
      if (code < 0 || code > k) fail("dequantize code out of range");
      out.at(idx) = (static_cast<double>(code) - beta) * alpha;
    }
  }
  return out;
}

FakeQuantResult fake_quant_with_mask(const Tensor& x, int bits, Granularity granularity) {
  QuantParams p = compute_quant_params(x, bits, granularity);
  FakeQuantResult res;
  res.values = Tensor::zeros(x.shape());
  res.pass_mask.assign(static_cast<size_t>(x.numel()), 1);
  const double k = static_cast<double>(p.levels());
  for (int64_t g = 0; g < p.groups(); ++g) {
    GroupView view = group_view(x, granularity, g);
    const double alpha = p.alpha[static_cast<size_t>(g)];
    const double beta = static_cast<double>(p.beta[static_cast<size_t>(g)]);
    const int64_t offset = view.base - x.raw();
    for (int64_t i = 0; i < view.count; ++i) {
      const int64_t idx = offset + i * view.stride;
      double code = round_half_away(x.at(idx) / alpha) + beta;
      if (code < 0.0 || code > k) {
        res.pass_mask[static_cast<size_t>(idx)] = 0;
        code = std::clamp(code, 0.0, k);
      }
      res.values.at(idx) = (code - beta) * alpha;
    }
  }
  return res;
}

Tensor fake_quant(const Tensor& x, int bits, Granularity granularity) {
  return fake_quant_with_mask(x, bits, granularity).values;
}

}  // namespace creq::quant
