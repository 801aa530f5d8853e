#pragma once

#include <cstdint>
#include <vector>

#include "creq/tensor.hpp"

namespace creq::quant {

enum class Granularity { kPerTensor, kPerChannel, kPerToken };

const char* to_string(Granularity g);

/// Uniform affine quantizer parameters. One (alpha, beta) pair per group:
/// the whole tensor, one per output channel (column), or one per token (row).
/// beta can leave [0, 2^b - 1] for groups whose range excludes zero; codes
/// are always clamped to the unsigned range.
struct QuantParams {
  int bits = 8;
  Granularity granularity = Granularity::kPerTensor;
  std::vector<double> alpha;
  std::vector<int64_t> beta;

  int64_t levels() const { return (int64_t{1} << bits) - 1; }
  int64_t groups() const { return static_cast<int64_t>(alpha.size()); }
};

struct QuantizedTensor {
  Shape shape;
  std::vector<int32_t> codes;
};

int64_t group_count(const Tensor& x, Granularity g);

QuantParams compute_quant_params(const Tensor& x, int bits, Granularity granularity);

QuantizedTensor quantize(const Tensor& x, const QuantParams& p);

Tensor dequantize(const QuantizedTensor& q, const QuantParams& p);

/// quantize-then-dequantize simulation.
Tensor fake_quant(const Tensor& x, int bits, Granularity granularity);

/// Same, but also reports which elements had an in-range pre-clamp code
/// (the straight-through gradient mask).
struct FakeQuantResult {
  Tensor values;
  std::vector<uint8_t> pass_mask;
};
FakeQuantResult fake_quant_with_mask(const Tensor& x, int bits, Granularity granularity);

}  // namespace creq::quant
