#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "creq/model.hpp"
#include "creq/quant.hpp"

namespace creq::checkpoint {

/// Reassembled, per-channel-quantized model: integer weight codes with their
/// quant params, the per-site plans, and the activation quantization settings.
struct QuantizedProjection {
  quant::QuantizedTensor codes;
  quant::QuantParams params;
};

struct QuantizedBlock {
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  QuantizedProjection q, k, v, o, gate, up, down;
};

struct QuantizedModel {
  model::ModelConfig config;
  int w_bits = 4;
  int a_bits = 4;
  model::ModelPlans plans;
  std::vector<QuantizedBlock> blocks;

  /// Dequantized weights plus the plans, ready for quant-sim forwards.
  model::Model to_dense() const;
};

// A checkpoint is a JSON manifest plus one little-endian binary blob of
// 32-bit values (f32 or i32 per tensor), row-major, in manifest order.
// `path` is the manifest file; the blob sits next to it with a .bin suffix.

void save_model(const model::Model& m, const std::filesystem::path& path);
model::Model load_model(const std::filesystem::path& path);

void save_calibration(const model::CalibrationSet& set, const model::ModelConfig& config,
                      const std::filesystem::path& path);
model::CalibrationSet load_calibration(const std::filesystem::path& path);

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& path);
QuantizedModel load_quantized(const std::filesystem::path& path);

std::filesystem::path blob_path(const std::filesystem::path& manifest_path);

}  // namespace creq::checkpoint
