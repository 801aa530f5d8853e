#pragma once

#include <cstdint>
#include <vector>

#include "creq/checkpoint.hpp"
#include "creq/model.hpp"

namespace creq::correction {

struct CorrectionConfig {
  int64_t rank = 4;
  int64_t epochs = 10;
  int64_t batch_size = 1;
  double lr = 5e-4;
  int64_t group_size = 4;

  void validate() const;
};

struct ReconstructionTrace {
  int64_t first_block = 0;
  int64_t n_blocks = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool improved = false;
  int64_t trainable_params = 0;
  std::vector<double> step_losses;
};

/// One adapter per projection (q, k, v, o, gate, up, down) per block.
/// A is seeded Gaussian * 1e-3, B starts at zero, so freshly attached
/// adapters leave the forward pass bit-identical.
model::ModelAdapters attach_adapters(const model::Model& m, int64_t rank, uint64_t seed);

int64_t trainable_param_count(const model::BlockAdapters& block);
int64_t trainable_param_count(const model::ModelAdapters& adapters);

/// Trains the adapters of blocks [first_block, first_block + n_blocks) so the
/// quantized group's final output matches the full-precision targets. Weights
/// stay frozen; gradients reach the adapters through the straight-through
/// fake-quant estimator. Loss is the mean over samples and elements.
ReconstructionTrace reconstruct_group(const model::Model& q_model,
                                      const model::ModelPlans& plans,
                                      model::ModelAdapters& adapters, int64_t first_block,
                                      int64_t n_blocks, std::span<const Tensor> fp_targets,
                                      std::span<const Tensor> q_inputs,
                                      const model::ForwardOptions& opt,
                                      const CorrectionConfig& cfg);

struct SequentialResult {
  model::ModelAdapters adapters;
  std::vector<ReconstructionTrace> traces;
};

/// Front-to-back group reconstruction: each group's inputs come from the
/// already-corrected quantized pipeline, its targets from the original model.
SequentialResult sequential_correct(const model::Model& fp_model, const model::Model& q_model,
                                    const model::ModelPlans& plans, std::span<const Tensor> calib,
                                    const model::ForwardOptions& opt, const CorrectionConfig& cfg,
                                    uint64_t seed);

/// quant(W + A * B) per output channel; the adapter is discarded afterwards.
checkpoint::QuantizedProjection merge_adapter(const Tensor& w, const model::LowRankAdapter& ad,
                                              int bits,
                                              quant::Granularity granularity =
                                                  quant::Granularity::kPerChannel);

/// Merge every trained adapter into the (reassembled, full-precision) weights
/// and quantize the result into a storable model.
checkpoint::QuantizedModel merge_all(const model::Model& reassembled_fp,
                                     const model::ModelPlans& plans,
                                     const model::ModelAdapters& adapters, int w_bits, int a_bits);

}  // namespace creq::correction
