#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "creq/autodiff.hpp"
#include "creq/reassembly.hpp"
#include "creq/tensor.hpp"

namespace creq::model {

struct ModelConfig {
  int64_t d_model = 32;
  int64_t n_heads = 4;
  int64_t d_ff = 86;
  int64_t n_layers = 8;
  int64_t seq_len = 64;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

/// Pre-norm Attention-FFN block, SiLU-gated FFN.
struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;  // d_model x d_model
  Tensor ln2_gain, ln2_bias;
  Tensor w_gate, w_up;  // d_model x d_ff
  Tensor w_down;        // d_ff x d_model
};

struct Model {
  ModelConfig config;
  std::vector<BlockWeights> blocks;
};

struct OutlierSpec {
  std::vector<int64_t> channels;
  double magnification = 50.0;
};

struct CalibrationSet {
  std::vector<Tensor> samples;  // each seq_len x d_model
  uint64_t seed = 0;
  OutlierSpec outlier_spec;
};

/// Trainable low-rank factors added to one projection: Y += quant(X) * A * B.
struct LowRankAdapter {
  Tensor a;  // in x r
  Tensor b;  // r x out
  int64_t rank() const { return a.rank() == 2 ? a.cols() : 0; }
};

struct BlockAdapters {
  LowRankAdapter q, k, v, o, gate, up, down;
};
using ModelAdapters = std::vector<BlockAdapters>;

/// Reassembly plans per activation site. q/k/v share one plan, gate/up share
/// one, down has its own; the attention output projection gets none.
struct SitePlans {
  std::optional<reassembly::ReassemblyPlan> qkv;
  std::optional<reassembly::ReassemblyPlan> ffn_in;
  std::optional<reassembly::ReassemblyPlan> ffn_down;
};
using ModelPlans = std::vector<SitePlans>;

enum class ForwardMode { kFp, kQuantsim };

struct ForwardOptions {
  ForwardMode mode = ForwardMode::kFp;
  int w_bits = 4;
  int a_bits = 4;
};

/// Adapter factor leaves already registered on the tape.
struct AdapterNodes {
  NodeId a = -1;
  NodeId b = -1;
};
struct BlockAdapterNodes {
  AdapterNodes q, k, v, o, gate, up, down;
};

/// Projection-input node ids (pre-plan, pre-quant), for calibration capture.
struct BlockSiteNodes {
  NodeId attn_in = -1;
  NodeId ffn_in = -1;
  NodeId ffn_down_in = -1;
};

/// Builds one block on the tape. In quantsim mode every projection input is
/// fake-quantized per token and every weight per channel; softmax
/// probabilities stay full precision; a causal mask is always applied. When
/// plans are given the weights in `w` must already be reassembled to match.
NodeId block_forward_tape(Tape& tape, NodeId x, const BlockWeights& w, int64_t n_heads,
                          const ForwardOptions& opt, const SitePlans* plans = nullptr,
                          const BlockAdapterNodes* adapters = nullptr,
                          BlockSiteNodes* sites = nullptr);

Tensor block_forward(const Tensor& x, const BlockWeights& w, int64_t n_heads,
                     const ForwardOptions& opt, const SitePlans* plans = nullptr,
                     const BlockAdapters* adapters = nullptr);

Tensor model_forward(const Tensor& x, const Model& m, const ForwardOptions& opt,
                     const ModelPlans* plans = nullptr, const ModelAdapters* adapters = nullptr);

/// Original (full-precision, plan-free) inputs of every reassembly site,
/// per block, per calibration sample.
struct SiteActivations {
  std::vector<Tensor> qkv;
  std::vector<Tensor> ffn_in;
  std::vector<Tensor> ffn_down;
};
std::vector<SiteActivations> collect_site_inputs(const Model& m, std::span<const Tensor> samples);

/// Gaussian weights (std 1 / sqrt(fan-in)); LN gains are 1 except at the
/// requested outlier channels, which are multiplied by the magnification so
/// those activation channels dominate across tokens. Values are rounded to
/// f32 so checkpoints round-trip losslessly.
Model gen_synthetic_model(const ModelConfig& config, uint64_t seed, const OutlierSpec& outliers);

CalibrationSet gen_calibration(const ModelConfig& config, uint64_t seed, int64_t n_samples);

/// Registers adapter tensors of one block as trainable tape leaves.
BlockAdapterNodes register_adapters(Tape& tape, BlockAdapters& adapters, bool trainable);

}  // namespace creq::model
