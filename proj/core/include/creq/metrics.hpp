#pragma once

#include <cstdint>
#include <string>

#include "creq/model.hpp"
#include "creq/reassembly.hpp"
#include "creq/tensor.hpp"

namespace creq::metrics {

/// CSV with header and one `channel_index,min,max` row per channel.
std::string channel_minmax_csv(const reassembly::ChannelStats& stats);

/// Mean squared error between final hidden states of the reference model
/// (full precision) and the candidate model run with `q_opt`.
double stage_output_mse(const model::Model& model_fp, const model::Model& model_q,
                        const model::ForwardOptions& q_opt, const model::ModelPlans* plans,
                        std::span<const Tensor> eval_set);

/// Linear-interpolation quantile of one channel (column) of a 2-D tensor.
double channel_quantile(const Tensor& t, int64_t channel, double p);

/// MSE between the per-channel p-quantile vectors of two equal-shape tensors.
double percentile_mse(const Tensor& before, const Tensor& after, double p);

/// MSE between per-channel maxima (or minima) of two tensors.
double channel_extreme_mse(const Tensor& before, const Tensor& after, bool use_max);

struct ArchDims {
  int64_t n_layers = 0;
  int64_t d_model = 0;
  int64_t n_heads = 0;
  int64_t d_ff = 0;
  int64_t head_in = 0;   // optional output head (0 = absent)
  int64_t head_out = 0;
};

/// Bit-operation cost model: 2 * MAC * b_w * b_a over projection matmuls
/// (output head included when present) plus the attention score/value matmuls
/// at b_a * b_a. Channel-reassembly overhead is one op per token per extra
/// channel, reported separately.
struct BopBreakdown {
  double weight_matmul_bops = 0.0;
  double attention_bops = 0.0;
  double reassembly_extra_ops = 0.0;
  double total() const { return weight_matmul_bops + attention_bops; }
};

BopBreakdown bop_count(const ArchDims& dims, int64_t seq_len, int b_w, int b_a,
                       int64_t extra_channels = 0);

}  // namespace creq::metrics
