#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "creq/quant.hpp"
#include "creq/tensor.hpp"

namespace creq::reassembly {

/// Per-input-channel extrema over a calibration set.
struct ChannelStats {
  std::vector<double> max;
  std::vector<double> min;
  std::vector<double> max_abs;
  int64_t channels() const { return static_cast<int64_t>(max.size()); }
};

struct MergePair {
  int64_t src;  // post-disassembly index, removed by the merge
  int64_t dst;  // post-disassembly index, receives the average
  bool operator==(const MergePair&) const = default;
};

/// Precomputed channel reassembly: split counts for disassembly plus the
/// merge pairs that restore the original channel count. Indices in
/// merge_pairs refer to post-disassembly positions; sub-channels created by
/// a split are protected and never merged.
struct ReassemblyPlan {
  double theta = 0.0;
  std::vector<int64_t> splits;          // T_i >= 1 per original channel
  std::vector<MergePair> merge_pairs;   // ordered, deterministic
  std::vector<int64_t> protected_channels;

  int64_t original_channels() const { return static_cast<int64_t>(splits.size()); }
  int64_t expanded_channels() const;
  int64_t extra_channels() const;
  double expansion_ratio() const;
  bool is_identity() const;

  static ReassemblyPlan identity(int64_t channels);
};

void validate_plan(const ReassemblyPlan& plan);

enum class ReassemblyMode { kOff, kFixedRatio, kAdaptive };

const char* to_string(ReassemblyMode m);

struct ReassemblyConfig {
  ReassemblyMode mode = ReassemblyMode::kAdaptive;
  double gamma = 0.0;     // expansion-ratio budget, fixed_ratio mode
  int64_t grid_points = 8;  // adaptive grid resolution
};

/// Bit widths used when scoring candidate plans; `enabled = false` evaluates
/// the objective without quantization (test hook).
struct QuantSpec {
  int w_bits = 4;
  int a_bits = 4;
  bool enabled = true;
};

ChannelStats channel_outlier_stats(std::span<const Tensor> calib_acts);

/// T_i = max(1, ceil(max_abs_i / theta))
std::vector<int64_t> disassembly_counts(const ChannelStats& stats, double theta);

/// Smallest grid threshold whose extra-channel count fits floor(gamma * M).
double theta_from_expansion_ratio(const ChannelStats& stats, double gamma,
                                  int64_t grid_points = 100);

/// Replace channel i by T_i adjacent copies of x_i / T_i.
Tensor disassemble(const Tensor& x, std::span<const int64_t> splits);

/// Row-replicate a weight matrix to mirror disassembled inputs (unscaled;
/// the activation carries the 1/T factor).
Tensor replicate_rows(const Tensor& w, std::span<const int64_t> splits);

double channel_distance(std::span<const double> x_i, std::span<const double> x_j,
                        std::span<const double> w_i, std::span<const double> w_j);

/// Bipartite soft matching: even-index channels propose their nearest
/// odd-index channel, the `budget` smallest edges win. Ties break toward the
/// lower channel index.
std::vector<MergePair> find_merge_pairs(const Tensor& acts, const Tensor& weights,
                                        int64_t budget,
                                        std::span<const int64_t> protected_channels);

/// Merge each pair's source column into its destination (arithmetic mean of
/// every participant), preserving the relative order of survivors.
Tensor assemble(const Tensor& x, std::span<const MergePair> merge_pairs,
                std::span<const int64_t> protected_channels = {});

/// Disassembly (row replication) plus assembly (row sums) applied to the
/// consuming layer's weights; output has exactly the original row count.
Tensor reassemble_weights(const Tensor& w, const ReassemblyPlan& plan);

/// Fold a runtime plan into the preceding linear layer's output channels:
/// splits become scaled column copies, merges average columns.
Tensor fold_plan_into_previous_linear(const Tensor& w_prev, const ReassemblyPlan& plan);

/// Disassemble-then-assemble with precomputed indices; channel count is
/// preserved.
Tensor apply_plan_runtime(const Tensor& x, const ReassemblyPlan& plan);

/// Adjoint of apply_plan_runtime (it is linear); used for backprop.
Tensor apply_plan_adjoint(const Tensor& grad_out, const ReassemblyPlan& plan);

double attention_reassembly_error(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                  const Tensor& w_v, int64_t n_heads,
                                  const ReassemblyPlan& plan, const QuantSpec& qs);

double linear_reassembly_error(const Tensor& x, std::span<const Tensor* const> weights,
                               const ReassemblyPlan& plan, const QuantSpec& qs);

enum class Objective { kAttention, kLinear };

struct SearchResult {
  double theta = 0.0;
  ReassemblyPlan plan;
  double objective = 0.0;
  std::vector<double> grid_thetas;
  std::vector<double> grid_objectives;  // +inf marks infeasible candidates
};

/// Build a complete plan (splits, protection, matching) for one threshold.
ReassemblyPlan build_plan(const ChannelStats& stats, double theta,
                          std::span<const Tensor> acts, const Tensor& weights_concat);

/// Plan for the smallest grid threshold that fits the extra-channel budget
/// floor(gamma * M) and admits a feasible matching; larger thresholds are
/// tried when the bipartite matching runs out of pairs.
ReassemblyPlan build_plan_fixed_ratio(const ChannelStats& stats, double gamma,
                                      std::span<const Tensor> acts, const Tensor& weights_concat,
                                      int64_t grid_points = 100);

/// Algorithm: evaluate the objective on the P-point threshold grid over
/// [min(max_abs), max(max_abs)] and keep the argmin; ties prefer larger theta.
SearchResult adaptive_search(const ChannelStats& stats, std::span<const Tensor> acts,
                             std::span<const Tensor* const> consuming_weights,
                             int64_t grid_points, const QuantSpec& qs, Objective objective,
                             int64_t n_heads = 1);

}  // namespace creq::reassembly
