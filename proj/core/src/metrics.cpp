#include "creq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace creq::metrics {

std::string channel_minmax_csv(const reassembly::ChannelStats& stats) {
  std::ostringstream out;
  out.precision(17);
  out << "channel_index,min,max\n";
  for (int64_t c = 0; c < stats.channels(); ++c)
    out << c << ',' << stats.min[static_cast<size_t>(c)] << ','
        << stats.max[static_cast<size_t>(c)] << '\n';
  return out.str();
}

double stage_output_mse(const model::Model& model_fp, const model::Model& model_q,
                        const model::ForwardOptions& q_opt, const model::ModelPlans* plans,
                        std::span<const Tensor> eval_set) {
  if (eval_set.empty()) fail("empty evaluation set");
  model::ForwardOptions fp_opt;
  double total = 0.0;
  for (const Tensor& x : eval_set) {
    Tensor ref = model::model_forward(x, model_fp, fp_opt);
    Tensor got = model::model_forward(x, model_q, q_opt, plans);
    total += mean_squared(ref, got);
  }
  return total / static_cast<double>(eval_set.size());
}

double channel_quantile(const Tensor& t, int64_t channel, double p) {
  if (t.rank() != 2) fail("channel_quantile expects a 2-D tensor");
  if (p < 0.0 || p > 1.0) fail("quantile level must be in [0, 1]");
  std::vector<double> column(static_cast<size_t>(t.rows()));
  for (int64_t r = 0; r < t.rows(); ++r) column[static_cast<size_t>(r)] = t.at(r, channel);
  std::sort(column.begin(), column.end());
  const double pos = p * static_cast<double>(column.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, column.size() - 1);
  const double frac = pos - std::floor(pos);
  return column[lo] + frac * (column[hi] - column[lo]);
}

double percentile_mse(const Tensor& before, const Tensor& after, double p) {
  if (!before.same_shape(after)) fail("percentile_mse shape mismatch");
  const int64_t channels = before.cols();
  double total = 0.0;
  for (int64_t c = 0; c < channels; ++c) {
    double d = channel_quantile(before, c, p) - channel_quantile(after, c, p);
    total += d * d;
  }
  return total / static_cast<double>(channels);
}

double channel_extreme_mse(const Tensor& before, const Tensor& after, bool use_max) {
  if (!before.same_shape(after)) fail("channel_extreme_mse shape mismatch");
  const int64_t channels = before.cols();
  double total = 0.0;
  for (int64_t c = 0; c < channels; ++c) {
    double b = before.at(0, c), a = after.at(0, c);
    for (int64_t r = 1; r < before.rows(); ++r) {
      b = use_max ? std::max(b, before.at(r, c)) : std::min(b, before.at(r, c));
      a = use_max ? std::max(a, after.at(r, c)) : std::min(a, after.at(r, c));
    }
    const double d = b - a;
    total += d * d;
  }
  return total / static_cast<double>(channels);
}

BopBreakdown bop_count(const ArchDims& dims, int64_t seq_len, int b_w, int b_a,
                       int64_t extra_channels) {
  if (dims.n_layers < 0 || dims.d_model <= 0 || dims.n_heads <= 0 || dims.d_ff <= 0 ||
      seq_len <= 0)
    fail("bop_count dims must be positive");
  const double l = static_cast<double>(seq_len);
  const double d = static_cast<double>(dims.d_model);
  const double ff = static_cast<double>(dims.d_ff);

  // per layer: q, k, v, o projections plus gate/up/down
  double proj_macs = dims.n_layers * (4.0 * l * d * d + 2.0 * l * d * ff + l * ff * d);
  if (dims.head_in > 0 && dims.head_out > 0)
    proj_macs += l * static_cast<double>(dims.head_in) * static_cast<double>(dims.head_out);
  // scores QK^T and the value matmul, both L x L x d per layer in total
  const double attn_macs = dims.n_layers * 2.0 * l * l * d;

  BopBreakdown out;
  out.weight_matmul_bops = 2.0 * proj_macs * static_cast<double>(b_w) * static_cast<double>(b_a);
  out.attention_bops = 2.0 * attn_macs * static_cast<double>(b_a) * static_cast<double>(b_a);
  out.reassembly_extra_ops = l * static_cast<double>(extra_channels);
  return out;
}

}  // namespace creq::metrics
