#include "creq/reassembly.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace creq::reassembly {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMaskValue = -1e30;

std::vector<int64_t> split_offsets(std::span<const int64_t> splits) {
  std::vector<int64_t> offsets(splits.size() + 1, 0);
  for (size_t i = 0; i < splits.size(); ++i) offsets[i + 1] = offsets[i] + splits[i];
  return offsets;
}

struct MergeGroups {
  // participants per destination, destination first, sources in plan order
  std::map<int64_t, std::vector<int64_t>> by_dst;
  std::vector<uint8_t> is_src;

  MergeGroups(std::span<const MergePair> pairs, int64_t expanded) {
    is_src.assign(static_cast<size_t>(expanded), 0);
    for (const MergePair& p : pairs) {
      auto& group = by_dst[p.dst];
      if (group.empty()) group.push_back(p.dst);
      group.push_back(p.src);
      is_src[static_cast<size_t>(p.src)] = 1;
    }
  }
};

Tensor stack_rows(std::span<const Tensor> samples) {
  if (samples.empty()) fail("empty calibration set");
  int64_t cols = samples[0].cols();
  int64_t rows = 0;
  for (const Tensor& s : samples) {
    if (s.rank() != 2 || s.cols() != cols) fail("calibration samples disagree on channels");
    rows += s.rows();
  }
  Tensor out = Tensor::zeros({rows, cols});
  int64_t r = 0;
  for (const Tensor& s : samples) {
    std::copy(s.raw(), s.raw() + s.numel(), out.raw() + r * cols);
    r += s.rows();
  }
  return out;
}

double sq_norm_diff_col(const Tensor& x, int64_t i, int64_t j) {
  double s = 0.0;
  for (int64_t r = 0; r < x.rows(); ++r) {
    double d = x.at(r, i) - x.at(r, j);
    s += d * d;
  }
  return s;
}

double sq_norm_diff_row(const Tensor& w, int64_t i, int64_t j) {
  double s = 0.0;
  for (int64_t c = 0; c < w.cols(); ++c) {
    double d = w.at(i, c) - w.at(j, c);
    s += d * d;
  }
  return s;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t n_heads) {
  const int64_t rows = q.rows(), width = q.cols();
  if (width % n_heads != 0) fail("head count does not divide width");
  const int64_t dh = width / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = Tensor::zeros({rows, width});
  for (int64_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transposed(kh)), inv_sqrt_dh);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = i + 1; j < rows; ++j) scores.at(i, j) += kMaskValue;
    Tensor ctx = matmul(softmax_rows(scores), vh);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < dh; ++j) out.at(i, h * dh + j) = ctx.at(i, j);
  }
  return out;
}

}  // namespace

const char* to_string(ReassemblyMode m) {
  switch (m) {
    case ReassemblyMode::kOff: return "off";
    case ReassemblyMode::kFixedRatio: return "fixed_ratio";
    case ReassemblyMode::kAdaptive: return "adaptive";
  }
  return "?";
}

int64_t ReassemblyPlan::expanded_channels() const {
  int64_t n = 0;
  for (int64_t t : splits) n += t;
  return n;
}

int64_t ReassemblyPlan::extra_channels() const {
  return expanded_channels() - original_channels();
}

double ReassemblyPlan::expansion_ratio() const {
  if (splits.empty()) return 0.0;
  return static_cast<double>(extra_channels()) / static_cast<double>(original_channels());
}

bool ReassemblyPlan::is_identity() const {
  if (!merge_pairs.empty()) return false;
  return std::all_of(splits.begin(), splits.end(), [](int64_t t) { return t == 1; });
}

ReassemblyPlan ReassemblyPlan::identity(int64_t channels) {
  ReassemblyPlan plan;
  plan.splits.assign(static_cast<size_t>(channels), 1);
  return plan;
}

void validate_plan(const ReassemblyPlan& plan) {
  const int64_t expanded = plan.expanded_channels();
  int64_t extra = 0;
  for (int64_t t : plan.splits) {
    if (t < 1) fail("plan split count < 1");
    extra += t - 1;
  }
  if (extra != static_cast<int64_t>(plan.merge_pairs.size()))
    fail("plan does not restore the channel count");
  std::vector<uint8_t> prot(static_cast<size_t>(expanded), 0);
  for (int64_t p : plan.protected_channels) {
    if (p < 0 || p >= expanded) fail("protected index out of range");
    prot[static_cast<size_t>(p)] = 1;
  }
  std::vector<uint8_t> used_src(static_cast<size_t>(expanded), 0);
  for (const MergePair& mp : plan.merge_pairs) {
    if (mp.src < 0 || mp.src >= expanded || mp.dst < 0 || mp.dst >= expanded)
      fail("merge index out of range");
    if (mp.src == mp.dst) fail("merge pair with src == dst");
    if (prot[static_cast<size_t>(mp.src)] || prot[static_cast<size_t>(mp.dst)])
      fail("merge pair touches a protected channel");
    if (used_src[static_cast<size_t>(mp.src)]) fail("channel used as source twice");
    used_src[static_cast<size_t>(mp.src)] = 1;
  }
  for (const MergePair& mp : plan.merge_pairs)
    if (used_src[static_cast<size_t>(mp.dst)]) fail("merge destination also used as source");
}

ChannelStats channel_outlier_stats(std::span<const Tensor> calib_acts) {
  if (calib_acts.empty()) fail("empty calibration set");
  const int64_t channels = calib_acts[0].cols();
  ChannelStats stats;
  stats.max.assign(static_cast<size_t>(channels), -kInf);
  stats.min.assign(static_cast<size_t>(channels), kInf);
  stats.max_abs.assign(static_cast<size_t>(channels), 0.0);
  for (const Tensor& sample : calib_acts) {
    if (sample.rank() != 2 || sample.cols() != channels)
      fail("calibration samples disagree on channels");
    for (int64_t r = 0; r < sample.rows(); ++r) {
      for (int64_t c = 0; c < channels; ++c) {
        double v = sample.at(r, c);
        stats.max[static_cast<size_t>(c)] = std::max(stats.max[static_cast<size_t>(c)], v);
        stats.min[static_cast<size_t>(c)] = std::min(stats.min[static_cast<size_t>(c)], v);
      }
    }
  }
  for (int64_t c = 0; c < channels; ++c)
    stats.max_abs[static_cast<size_t>(c)] =
        std::max(std::fabs(stats.max[static_cast<size_t>(c)]),
                 std::fabs(stats.min[static_cast<size_t>(c)]));
  return stats;
}

std::vector<int64_t> disassembly_counts(const ChannelStats& stats, double theta) {
  if (!(theta > 0.0)) fail("theta must be positive");
  std::vector<int64_t> splits(stats.max_abs.size(), 1);
  for (size_t i = 0; i < stats.max_abs.size(); ++i) {
    int64_t t = static_cast<int64_t>(std::ceil(stats.max_abs[i] / theta));
    splits[i] = std::max<int64_t>(1, t);
  }
  return splits;
}

double theta_from_expansion_ratio(const ChannelStats& stats, double gamma, int64_t grid_points) {
  if (gamma < 0.0) fail("gamma must be non-negative");
  if (grid_points < 1) fail("grid_points must be >= 1");
  const auto& m = stats.max_abs;
  if (m.empty()) fail("empty channel stats");
  double lo = *std::min_element(m.begin(), m.end());
  double hi = *std::max_element(m.begin(), m.end());
  const int64_t budget =
      static_cast<int64_t>(std::floor(gamma * static_cast<double>(m.size())));
  if (budget == 0 || hi <= 0.0) return hi;
  for (int64_t p = 1; p <= grid_points; ++p) {
    double theta = lo + (static_cast<double>(p) / static_cast<double>(grid_points)) * (hi - lo);
    if (!(theta > 0.0)) continue;
    std::vector<int64_t> splits = disassembly_counts(stats, theta);
    int64_t extra = 0;
    for (int64_t t : splits) extra += t - 1;
    if (extra <= budget) return theta;
  }
  return hi;
}

Tensor disassemble(const Tensor& x, std::span<const int64_t> splits) {
  if (x.rank() != 2) fail("disassemble expects 2-D activations");
  if (static_cast<int64_t>(splits.size()) != x.cols()) fail("splits length != channel count");
  std::vector<int64_t> offsets = split_offsets(splits);
  Tensor out = Tensor::zeros({x.rows(), offsets.back()});
  for (int64_t r = 0; r < x.rows(); ++r) {
    for (int64_t c = 0; c < x.cols(); ++c) {
      const int64_t t = splits[static_cast<size_t>(c)];
      const double v = x.at(r, c) / static_cast<double>(t);
      for (int64_t k = 0; k < t; ++k) out.at(r, offsets[static_cast<size_t>(c)] + k) = v;
    }
  }
  return out;
}

Tensor replicate_rows(const Tensor& w, std::span<const int64_t> splits) {
  if (w.rank() != 2) fail("replicate_rows expects 2-D weights");
  if (static_cast<int64_t>(splits.size()) != w.rows()) fail("splits length != weight rows");
  std::vector<int64_t> offsets = split_offsets(splits);
  Tensor out = Tensor::zeros({offsets.back(), w.cols()});
  for (int64_t r = 0; r < w.rows(); ++r)
    for (int64_t k = 0; k < splits[static_cast<size_t>(r)]; ++k)
      for (int64_t c = 0; c < w.cols(); ++c)
        out.at(offsets[static_cast<size_t>(r)] + k, c) = w.at(r, c);
  return out;
}

double channel_distance(std::span<const double> x_i, std::span<const double> x_j,
                        std::span<const double> w_i, std::span<const double> w_j) {
  if (x_i.size() != x_j.size() || w_i.size() != w_j.size()) fail("channel_distance shape mismatch");
  double total = 0.0;
  for (size_t k = 0; k < w_i.size(); ++k) {
    const double dw = w_i[k] - w_j[k];
    for (size_t t = 0; t < x_i.size(); ++t) {
      const double e = (x_i[t] * dw + x_j[t] * (-dw)) * 0.5;
      total += e * e;
    }
  }
  return total;
}

std::vector<MergePair> find_merge_pairs(const Tensor& acts, const Tensor& weights,
                                        int64_t budget,
                                        std::span<const int64_t> protected_channels) {
  if (acts.rank() != 2 || weights.rank() != 2) fail("find_merge_pairs expects 2-D inputs");
  if (acts.cols() != weights.rows()) fail("activations/weights channel mismatch");
  if (budget < 0) fail("negative merge budget");
  const int64_t channels = acts.cols();
  std::vector<uint8_t> prot(static_cast<size_t>(channels), 0);
  for (int64_t p : protected_channels) prot[static_cast<size_t>(p)] = 1;

  std::vector<int64_t> set_a, set_b;
  for (int64_t c = 0; c < channels; ++c) {
    if (prot[static_cast<size_t>(c)]) continue;
    (c % 2 == 0 ? set_a : set_b).push_back(c);
  }
  if (budget == 0) return {};

  struct Edge {
    double dist;
    int64_t src, dst;
  };
  std::vector<Edge> edges;
  edges.reserve(set_a.size());
  for (int64_t a : set_a) {
    double best = kInf;
    int64_t best_b = -1;
    for (int64_t b : set_b) {
      // D(i,j) factorizes as |x_i - x_j|^2 * |W_i - W_j|^2 / 4
      double d = sq_norm_diff_col(acts, a, b) * sq_norm_diff_row(weights, a, b) * 0.25;
      if (d < best || (d == best && b < best_b)) {
        best = d;
        best_b = b;
      }
    }
    if (best_b >= 0) edges.push_back({best, a, best_b});
  }
  if (budget > static_cast<int64_t>(edges.size()))
    fail("merge budget exceeds the available channel pairs");
  std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    if (l.dist != r.dist) return l.dist < r.dist;
    return l.src < r.src;
  });
  std::vector<MergePair> pairs;
  pairs.reserve(static_cast<size_t>(budget));
  for (int64_t i = 0; i < budget; ++i) pairs.push_back({edges[static_cast<size_t>(i)].src,
                                                        edges[static_cast<size_t>(i)].dst});
  return pairs;
}

Tensor assemble(const Tensor& x, std::span<const MergePair> merge_pairs,
                std::span<const int64_t> protected_channels) {
  if (x.rank() != 2) fail("assemble expects 2-D activations");
  const int64_t channels = x.cols();
  std::vector<uint8_t> prot(static_cast<size_t>(channels), 0);
  for (int64_t p : protected_channels) {
    if (p < 0 || p >= channels) fail("protected index out of range");
    prot[static_cast<size_t>(p)] = 1;
  }
  for (const MergePair& mp : merge_pairs)
    if (prot[static_cast<size_t>(mp.src)] || prot[static_cast<size_t>(mp.dst)])
      fail("merge pair touches a protected channel");

  MergeGroups groups(merge_pairs, channels);
  Tensor out = Tensor::zeros({x.rows(), channels - static_cast<int64_t>(merge_pairs.size())});
  int64_t col = 0;
  for (int64_t c = 0; c < channels; ++c) {
    if (groups.is_src[static_cast<size_t>(c)]) continue;
    auto it = groups.by_dst.find(c);
    if (it == groups.by_dst.end()) {
      for (int64_t r = 0; r < x.rows(); ++r) out.at(r, col) = x.at(r, c);
    } else {
      const auto& members = it->second;
      const double inv = 1.0 / static_cast<double>(members.size());
      for (int64_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (int64_t m : members) s += x.at(r, m);
        out.at(r, col) = s * inv;
      }
    }
    ++col;
  }
  return out;
}

Tensor reassemble_weights(const Tensor& w, const ReassemblyPlan& plan) {
  if (w.rank() != 2) fail("reassemble_weights expects 2-D weights");
  if (w.rows() != plan.original_channels()) fail("plan/weight channel mismatch");
  Tensor expanded = replicate_rows(w, plan.splits);
  MergeGroups groups(plan.merge_pairs, expanded.rows());
  Tensor out = Tensor::zeros({plan.original_channels(), w.cols()});
  int64_t row = 0;
  for (int64_t c = 0; c < expanded.rows(); ++c) {
    if (groups.is_src[static_cast<size_t>(c)]) continue;
    auto it = groups.by_dst.find(c);
    if (it == groups.by_dst.end()) {
      for (int64_t k = 0; k < w.cols(); ++k) out.at(row, k) = expanded.at(c, k);
    } else {
      for (int64_t k = 0; k < w.cols(); ++k) {
        double s = 0.0;
        for (int64_t m : it->second) s += expanded.at(m, k);
        out.at(row, k) = s;
      }
    }
    ++row;
  }
  return out;
}

Tensor fold_plan_into_previous_linear(const Tensor& w_prev, const ReassemblyPlan& plan) {
  if (w_prev.rank() != 2) fail("fold expects 2-D weights");
  if (w_prev.cols() != plan.original_channels())
    fail("previous layer output channels do not match the plan");
  const int64_t in = w_prev.rows();
  std::vector<int64_t> offsets = split_offsets(plan.splits);
  Tensor expanded = Tensor::zeros({in, offsets.back()});
  for (int64_t c = 0; c < w_prev.cols(); ++c) {
    const int64_t t = plan.splits[static_cast<size_t>(c)];
    const double inv = 1.0 / static_cast<double>(t);
    for (int64_t r = 0; r < in; ++r) {
      const double v = w_prev.at(r, c) * inv;
      for (int64_t k = 0; k < t; ++k) expanded.at(r, offsets[static_cast<size_t>(c)] + k) = v;
    }
  }
  MergeGroups groups(plan.merge_pairs, expanded.cols());
  Tensor out = Tensor::zeros({in, plan.original_channels()});
  int64_t col = 0;
  for (int64_t c = 0; c < expanded.cols(); ++c) {
    if (groups.is_src[static_cast<size_t>(c)]) continue;
    auto it = groups.by_dst.find(c);
    if (it == groups.by_dst.end()) {
      for (int64_t r = 0; r < in; ++r) out.at(r, col) = expanded.at(r, c);
    } else {
      const double inv = 1.0 / static_cast<double>(it->second.size());
      for (int64_t r = 0; r < in; ++r) {
        double s = 0.0;
        for (int64_t m : it->second) s += expanded.at(r, m);
        out.at(r, col) = s * inv;
      }
    }
    ++col;
  }
  return out;
}

Tensor apply_plan_runtime(const Tensor& x, const ReassemblyPlan& plan) {
  if (x.cols() != plan.original_channels()) fail("plan/input channel mismatch");
  if (plan.is_identity()) return x;
  Tensor expanded = disassemble(x, plan.splits);
  return assemble(expanded, plan.merge_pairs, plan.protected_channels);
}

Tensor apply_plan_adjoint(const Tensor& grad_out, const ReassemblyPlan& plan) {
  if (plan.is_identity()) return grad_out;
  const int64_t expanded = plan.expanded_channels();
  MergeGroups groups(plan.merge_pairs, expanded);
  // adjoint of assemble
  Tensor g_exp = Tensor::zeros({grad_out.rows(), expanded});
  int64_t col = 0;
  for (int64_t c = 0; c < expanded; ++c) {
    if (groups.is_src[static_cast<size_t>(c)]) continue;
    auto it = groups.by_dst.find(c);
    if (it == groups.by_dst.end()) {
      for (int64_t r = 0; r < grad_out.rows(); ++r) g_exp.at(r, c) = grad_out.at(r, col);
    } else {
      const double inv = 1.0 / static_cast<double>(it->second.size());
      for (int64_t r = 0; r < grad_out.rows(); ++r) {
        const double g = grad_out.at(r, col) * inv;
        for (int64_t m : it->second) g_exp.at(r, m) = g;
      }
    }
    ++col;
  }
  // adjoint of disassemble
  std::vector<int64_t> offsets = split_offsets(plan.splits);
  Tensor g_in = Tensor::zeros({grad_out.rows(), plan.original_channels()});
  for (int64_t c = 0; c < plan.original_channels(); ++c) {
    const int64_t t = plan.splits[static_cast<size_t>(c)];
    const double inv = 1.0 / static_cast<double>(t);
    for (int64_t r = 0; r < grad_out.rows(); ++r) {
      double s = 0.0;
      for (int64_t k = 0; k < t; ++k) s += g_exp.at(r, offsets[static_cast<size_t>(c)] + k);
      g_in.at(r, c) = s * inv;
    }
  }
  return g_in;
}

namespace {

double attention_error_against_ref(const Tensor& x, const Tensor& ref, const Tensor& w_q,
                                   const Tensor& w_k, const Tensor& w_v, int64_t n_heads,
                                   const ReassemblyPlan& plan, const QuantSpec& qs) {
  Tensor x_hat = apply_plan_runtime(x, plan);
  if (qs.enabled) x_hat = quant::fake_quant(x_hat, qs.a_bits, quant::Granularity::kPerToken);
  auto project = [&](const Tensor& w) {
    Tensor w_hat = reassemble_weights(w, plan);
    if (qs.enabled) w_hat = quant::fake_quant(w_hat, qs.w_bits, quant::Granularity::kPerChannel);
    return matmul(x_hat, w_hat);
  };
  Tensor approx = masked_attention(project(w_q), project(w_k), project(w_v), n_heads);
  double err = 0.0;
  for (int64_t i = 0; i < ref.numel(); ++i) {
    double d = ref.at(i) - approx.at(i);
    err += d * d;
  }
  return err;
}

double linear_error_against_refs(const Tensor& x, std::span<const Tensor> refs,
                                 std::span<const Tensor* const> weights,
                                 const ReassemblyPlan& plan, const QuantSpec& qs) {
  Tensor x_hat = apply_plan_runtime(x, plan);
  if (qs.enabled) x_hat = quant::fake_quant(x_hat, qs.a_bits, quant::Granularity::kPerToken);
  double err = 0.0;
  for (size_t k = 0; k < weights.size(); ++k) {
    Tensor w_hat = reassemble_weights(*weights[k], plan);
    if (qs.enabled) w_hat = quant::fake_quant(w_hat, qs.w_bits, quant::Granularity::kPerChannel);
    Tensor approx = matmul(x_hat, w_hat);
    const Tensor& ref = refs[k];
    for (int64_t i = 0; i < ref.numel(); ++i) {
      double d = ref.at(i) - approx.at(i);
      err += d * d;
    }
  }
  return err;
}

}  // namespace

double attention_reassembly_error(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                  const Tensor& w_v, int64_t n_heads,
                                  const ReassemblyPlan& plan, const QuantSpec& qs) {
  Tensor ref = masked_attention(matmul(x, w_q), matmul(x, w_k), matmul(x, w_v), n_heads);
  return attention_error_against_ref(x, ref, w_q, w_k, w_v, n_heads, plan, qs);
}

double linear_reassembly_error(const Tensor& x, std::span<const Tensor* const> weights,
                               const ReassemblyPlan& plan, const QuantSpec& qs) {
  std::vector<Tensor> refs;
  refs.reserve(weights.size());
  for (const Tensor* w : weights) refs.push_back(matmul(x, *w));
  return linear_error_against_refs(x, refs, weights, plan, qs);
}

ReassemblyPlan build_plan(const ChannelStats& stats, double theta,
                          std::span<const Tensor> acts, const Tensor& weights_concat) {
  ReassemblyPlan plan;
  plan.theta = theta;
  plan.splits = disassembly_counts(stats, theta);
  int64_t budget = 0;
  std::vector<int64_t> offsets = split_offsets(plan.splits);
  for (size_t i = 0; i < plan.splits.size(); ++i) {
    if (plan.splits[i] > 1) {
      budget += plan.splits[i] - 1;
      for (int64_t k = 0; k < plan.splits[i]; ++k)
        plan.protected_channels.push_back(offsets[i] + k);
    }
  }
  if (budget == 0) return plan;
  Tensor stacked = stack_rows(acts);
  Tensor dis_acts = disassemble(stacked, plan.splits);
  Tensor rep_w = replicate_rows(weights_concat, plan.splits);
  plan.merge_pairs = find_merge_pairs(dis_acts, rep_w, budget, plan.protected_channels);
  validate_plan(plan);
  return plan;
}

ReassemblyPlan build_plan_fixed_ratio(const ChannelStats& stats, double gamma,
                                      std::span<const Tensor> acts, const Tensor& weights_concat,
                                      int64_t grid_points) {
  const auto& m = stats.max_abs;
  double lo = *std::min_element(m.begin(), m.end());
  double hi = *std::max_element(m.begin(), m.end());
  if (hi <= 0.0) {
    ReassemblyPlan plan = ReassemblyPlan::identity(stats.channels());
    plan.theta = 1.0;
    return plan;
  }
  double first = theta_from_expansion_ratio(stats, gamma, grid_points);
  const int64_t budget =
      static_cast<int64_t>(std::floor(gamma * static_cast<double>(m.size())));
  if (budget == 0) {
    ReassemblyPlan plan = ReassemblyPlan::identity(stats.channels());
    plan.theta = first;
    return plan;
  }
  for (int64_t p = 1; p <= grid_points; ++p) {
    double theta = lo + (static_cast<double>(p) / static_cast<double>(grid_points)) * (hi - lo);
    if (theta < first || !(theta > 0.0)) continue;
    try {
      return build_plan(stats, theta, acts, weights_concat);
    } catch (const std::exception&) {
      // matching infeasible at this expansion, try the next threshold
    }
  }
  ReassemblyPlan plan = ReassemblyPlan::identity(stats.channels());
  plan.theta = hi;
  return plan;
}

SearchResult adaptive_search(const ChannelStats& stats, std::span<const Tensor> acts,
                             std::span<const Tensor* const> consuming_weights,
                             int64_t grid_points, const QuantSpec& qs, Objective objective,
                             int64_t n_heads) {
  if (grid_points < 1) fail("grid_points must be >= 1");
  if (consuming_weights.empty()) fail("adaptive_search needs consuming weights");
  if (objective == Objective::kAttention && consuming_weights.size() != 3)
    fail("attention objective expects exactly W_Q, W_K, W_V");

  const auto& m = stats.max_abs;
  double lo = *std::min_element(m.begin(), m.end());
  double hi = *std::max_element(m.begin(), m.end());

  SearchResult result;
  result.grid_thetas.assign(static_cast<size_t>(grid_points), 0.0);
  result.grid_objectives.assign(static_cast<size_t>(grid_points), kInf);
  if (hi <= 0.0) {
    result.theta = 1.0;
    result.plan = ReassemblyPlan::identity(stats.channels());
    result.plan.theta = result.theta;
    return result;
  }

  std::vector<const Tensor*> weight_ptrs(consuming_weights.begin(), consuming_weights.end());
  std::vector<const Tensor*> concat_parts = weight_ptrs;
  Tensor weights_concat = concat_cols(std::span<const Tensor* const>(concat_parts));

  // reference outputs are candidate-independent
  std::vector<Tensor> attn_refs;
  std::vector<std::vector<Tensor>> linear_refs;
  for (const Tensor& sample : acts) {
    if (objective == Objective::kAttention) {
      attn_refs.push_back(masked_attention(matmul(sample, *consuming_weights[0]),
                                           matmul(sample, *consuming_weights[1]),
                                           matmul(sample, *consuming_weights[2]), n_heads));
    } else {
      std::vector<Tensor> refs;
      for (const Tensor* w : consuming_weights) refs.push_back(matmul(sample, *w));
      linear_refs.push_back(std::move(refs));
    }
  }

  double best_obj = kInf;
  // descending thetas with a strict compare: ties keep the larger theta
  for (int64_t p = grid_points; p >= 1; --p) {
    double theta = lo + (static_cast<double>(p) / static_cast<double>(grid_points)) * (hi - lo);
    result.grid_thetas[static_cast<size_t>(p - 1)] = theta;
    if (!(theta > 0.0)) continue;
    ReassemblyPlan plan;
    try {
      plan = build_plan(stats, theta, acts, weights_concat);
    } catch (const std::exception&) {
      continue;  // candidate cannot restore the channel count
    }
    double obj = 0.0;
    for (size_t s = 0; s < acts.size(); ++s) {
      if (objective == Objective::kAttention) {
        obj += attention_error_against_ref(acts[s], attn_refs[s], *consuming_weights[0],
                                           *consuming_weights[1], *consuming_weights[2], n_heads,
                                           plan, qs);
      } else {
        obj += linear_error_against_refs(acts[s], linear_refs[static_cast<size_t>(s)],
                                         consuming_weights, plan, qs);
      }
    }
    result.grid_objectives[static_cast<size_t>(p - 1)] = obj;
    if (obj < best_obj) {
      best_obj = obj;
      result.theta = theta;
      result.plan = std::move(plan);
      result.objective = obj;
    }
  }
  if (!std::isfinite(best_obj)) {
    result.theta = hi;
    result.plan = ReassemblyPlan::identity(stats.channels());
    result.plan.theta = hi;
    result.objective = kInf;
  }
  return result;
}

}  // namespace creq::reassembly
