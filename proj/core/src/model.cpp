#include "creq/model.hpp"

#include <cmath>

namespace creq::model {

namespace {

constexpr double kMaskValue = -1e30;

Tensor causal_mask(int64_t rows) {
  Tensor mask = Tensor::zeros({rows, rows});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = i + 1; j < rows; ++j) mask.at(i, j) = kMaskValue;
  return mask;
}

Tensor round_f32(Tensor t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<double>(static_cast<float>(t.at(i)));
  return t;
}

// Transformer activations carry heavily redundant, near-duplicate channels;
// channel assembly depends on that. The desk-scale stand-in draws channel
// pairs (2j, 2j+1) from a shared component at kChannelRedundancy correlation,
// keeping unit-variance marginals.
constexpr double kChannelRedundancy = 0.9;

Tensor paired_columns(Rng& rng, int64_t rows, int64_t cols, double std_dev) {
  Tensor t = Tensor::zeros({rows, cols});
  const double w_shared = std::sqrt(kChannelRedundancy) * std_dev;
  const double w_own = std::sqrt(1.0 - kChannelRedundancy) * std_dev;
  for (int64_t c = 0; c < cols; c += 2) {
    for (int64_t r = 0; r < rows; ++r) {
      const double shared = rng.gaussian() * w_shared;
      t.at(r, c) = shared + w_own * rng.gaussian();
      if (c + 1 < cols) t.at(r, c + 1) = shared + w_own * rng.gaussian();
    }
  }
  return t;
}

// projection with optional fake-quant on the weight and optional adapter term
NodeId project(Tape& tape, NodeId input, const Tensor& weight, const ForwardOptions& opt,
               const AdapterNodes* adapter) {
  NodeId w = tape.leaf(weight);
  if (opt.mode == ForwardMode::kQuantsim)
    w = tape.fake_quant(w, opt.w_bits, quant::Granularity::kPerChannel);
  NodeId out = tape.matmul(input, w);
  if (adapter && adapter->a >= 0)
    out = tape.add(out, tape.matmul(tape.matmul(input, adapter->a), adapter->b));
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || n_layers < 0 || seq_len <= 0)
    fail("model dimensions must be positive");
  if (d_model % n_heads != 0) fail("n_heads must divide d_model");
}

NodeId block_forward_tape(Tape& tape, NodeId x, const BlockWeights& w, int64_t n_heads,
                          const ForwardOptions& opt, const SitePlans* plans,
                          const BlockAdapterNodes* adapters, BlockSiteNodes* sites) {
  const bool q8 = opt.mode == ForwardMode::kQuantsim;
  const int64_t width = tape.value(x).cols();
  const int64_t dh = width / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  NodeId attn_in = tape.layer_norm(x, tape.leaf(w.ln1_gain), tape.leaf(w.ln1_bias));
  if (sites) sites->attn_in = attn_in;
  if (plans && plans->qkv) attn_in = tape.apply_plan(attn_in, *plans->qkv);
  if (q8) attn_in = tape.fake_quant(attn_in, opt.a_bits, quant::Granularity::kPerToken);

  NodeId q = project(tape, attn_in, w.w_q, opt, adapters ? &adapters->q : nullptr);
  NodeId k = project(tape, attn_in, w.w_k, opt, adapters ? &adapters->k : nullptr);
  NodeId v = project(tape, attn_in, w.w_v, opt, adapters ? &adapters->v : nullptr);

  NodeId mask = tape.leaf(causal_mask(tape.value(x).rows()));
  std::vector<NodeId> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int64_t h = 0; h < n_heads; ++h) {
    NodeId qh = tape.slice_cols(q, h * dh, dh);
    NodeId kh = tape.slice_cols(k, h * dh, dh);
    NodeId vh = tape.slice_cols(v, h * dh, dh);
    NodeId scores = tape.add(tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh), mask);
    heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
  }
  NodeId ctx = tape.concat_cols(heads);
  if (q8) ctx = tape.fake_quant(ctx, opt.a_bits, quant::Granularity::kPerToken);
  NodeId attn_out = project(tape, ctx, w.w_o, opt, adapters ? &adapters->o : nullptr);
  NodeId h1 = tape.add(x, attn_out);

  NodeId ffn_in = tape.layer_norm(h1, tape.leaf(w.ln2_gain), tape.leaf(w.ln2_bias));
  if (sites) sites->ffn_in = ffn_in;
  if (plans && plans->ffn_in) ffn_in = tape.apply_plan(ffn_in, *plans->ffn_in);
  if (q8) ffn_in = tape.fake_quant(ffn_in, opt.a_bits, quant::Granularity::kPerToken);

  NodeId gate = project(tape, ffn_in, w.w_gate, opt, adapters ? &adapters->gate : nullptr);
  NodeId up = project(tape, ffn_in, w.w_up, opt, adapters ? &adapters->up : nullptr);
  NodeId z = tape.mul(tape.silu(gate), up);
  if (sites) sites->ffn_down_in = z;
  if (plans && plans->ffn_down) z = tape.apply_plan(z, *plans->ffn_down);
  if (q8) z = tape.fake_quant(z, opt.a_bits, quant::Granularity::kPerToken);

  NodeId down = project(tape, z, w.w_down, opt, adapters ? &adapters->down : nullptr);
  return tape.add(h1, down);
}

BlockAdapterNodes register_adapters(Tape& tape, BlockAdapters& adapters, bool trainable) {
  auto reg = [&](LowRankAdapter& ad) {
    AdapterNodes nodes;
    ad.a.requires_grad = trainable;
    ad.b.requires_grad = trainable;
    nodes.a = tape.leaf(ad.a);
    nodes.b = tape.leaf(ad.b);
    return nodes;
  };
  BlockAdapterNodes out;
  out.q = reg(adapters.q);
  out.k = reg(adapters.k);
  out.v = reg(adapters.v);
  out.o = reg(adapters.o);
  out.gate = reg(adapters.gate);
  out.up = reg(adapters.up);
  out.down = reg(adapters.down);
  return out;
}

Tensor block_forward(const Tensor& x, const BlockWeights& w, int64_t n_heads,
                     const ForwardOptions& opt, const SitePlans* plans,
                     const BlockAdapters* adapters) {
  Tape tape;
  NodeId in = tape.leaf(x);
  BlockAdapterNodes nodes;
  if (adapters) {
    BlockAdapters copy = *adapters;
    nodes = register_adapters(tape, copy, false);
  }
  NodeId out = block_forward_tape(tape, in, w, n_heads, opt, plans, adapters ? &nodes : nullptr);
  return tape.value(out);
}

Tensor model_forward(const Tensor& x, const Model& m, const ForwardOptions& opt,
                     const ModelPlans* plans, const ModelAdapters* adapters) {
  if (plans && static_cast<int64_t>(plans->size()) != m.config.n_layers)
    fail("plans/layer count mismatch");
  if (adapters && static_cast<int64_t>(adapters->size()) != m.config.n_layers)
    fail("adapters/layer count mismatch");
  Tensor cur = x;
  for (int64_t i = 0; i < m.config.n_layers; ++i) {
    cur = block_forward(cur, m.blocks[static_cast<size_t>(i)], m.config.n_heads, opt,
                        plans ? &(*plans)[static_cast<size_t>(i)] : nullptr,
                        adapters ? &(*adapters)[static_cast<size_t>(i)] : nullptr);
  }
  return cur;
}

std::vector<SiteActivations> collect_site_inputs(const Model& m, std::span<const Tensor> samples) {
  std::vector<SiteActivations> out(static_cast<size_t>(m.config.n_layers));
  ForwardOptions fp;
  for (const Tensor& sample : samples) {
    Tensor cur = sample;
    for (int64_t i = 0; i < m.config.n_layers; ++i) {
      Tape tape;
      BlockSiteNodes sites;
      NodeId in = tape.leaf(cur);
      NodeId res = block_forward_tape(tape, in, m.blocks[static_cast<size_t>(i)],
                                      m.config.n_heads, fp, nullptr, nullptr, &sites);
      auto& slot = out[static_cast<size_t>(i)];
      slot.qkv.push_back(tape.value(sites.attn_in));
      slot.ffn_in.push_back(tape.value(sites.ffn_in));
      slot.ffn_down.push_back(tape.value(sites.ffn_down_in));
      cur = tape.value(res);
    }
  }
  return out;
}

Model gen_synthetic_model(const ModelConfig& config, uint64_t seed, const OutlierSpec& outliers) {
  config.validate();
  for (int64_t c : outliers.channels)
    if (c < 0 || c >= config.d_model) fail("outlier channel out of range");
  Model m;
  m.config = config;
  Rng rng(seed);
  const double std_mm = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const double std_ff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
  for (int64_t layer = 0; layer < config.n_layers; ++layer) {
    BlockWeights b;
    b.ln1_gain = Tensor::full({config.d_model}, 1.0);
    b.ln1_bias = Tensor::zeros({config.d_model});
    b.ln2_gain = Tensor::full({config.d_model}, 1.0);
    b.ln2_bias = Tensor::zeros({config.d_model});
    for (int64_t c : outliers.channels) {
      b.ln1_gain.at(c) *= outliers.magnification;
      b.ln2_gain.at(c) *= outliers.magnification;
    }
    b.ln1_gain = round_f32(std::move(b.ln1_gain));
    b.ln2_gain = round_f32(std::move(b.ln2_gain));
    b.w_q = rng.gaussian_tensor({config.d_model, config.d_model}, std_mm);
    b.w_k = rng.gaussian_tensor({config.d_model, config.d_model}, std_mm);
    b.w_v = rng.gaussian_tensor({config.d_model, config.d_model}, std_mm);
    // matrices that write hidden or FFN channels keep the activation streams
    // redundant at every depth
    b.w_o = paired_columns(rng, config.d_model, config.d_model, std_mm);
    b.w_gate = paired_columns(rng, config.d_model, config.d_ff, std_mm);
    b.w_up = paired_columns(rng, config.d_model, config.d_ff, std_mm);
    b.w_down = paired_columns(rng, config.d_ff, config.d_model, std_ff);
    // Outlier channels carry magnified activations while the rows consuming
    // them are zeroed. The channels then inflate every token's quantization
    // range without adding signal, which is the phenomenon under study;
    // leaving the rows at normal scale instead saturates the attention logits
    // (50x values against 1/sqrt(M) weights at M=32), and tiny nonzero rows
    // pick up full quantization-step errors that no reassembly can remove.
    for (int64_t c : outliers.channels) {
      for (Tensor* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_gate, &b.w_up})
        for (int64_t k = 0; k < w->cols(); ++k) w->at(c, k) = 0.0;
    }
    for (Tensor* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_gate, &b.w_up, &b.w_down})
      *w = round_f32(std::move(*w));
    m.blocks.push_back(std::move(b));
  }
  return m;
}

CalibrationSet gen_calibration(const ModelConfig& config, uint64_t seed, int64_t n_samples) {
  config.validate();
  if (n_samples < 1) fail("calibration needs at least one sample");
  CalibrationSet set;
  set.seed = seed;
  Rng rng(seed);
  for (int64_t i = 0; i < n_samples; ++i) {
    Tensor sample = paired_columns(rng, config.seq_len, config.d_model, 1.0);
    set.samples.push_back(round_f32(std::move(sample)));
  }
  return set;
}

}  // namespace creq::model
