#include "creq/correction.hpp"

#include <algorithm>
#include <cmath>

#include "creq/autodiff.hpp"

namespace creq::correction {

namespace {

using model::BlockAdapters;
using model::LowRankAdapter;
using model::ModelAdapters;

LowRankAdapter make_adapter(Rng& rng, int64_t in, int64_t out, int64_t rank) {
  if (rank < 1) fail("adapter rank must be >= 1");
  if (rank > std::min(in, out)) fail("adapter rank exceeds projection dimensions");
  LowRankAdapter ad;
  ad.a = rng.gaussian_tensor({in, rank}, 0.5);
  ad.b = Tensor::zeros({rank, out});
  return ad;
}

std::vector<LowRankAdapter*> block_adapter_fields(BlockAdapters& b) {
  return {&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down};
}

std::vector<const LowRankAdapter*> block_adapter_fields(const BlockAdapters& b) {
  return {&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down};
}

// forward through the group on a tape; adapters of the group registered as leaves
NodeId group_forward(Tape& tape, NodeId x, const model::Model& q_model,
                     const model::ModelPlans& plans,
                     std::vector<model::BlockAdapterNodes>& nodes, int64_t first_block,
                     int64_t n_blocks, const model::ForwardOptions& opt) {
  NodeId cur = x;
  for (int64_t b = 0; b < n_blocks; ++b) {
    const int64_t idx = first_block + b;
    cur = model::block_forward_tape(tape, cur, q_model.blocks[static_cast<size_t>(idx)],
                                    q_model.config.n_heads, opt,
                                    &plans[static_cast<size_t>(idx)],
                                    &nodes[static_cast<size_t>(b)]);
  }
  return cur;
}

double eval_group_loss(const model::Model& q_model, const model::ModelPlans& plans,
                       ModelAdapters& adapters, int64_t first_block, int64_t n_blocks,
                       std::span<const Tensor> fp_targets, std::span<const Tensor> q_inputs,
                       const model::ForwardOptions& opt) {
  double total = 0.0;
  for (size_t s = 0; s < q_inputs.size(); ++s) {
    Tape tape;
    std::vector<model::BlockAdapterNodes> nodes;
    for (int64_t b = 0; b < n_blocks; ++b)
      nodes.push_back(model::register_adapters(
          tape, adapters[static_cast<size_t>(first_block + b)], false));
    NodeId out = group_forward(tape, tape.leaf(q_inputs[s]), q_model, plans, nodes, first_block,
                               n_blocks, opt);
    total += mean_squared(tape.value(out), fp_targets[s]);
  }
  return total / static_cast<double>(q_inputs.size());
}

}  // namespace

void CorrectionConfig::validate() const {
  if (rank < 1 || epochs < 1 || batch_size < 1 || group_size < 1)
    fail("correction config fields must be positive");
  if (!(lr > 0.0)) fail("learning rate must be positive");
}

ModelAdapters attach_adapters(const model::Model& m, int64_t rank, uint64_t seed) {
  Rng rng(seed);
  const int64_t d = m.config.d_model;
  const int64_t f = m.config.d_ff;
  ModelAdapters out;
  for (int64_t i = 0; i < m.config.n_layers; ++i) {
    BlockAdapters b;
    b.q = make_adapter(rng, d, d, rank);
    b.k = make_adapter(rng, d, d, rank);
    b.v = make_adapter(rng, d, d, rank);
    b.o = make_adapter(rng, d, d, rank);
    b.gate = make_adapter(rng, d, f, rank);
    b.up = make_adapter(rng, d, f, rank);
    b.down = make_adapter(rng, f, d, rank);
    out.push_back(std::move(b));
  }
  return out;
}

int64_t trainable_param_count(const BlockAdapters& block) {
  int64_t n = 0;
  for (const LowRankAdapter* ad : block_adapter_fields(block))
    n += ad->a.numel() + ad->b.numel();
  return n;
}

int64_t trainable_param_count(const ModelAdapters& adapters) {
  int64_t n = 0;
  for (const auto& b : adapters) n += trainable_param_count(b);
  return n;
}

ReconstructionTrace reconstruct_group(const model::Model& q_model,
                                      const model::ModelPlans& plans,
                                      ModelAdapters& adapters, int64_t first_block,
                                      int64_t n_blocks, std::span<const Tensor> fp_targets,
                                      std::span<const Tensor> q_inputs,
                                      const model::ForwardOptions& opt,
                                      const CorrectionConfig& cfg) {
  cfg.validate();
  if (fp_targets.size() != q_inputs.size()) fail("target/input sample count mismatch");
  if (q_inputs.empty()) fail("reconstruction needs at least one sample");

  ReconstructionTrace trace;
  trace.first_block = first_block;
  trace.n_blocks = n_blocks;
  trace.initial_loss =
      eval_group_loss(q_model, plans, adapters, first_block, n_blocks, fp_targets, q_inputs, opt);

  // flat parameter list in a fixed order: per block, per projection, A then B
  std::vector<Tensor*> params;
  for (int64_t b = 0; b < n_blocks; ++b) {
    for (LowRankAdapter* ad :
         block_adapter_fields(adapters[static_cast<size_t>(first_block + b)])) {
      params.push_back(&ad->a);
      params.push_back(&ad->b);
    }
  }
  for (Tensor* p : params) trace.trainable_params += p->numel();

  const int64_t n = static_cast<int64_t>(q_inputs.size());
  const int64_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.total_steps = cfg.epochs * batches;
  AdamW optimizer(params, opt_cfg);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int64_t batch = 0; batch < batches; ++batch) {
      const int64_t lo = batch * cfg.batch_size;
      const int64_t hi = std::min(n, lo + cfg.batch_size);
      std::vector<Tensor> grad_sum;
      double batch_loss = 0.0;
      for (int64_t s = lo; s < hi; ++s) {
        Tape tape;
        std::vector<model::BlockAdapterNodes> nodes;
        std::vector<NodeId> param_nodes;
        for (int64_t b = 0; b < n_blocks; ++b) {
          nodes.push_back(model::register_adapters(
              tape, adapters[static_cast<size_t>(first_block + b)], true));
          const auto& bn = nodes.back();
          for (const model::AdapterNodes* an :
               {&bn.q, &bn.k, &bn.v, &bn.o, &bn.gate, &bn.up, &bn.down}) {
            param_nodes.push_back(an->a);
            param_nodes.push_back(an->b);
          }
        }
        NodeId out = group_forward(tape, tape.leaf(q_inputs[static_cast<size_t>(s)]), q_model,
                                   plans, nodes, first_block, n_blocks, opt);
        NodeId diff = tape.sub(out, tape.leaf(fp_targets[static_cast<size_t>(s)]));
        NodeId loss = tape.mean_all(tape.mul(diff, diff));
        const double loss_value = tape.value(loss).at(0);
        if (!std::isfinite(loss_value))
          fail("reconstruction loss became non-finite in block group starting at " +
               std::to_string(first_block));
        batch_loss += loss_value;
        tape.backward(loss);
        if (grad_sum.empty()) {
          for (NodeId pn : param_nodes) grad_sum.push_back(tape.grad(pn));
        } else {
          for (size_t k = 0; k < param_nodes.size(); ++k) {
            const Tensor& g = tape.grad(param_nodes[k]);
            for (int64_t i = 0; i < g.numel(); ++i) grad_sum[k].at(i) += g.at(i);
          }
        }
      }
      const double inv = 1.0 / static_cast<double>(hi - lo);
      std::vector<const Tensor*> grads;
      for (Tensor& g : grad_sum) {
        for (int64_t i = 0; i < g.numel(); ++i) g.at(i) *= inv;
        grads.push_back(&g);
      }
      optimizer.step(grads);
      trace.step_losses.push_back(batch_loss * inv);
    }
  }

  trace.final_loss =
      eval_group_loss(q_model, plans, adapters, first_block, n_blocks, fp_targets, q_inputs, opt);
  trace.improved = trace.final_loss < trace.initial_loss;
  return trace;
}

SequentialResult sequential_correct(const model::Model& fp_model, const model::Model& q_model,
                                    const model::ModelPlans& plans, std::span<const Tensor> calib,
                                    const model::ForwardOptions& opt, const CorrectionConfig& cfg,
                                    uint64_t seed) {
  cfg.validate();
  if (fp_model.config.n_layers != q_model.config.n_layers) fail("model layer count mismatch");
  SequentialResult result;
  result.adapters = attach_adapters(q_model, cfg.rank, seed);

  std::vector<Tensor> fp_state(calib.begin(), calib.end());
  std::vector<Tensor> q_state(calib.begin(), calib.end());
  model::ForwardOptions fp_opt;  // targets come from the unquantized model

  const int64_t layers = q_model.config.n_layers;
  for (int64_t first = 0; first < layers; first += cfg.group_size) {
    const int64_t count = std::min(cfg.group_size, layers - first);
    // advance the full-precision chain to get this group's targets
    std::vector<Tensor> fp_targets;
    fp_targets.reserve(fp_state.size());
    for (const Tensor& x : fp_state) {
      Tensor cur = x;
      for (int64_t b = 0; b < count; ++b)
        cur = model::block_forward(cur, fp_model.blocks[static_cast<size_t>(first + b)],
                                   fp_model.config.n_heads, fp_opt);
      fp_targets.push_back(std::move(cur));
    }
    result.traces.push_back(reconstruct_group(q_model, plans, result.adapters, first, count,
                                              fp_targets, q_state, opt, cfg));
    // propagate the quantized chain through the corrected group
    for (Tensor& x : q_state) {
      Tensor cur = x;
      for (int64_t b = 0; b < count; ++b) {
        const int64_t idx = first + b;
        cur = model::block_forward(cur, q_model.blocks[static_cast<size_t>(idx)],
                                   q_model.config.n_heads, opt, &plans[static_cast<size_t>(idx)],
                                   &result.adapters[static_cast<size_t>(idx)]);
      }
      x = std::move(cur);
    }
    fp_state = std::move(fp_targets);
  }
  return result;
}

checkpoint::QuantizedProjection merge_adapter(const Tensor& w, const LowRankAdapter& ad,
                                              int bits, quant::Granularity granularity) {
  Tensor merged = add(w, matmul(ad.a, ad.b));
  checkpoint::QuantizedProjection out;
  out.params = quant::compute_quant_params(merged, bits, granularity);
  out.codes = quant::quantize(merged, out.params);
  return out;
}

checkpoint::QuantizedModel merge_all(const model::Model& reassembled_fp,
                                     const model::ModelPlans& plans,
                                     const ModelAdapters& adapters, int w_bits, int a_bits) {
  if (adapters.size() != reassembled_fp.blocks.size()) fail("adapter/block count mismatch");
  checkpoint::QuantizedModel qm;
  qm.config = reassembled_fp.config;
  qm.w_bits = w_bits;
  qm.a_bits = a_bits;
  qm.plans = plans;
  for (size_t i = 0; i < reassembled_fp.blocks.size(); ++i) {
    const auto& w = reassembled_fp.blocks[i];
    const auto& ad = adapters[i];
    checkpoint::QuantizedBlock b;
    b.ln1_gain = w.ln1_gain;
    b.ln1_bias = w.ln1_bias;
    b.ln2_gain = w.ln2_gain;
    b.ln2_bias = w.ln2_bias;
    b.q = merge_adapter(w.w_q, ad.q, w_bits);
    b.k = merge_adapter(w.w_k, ad.k, w_bits);
    b.v = merge_adapter(w.w_v, ad.v, w_bits);
    b.o = merge_adapter(w.w_o, ad.o, w_bits);
    b.gate = merge_adapter(w.w_gate, ad.gate, w_bits);
    b.up = merge_adapter(w.w_up, ad.up, w_bits);
    b.down = merge_adapter(w.w_down, ad.down, w_bits);
    qm.blocks.push_back(std::move(b));
  }
  return qm;
}

}  // namespace creq::correction
