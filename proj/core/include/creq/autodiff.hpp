#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "creq/quant.hpp"
#include "creq/reassembly.hpp"
#include "creq/tensor.hpp"

namespace creq {

using NodeId = int32_t;

/// Reverse-mode tape over a fixed primitive set. Nodes are recorded in
/// topological order (creation order); backward walks them once, in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId leaf(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId softmax_rows(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
  NodeId silu(NodeId x);
  /// Straight-through fake quantization: forward quantizes and dequantizes,
  /// backward passes gradients only where the pre-clamp code was in range.
  NodeId fake_quant(NodeId x, int bits, quant::Granularity granularity);
  NodeId slice_cols(NodeId a, int64_t begin, int64_t count);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  /// Runtime channel reassembly (linear, has an exact adjoint).
  NodeId apply_plan(NodeId x, const reassembly::ReassemblyPlan& plan);
  NodeId sum_all(NodeId a);
  NodeId mean_all(NodeId a);

  void backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  /// Zero tensor if the node received no gradient.
  const Tensor& grad(NodeId id) const;
  bool requires_grad(NodeId id) const;
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad_buf;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void(Tape&)> backward_fn;
  };

  NodeId push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward_fn);
  Tensor& grad_buffer(NodeId id);
  void accumulate(NodeId id, const Tensor& g);
  void accumulate_scaled(NodeId id, const Tensor& g, double s);

  std::vector<Node> nodes_;
  Tensor zero_;
};

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1.0;
  int64_t total_steps = 1;  // linear decay horizon
};

/// AdamW with decoupled weight decay and a linear learning-rate decay:
/// the t-th step (1-based) runs at lr0 * (1 - t / total_steps).
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig config);

  void step(std::span<const Tensor* const> grads);
  int64_t steps_taken() const { return step_; }
  double lr_at(int64_t step_1based) const;

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWConfig config_;
  int64_t step_ = 0;
};

}  // namespace creq
