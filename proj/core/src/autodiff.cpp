#include "creq/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace creq {

NodeId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward_fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Tape::value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }

bool Tape::requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

const Tensor& Tape::grad(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) {
    const_cast<Tape*>(this)->zero_ = Tensor::zeros(n.value.shape());
    return zero_;
  }
  return n.grad_buf;
}

Tensor& Tape::grad_buffer(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) {
    n.grad_buf = Tensor::zeros(n.value.shape());
    n.grad_live = true;
  }
  return n.grad_buf;
}

void Tape::accumulate(NodeId id, const Tensor& g) {
  Tensor& buf = grad_buffer(id);
  for (int64_t i = 0; i < buf.numel(); ++i) buf.at(i) += g.at(i);
}

void Tape::accumulate_scaled(NodeId id, const Tensor& g, double s) {
  Tensor& buf = grad_buffer(id);
  for (int64_t i = 0; i < buf.numel(); ++i) buf.at(i) += g.at(i) * s;
}

NodeId Tape::leaf(Tensor value) {
  bool rg = value.requires_grad;
  return push(std::move(value), rg, nullptr);
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Tensor out = creq::matmul(value(a), value(b));
  bool rg = requires_grad(a) || requires_grad(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, b, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      if (t.requires_grad(a)) t.accumulate(a, creq::matmul(g, transposed(t.value(b))));
      if (t.requires_grad(b)) t.accumulate(b, creq::matmul(transposed(t.value(a)), g));
    };
  }
  return id;
}

NodeId Tape::transpose(NodeId a) {
  NodeId id = push(transposed(value(a)), requires_grad(a), nullptr);
  if (requires_grad(a)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, id](Tape& t) {
      t.accumulate(a, transposed(t.nodes_[static_cast<size_t>(id)].grad_buf));
    };
  }
  return id;
}

NodeId Tape::add(NodeId a, NodeId b) {
  NodeId id = push(creq::add(value(a), value(b)), requires_grad(a) || requires_grad(b), nullptr);
  if (requires_grad(a) || requires_grad(b)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, b, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      if (t.requires_grad(a)) t.accumulate(a, g);
      if (t.requires_grad(b)) t.accumulate(b, g);
    };
  }
  return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  NodeId id = push(creq::sub(value(a), value(b)), requires_grad(a) || requires_grad(b), nullptr);
  if (requires_grad(a) || requires_grad(b)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, b, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      if (t.requires_grad(a)) t.accumulate(a, g);
      if (t.requires_grad(b)) t.accumulate_scaled(b, g, -1.0);
    };
  }
  return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  NodeId id = push(creq::mul(value(a), value(b)), requires_grad(a) || requires_grad(b), nullptr);
  if (requires_grad(a) || requires_grad(b)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, b, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      if (t.requires_grad(a)) t.accumulate(a, creq::mul(g, t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, creq::mul(g, t.value(a)));
    };
  }
  return id;
}

NodeId Tape::scale(NodeId a, double s) {
  NodeId id = push(creq::scale(value(a), s), requires_grad(a), nullptr);
  if (requires_grad(a)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, s, id](Tape& t) {
      t.accumulate_scaled(a, t.nodes_[static_cast<size_t>(id)].grad_buf, s);
    };
  }
  return id;
}

NodeId Tape::softmax_rows(NodeId a) {
  Tensor out = creq::softmax_rows(value(a));
  NodeId id = push(std::move(out), requires_grad(a), nullptr);
  if (requires_grad(a)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, id](Tape& t) {
      const Tensor& y = t.value(id);
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      Tensor gx = Tensor::zeros(y.shape());
      for (int64_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
        for (int64_t j = 0; j < y.cols(); ++j)
          gx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
      }
      t.accumulate(a, gx);
    };
  }
  return id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  Tensor out = creq::layer_norm(value(x), value(gain), value(bias), eps);
  bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[static_cast<size_t>(id)].backward_fn = [x, gain, bias, eps, id](Tape& t) {
      const Tensor& xv = t.value(x);
      const Tensor& gv = t.value(gain);
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      const int64_t rows = xv.rows(), cols = xv.cols();
      Tensor gx = Tensor::zeros(xv.shape());
      Tensor ggain = Tensor::zeros(gv.shape());
      Tensor gbias = Tensor::zeros(gv.shape());
      for (int64_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < cols; ++j) mean += xv.at(i, j);
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
          double d = xv.at(i, j) - mean;
          var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
          double xhat = (xv.at(i, j) - mean) * inv;
          double g1 = g.at(i, j) * gv.at(j);
          m1 += g1;
          m2 += g1 * xhat;
          ggain.at(j) += g.at(i, j) * xhat;
          gbias.at(j) += g.at(i, j);
        }
        m1 /= static_cast<double>(cols);
        m2 /= static_cast<double>(cols);
        for (int64_t j = 0; j < cols; ++j) {
          double xhat = (xv.at(i, j) - mean) * inv;
          double g1 = g.at(i, j) * gv.at(j);
          gx.at(i, j) = inv * (g1 - m1 - xhat * m2);
        }
      }
      if (t.requires_grad(x)) t.accumulate(x, gx);
      if (t.requires_grad(gain)) t.accumulate(gain, ggain);
      if (t.requires_grad(bias)) t.accumulate(bias, gbias);
    };
  }
  return id;
}

NodeId Tape::silu(NodeId x) {
  Tensor out = creq::silu(value(x));
  NodeId id = push(std::move(out), requires_grad(x), nullptr);
  if (requires_grad(x)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [x, id](Tape& t) {
      const Tensor& xv = t.value(x);
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      Tensor gx = Tensor::zeros(xv.shape());
      for (int64_t i = 0; i < xv.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-xv.at(i)));
        gx.at(i) = g.at(i) * s * (1.0 + xv.at(i) * (1.0 - s));
      }
      t.accumulate(x, gx);
    };
  }
  return id;
}

NodeId Tape::fake_quant(NodeId x, int bits, quant::Granularity granularity) {
  quant::FakeQuantResult fq = quant::fake_quant_with_mask(value(x), bits, granularity);
  NodeId id = push(std::move(fq.values), requires_grad(x), nullptr);
  if (requires_grad(x)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [x, id, mask = std::move(fq.pass_mask)](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      Tensor gx = Tensor::zeros(g.shape());
      for (int64_t i = 0; i < g.numel(); ++i)
        if (mask[static_cast<size_t>(i)]) gx.at(i) = g.at(i);
      t.accumulate(x, gx);
    };
  }
  return id;
}

NodeId Tape::slice_cols(NodeId a, int64_t begin, int64_t count) {
  Tensor out = creq::slice_cols(value(a), begin, count);
  NodeId id = push(std::move(out), requires_grad(a), nullptr);
  if (requires_grad(a)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, begin, count, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      Tensor& buf = t.grad_buffer(a);
      for (int64_t i = 0; i < g.rows(); ++i)
        for (int64_t j = 0; j < count; ++j) buf.at(i, begin + j) += g.at(i, j);
    };
  }
  return id;
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  bool rg = false;
  for (NodeId p : parts) {
    ptrs.push_back(&value(p));
    rg = rg || requires_grad(p);
  }
  Tensor out = creq::concat_cols(std::span<const Tensor* const>(ptrs));
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[static_cast<size_t>(id)].backward_fn = [parts, id](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad_buf;
      int64_t off = 0;
      for (NodeId p : parts) {
        const int64_t c = t.value(p).cols();
        if (t.requires_grad(p)) {
          Tensor& buf = t.grad_buffer(p);
          for (int64_t i = 0; i < g.rows(); ++i)
            for (int64_t j = 0; j < c; ++j) buf.at(i, j) += g.at(i, off + j);
        }
        off += c;
      }
    };
  }
  return id;
}

NodeId Tape::apply_plan(NodeId x, const reassembly::ReassemblyPlan& plan) {
  Tensor out = reassembly::apply_plan_runtime(value(x), plan);
  NodeId id = push(std::move(out), requires_grad(x), nullptr);
  if (requires_grad(x)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [x, id, plan](Tape& t) {
      t.accumulate(x, reassembly::apply_plan_adjoint(t.nodes_[static_cast<size_t>(id)].grad_buf, plan));
    };
  }
  return id;
}

NodeId Tape::sum_all(NodeId a) {
  Tensor out = Tensor::wrap({1}, {creq::sum_all(value(a))});
  NodeId id = push(std::move(out), requires_grad(a), nullptr);
  if (requires_grad(a)) {
    nodes_[static_cast<size_t>(id)].backward_fn = [a, id](Tape& t) {
      const double g = t.nodes_[static_cast<size_t>(id)].grad_buf.at(0);
      Tensor& buf = t.grad_buffer(a);
      for (int64_t i = 0; i < buf.numel(); ++i) buf.at(i) += g;
    };
  }
  return id;
}

NodeId Tape::mean_all(NodeId a) {
  const double inv = 1.0 / static_cast<double>(value(a).numel());
  return scale(sum_all(a), inv);
}

void Tape::backward(NodeId loss) {
  if (loss < 0 || loss >= size()) fail("backward: bad loss node");
  if (value(loss).numel() != 1) fail("backward: loss must be scalar");
  grad_buffer(loss).at(0) = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || !n.grad_live || !n.backward_fn) continue;
    n.backward_fn(*this);
  }
}

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  if (config_.total_steps < 1) fail("AdamW total_steps must be >= 1");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Tensor* p : params_) {
    m_.push_back(Tensor::zeros(p->shape()));
    v_.push_back(Tensor::zeros(p->shape()));
  }
}

double AdamW::lr_at(int64_t step_1based) const {
  return config_.lr *
         (1.0 - static_cast<double>(step_1based) / static_cast<double>(config_.total_steps));
}

void AdamW::step(std::span<const Tensor* const> grads) {
  if (grads.size() != params_.size()) fail("AdamW param/grad count mismatch");
  if (step_ >= config_.total_steps) fail("AdamW stepped past its schedule");
  ++step_;
  const double lr = lr_at(step_);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    const Tensor& g = *grads[k];
    if (!p.same_shape(g)) fail("AdamW param/grad shape mismatch");
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (int64_t i = 0; i < p.numel(); ++i) {
      m.at(i) = config_.beta1 * m.at(i) + (1.0 - config_.beta1) * g.at(i);
      v.at(i) = config_.beta2 * v.at(i) + (1.0 - config_.beta2) * g.at(i) * g.at(i);
      const double mhat = m.at(i) / bc1;
      const double vhat = v.at(i) / bc2;
      p.at(i) -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * p.at(i));
    }
  }
}

}  // namespace creq
