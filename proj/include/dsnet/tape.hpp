#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dsnet/ops.hpp"

namespace dsnet {

/// Reverse-mode recorder. Every op evaluates its forward primitive
/// immediately, stores the result and pushes a closure that maps the
/// output gradient onto its inputs. backward() replays the closures in
/// reverse order; gradients reaching a value through several consumers
/// are summed. Closures capture `this`, so a tape is pinned in memory.
template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(T value, bool requires_grad = true) { return push(std::move(value), requires_grad, nullptr); }

  const T& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

  /// Gradient of a leaf after backward(); a zero tensor when nothing
  /// reached `v`. Intermediate gradients are released during the sweep.
  T grad(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.grad.empty() ? T(n.value.shape()) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Ties the tape to a mutation counter. backward() refuses to run once
  /// the counter has moved, since recorded activations would be stale.
  void guard(const std::uint64_t& counter) {
    guard_ = &counter;
    guard_snapshot_ = counter;
  }

  Var conv2d(Var x, Var w, Var b, int stride, int padding) {
    T out = dsnet::conv2d(value(x), value(w), value(b), stride, padding);
    return push_op(std::move(out), {x, w, b}, [=, this](const T& g) {
      auto grads = conv2d_backward(value(x), value(w), g, stride, padding, requires_grad(x));
      if (requires_grad(x)) accumulate(x, std::move(grads.input));
      accumulate(w, std::move(grads.weight));
      accumulate(b, std::move(grads.bias));
    });
  }

  Var transposed_conv2d(Var x, Var w, Var b, int stride, int padding) {
    T out = dsnet::transposed_conv2d(value(x), value(w), value(b), stride, padding);
    return push_op(std::move(out), {x, w, b}, [=, this](const T& g) {
      auto grads = transposed_conv2d_backward(value(x), value(w), g, stride, padding, requires_grad(x));
      if (requires_grad(x)) accumulate(x, std::move(grads.input));
      accumulate(w, std::move(grads.weight));
      accumulate(b, std::move(grads.bias));
    });
  }

  Var pool2d(Var x, PoolMode mode, int kernel, int stride) {
    auto result = std::make_shared<PoolResult<Scalar>>(dsnet::pool2d(value(x), mode, kernel, stride));
    T out = result->output;
    return push_op(std::move(out), {x}, [=, this](const T& g) {
      accumulate(x, pool2d_backward(value(x).shape(), *result, mode, kernel, stride, g));
    });
  }

  Var global_avg_pool(Var x) {
    return push_op(dsnet::global_avg_pool(value(x)), {x},
                   [=, this](const T& g) { accumulate(x, global_avg_pool_backward(value(x).shape(), g)); });
  }

  /// Batch norm with learnable gamma/beta taken from tape values and
  /// running statistics read from (and, in train mode, written to) `stats`.
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormParams<Scalar>& stats, Mode mode) {
    auto params = std::make_shared<BatchNormParams<Scalar>>(
        BatchNormParams<Scalar>{value(gamma), value(beta), stats.running_mean, stats.running_var, stats.eps,
                                stats.momentum});
    auto cache = std::make_shared<BatchNormCache<Scalar>>();
    T out = dsnet::batch_norm(value(x), *params, mode, cache.get());
    stats.running_mean = params->running_mean;
    stats.running_var = params->running_var;
    return push_op(std::move(out), {x, gamma, beta}, [=, this](const T& g) {
      auto grads = batch_norm_backward(*params, *cache, g);
      accumulate(x, std::move(grads.input));
      accumulate(gamma, std::move(grads.gamma));
      accumulate(beta, std::move(grads.beta));
    });
  }

  Var relu(Var x) {
    return push_op(dsnet::relu(value(x)), {x}, [=, this](const T& g) { accumulate(x, relu_backward(value(x), g)); });
  }

  Var bilinear_resize(Var x, std::int64_t out_h, std::int64_t out_w) {
    return push_op(dsnet::bilinear_resize(value(x), out_h, out_w), {x},
                   [=, this](const T& g) { accumulate(x, bilinear_resize_backward(value(x).shape(), g)); });
  }

  Var concat(std::span<const Var> inputs) {
    std::vector<const T*> ptrs;
    std::vector<std::int64_t> widths;
    std::vector<Var> ins(inputs.begin(), inputs.end());
    for (Var v : ins) {
      ptrs.push_back(&value(v));
      widths.push_back(value(v).shape().c);
    }
    T out = concat_channels<Scalar>(std::span<const T* const>(ptrs));
    return push_op(std::move(out), ins, [=, this](const T& g) {
      auto parts = split_channels<Scalar>(g, widths);
      for (std::size_t i = 0; i < ins.size(); ++i) accumulate(ins[i], std::move(parts[i]));
    });
  }

  Var dropout(Var x, double rate, Mode mode, Rng& rng) {
    auto result = std::make_shared<DropoutResult<Scalar>>(dsnet::dropout(value(x), rate, mode, rng));
    T out = result->output;
    return push_op(std::move(out), {x}, [=, this](const T& g) { accumulate(x, dropout_backward(*result, g)); });
  }

  /// Scalar (1,1,1,1) loss node.
  Var weighted_cross_entropy(Var logits, const LabelMap& labels, std::span<const double> class_weights,
                             std::int32_t ignore_index = kIgnoreIndex) {
    auto result = std::make_shared<LossResult<Scalar>>(
        dsnet::weighted_cross_entropy(value(logits), labels, class_weights, ignore_index));
    T out(Shape{1, 1, 1, 1}, static_cast<Scalar>(result->loss));
    return push_op(std::move(out), {logits}, [=, this](const T& g) {
      T scaled = result->grad;
      scaled.values() *= g[0];
      accumulate(logits, std::move(scaled));
    });
  }

  /// Scalar sum(x * weights); a convenient probe loss for gradient checks.
  Var dot(Var x, T weights) {
    value(x).require_same_shape(weights);
    T out(Shape{1, 1, 1, 1}, value(x).values().dot(weights.values()));
    return push_op(std::move(out), {x}, [=, this](const T& g) {
      T scaled = weights;
      scaled.values() *= g[0];
      accumulate(x, std::move(scaled));
    });
  }

  /// Propagates d(output)/d(output) = seed backwards through the tape.
  void backward(Var output, Scalar seed = Scalar(1)) {
    if (guard_ && *guard_ != guard_snapshot_)
      throw Error("tape reused after parameter mutation; record a fresh forward pass");
    for (auto& n : nodes_) n.grad = T();
    Node& out = nodes_.at(static_cast<std::size_t>(output.id));
    out.grad = T(out.value.shape(), seed);
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(n.grad);
      n.grad = T();
    }
  }

 private:
  struct Node {
    T value;
    T grad;
    bool requires_grad = false;
    std::function<void(const T&)> backward;
  };

  Var push(T value, bool requires_grad, std::function<void(const T&)> fn) {
    nodes_.push_back(Node{std::move(value), T(), requires_grad, std::move(fn)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push_op(T value, std::initializer_list<Var> inputs, std::function<void(const T&)> fn) {
    return push_op(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var push_op(T value, const std::vector<Var>& inputs, std::function<void(const T&)> fn) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  void accumulate(Var v, T g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = std::move(g);
    else
      n.grad += g;
  }

  std::vector<Node> nodes_;
  const std::uint64_t* guard_ = nullptr;
  std::uint64_t guard_snapshot_ = 0;
};

}  // namespace dsnet
