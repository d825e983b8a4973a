#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dsnet/graph.hpp"
#include "dsnet/params.hpp"
#include "dsnet/tape.hpp"

namespace dsnet {

/// Per-node wall-clock milliseconds recorded by forward(), in node order.
struct NodeTimings {
  std::vector<double> ms;
};

/// Eval-mode forward pass. Activations are released as soon as their last
/// consumer has run. Every node output is checked for NaN/Inf.
template <typename Scalar>
Tensor<Scalar> forward(const GraphSpec& graph, const ParamStore<Scalar>& params, const Tensor<Scalar>& input,
                       NodeTimings* timings = nullptr);

/// Forward pass recorded on a tape for gradient computation.
template <typename Scalar>
struct TapedForward {
  using Var = typename Tape<Scalar>::Var;

  Tape<Scalar> tape;
  Var input;
  Var output;
  /// Flattened parameter name ("<node>/<role>") -> leaf.
  std::map<std::string, Var> params;

  /// Gradients of learnable parameters after tape.backward().
  std::map<std::string, Tensor<Scalar>> param_grads() const;
};

/// Records a forward pass. Train mode uses batch statistics (updating the
/// running statistics stored in `params`) and active dropout driven by
/// `rng`. The tape is guarded by params.version().
template <typename Scalar>
std::unique_ptr<TapedForward<Scalar>> forward_taped(const GraphSpec& graph, ParamStore<Scalar>& params,
                                                    const Tensor<Scalar>& input, Mode mode, Rng& rng,
                                                    bool input_requires_grad = false);

}  // namespace dsnet
