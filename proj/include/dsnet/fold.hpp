#pragma once

#include "dsnet/graph.hpp"
#include "dsnet/params.hpp"

namespace dsnet {

template <typename Scalar>
struct FoldedModel {
  GraphSpec graph;
  ParamStore<Scalar> params;
};

/// Absorbs every eval-mode batch norm into the convolution feeding it:
///   scale = gamma / sqrt(running_var + eps)
///   W' = W * scale (per output channel),  b' = (b - running_mean) * scale + beta
/// Consumers of the batch norm are rewired to the convolution and the
/// batch norm node is dropped. The conversion is done in double precision.
///
/// Throws if a batch norm is not fed by a convolution, if that convolution
/// has other consumers, or if its running statistics are still at their
/// initial values (mean 0, variance 1 everywhere), i.e. were never
/// populated by training.
template <typename Scalar>
FoldedModel<Scalar> fold_batch_norm(const GraphSpec& graph, const ParamStore<Scalar>& params);

}  // namespace dsnet
