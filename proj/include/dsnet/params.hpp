#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "dsnet/graph.hpp"
#include "dsnet/ops.hpp"
#include "dsnet/rng.hpp"

namespace dsnet {

enum class TensorRole { Weight, Bias, Gamma, Beta, RunningMean, RunningVar };

std::string_view to_string(TensorRole role);
TensorRole tensor_role_from_string(std::string_view s);

/// Learnable tensors are the ones touched by the optimizer.
inline bool is_learnable(TensorRole r) { return r != TensorRole::RunningMean && r != TensorRole::RunningVar; }

template <typename Scalar>
struct NodeParams {
  Tensor<Scalar> weight;  // conv: (Cout, Cin, k, k); transposed conv: (Cin, Cout, k, k)
  Tensor<Scalar> bias;    // (Cout, 1, 1, 1)
  std::optional<BatchNormParams<Scalar>> bn;
};

/// Parameters of a graph keyed by node id. Flattened tensor names are
/// "<node id>/<role>", e.g. "b3.u1.reduce.conv/weight".
template <typename Scalar>
class ParamStore {
 public:
  using Visitor = std::function<void(const std::string& name, TensorRole role, Tensor<Scalar>& tensor)>;
  using ConstVisitor = std::function<void(const std::string& name, TensorRole role, const Tensor<Scalar>& tensor)>;

  NodeParams<Scalar>& at(const std::string& id);
  const NodeParams<Scalar>& at(const std::string& id) const;
  bool contains(const std::string& id) const { return nodes_.count(id) != 0; }
  void insert(const std::string& id, NodeParams<Scalar> p) { nodes_[id] = std::move(p); }
  void erase(const std::string& id) { nodes_.erase(id); }
  std::size_t node_count() const { return nodes_.size(); }
  const std::map<std::string, NodeParams<Scalar>>& nodes() const { return nodes_; }

  /// Visits every tensor in name order.
  void for_each(const Visitor& fn);
  void for_each(const ConstVisitor& fn) const;

  Tensor<Scalar>& tensor(const std::string& name);
  const Tensor<Scalar>& tensor(const std::string& name) const;

  std::int64_t total_count() const;

  /// Incremented on every optimizer update; recorded tapes check it.
  const std::uint64_t& version() const { return version_; }
  void bump_version() { ++version_; }

  template <typename Other>
  ParamStore<Other> cast() const;

 private:
  std::map<std::string, NodeParams<Scalar>> nodes_;
  std::uint64_t version_ = 0;
};

/// Shapes the graph expects for each parameterized node.
struct ParamShapes {
  Shape weight;
  Shape bias;
  std::int64_t bn_channels = 0;
};
ParamShapes expected_param_shapes(const LayerNode& node);

/// Keys must match the graph's parameterized nodes exactly and every
/// tensor must have the shape implied by the node hyperparameters.
template <typename Scalar>
void check_params(const GraphSpec& graph, const ParamStore<Scalar>& params);

/// Fan-in scaled normal weights, std = sqrt(2 / fan_in), where fan_in is
/// Cin*k*k for convolutions and Cin*k*k/stride^2 (the number of inputs
/// feeding one output pixel) for transposed convolutions. Zero biases
/// and beta, unit gamma, running statistics (0, 1). Nodes are initialized
/// in graph order from a single stream.
template <typename Scalar>
ParamStore<Scalar> init_params(const GraphSpec& graph, std::uint64_t seed);

}  // namespace dsnet
