#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dsnet/tensor.hpp"

namespace dsnet {

enum class OpKind {
  Input,
  Conv,            // conv2d with bias
  TransposedConv,  // transposed_conv2d with bias
  BatchNorm,
  Relu,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Resize,  // bilinear; target is the spatial size of inputs[1] or (out_h, out_w)
  Concat,
  Dropout,
};

enum class Variant { Fast, Accurate, Classifier };

std::string_view to_string(OpKind op);
std::string_view to_string(Variant v);
OpKind op_kind_from_string(std::string_view s);
Variant variant_from_string(std::string_view s);

/// One layer of a network. Only the hyperparameters meaningful for `op`
/// are read; the rest keep their defaults.
struct LayerNode {
  std::string id;
  OpKind op = OpKind::Input;
  std::vector<std::string> inputs;

  std::int64_t in_channels = 0;   // conv / transposed conv
  std::int64_t out_channels = 0;  // channels produced (input, conv, deconv, batch norm)
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  double rate = 0.0;      // dropout
  double eps = 1e-5;      // batch norm
  double momentum = 0.1;  // batch norm
  std::int64_t out_h = 0;  // resize without a reference input
  std::int64_t out_w = 0;

  bool has_params() const { return op == OpKind::Conv || op == OpKind::TransposedConv || op == OpKind::BatchNorm; }
  friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

/// Topologically ordered layer list with a single image input and a single
/// logits output.
struct GraphSpec {
  std::vector<LayerNode> nodes;
  std::string input_id;
  std::string output_id;
  Variant variant = Variant::Fast;
  int num_classes = 0;

  std::size_t index_of(std::string_view id) const;
  const LayerNode& node(std::string_view id) const { return nodes[index_of(id)]; }
  bool contains(std::string_view id) const;

  /// id -> position lookup table.
  std::unordered_map<std::string, std::size_t> index_map() const;

  friend bool operator==(const GraphSpec&, const GraphSpec&) = default;
};

/// Checks unique ids, topological order, a single input and output,
/// reachability in both directions and per-op hyperparameter sanity.
void validate_graph(const GraphSpec& graph);

/// Output shape of every node for the given image shape, in node order.
std::vector<Shape> infer_shapes(const GraphSpec& graph, const Shape& input);

/// Canonical JSON form (embedded in checkpoint headers).
nlohmann::json graph_to_json(const GraphSpec& graph);
GraphSpec graph_from_json(const nlohmann::json& j);

}  // namespace dsnet
