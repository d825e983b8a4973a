#include "dsnet/fold.hpp"

#include <cmath>
#include <map>

namespace dsnet {

namespace {

template <typename Scalar>
bool stats_untouched(const BatchNormParams<Scalar>& bn) {
  return (bn.running_mean.values().array() == Scalar(0)).all() && (bn.running_var.values().array() == Scalar(1)).all();
}

}  // namespace

template <typename Scalar>
FoldedModel<Scalar> fold_batch_norm(const GraphSpec& graph, const ParamStore<Scalar>& params) {
  validate_graph(graph);
  check_params(graph, params);
  const auto index = graph.index_map();

  std::map<std::string, int> consumers;
  for (const auto& n : graph.nodes)
    for (const auto& in : n.inputs) ++consumers[in];

  FoldedModel<Scalar> folded;
  folded.params = params;
  std::map<std::string, std::string> rename;  // batch norm id -> conv id

  for (const auto& n : graph.nodes) {
    if (n.op != OpKind::BatchNorm) continue;
    const LayerNode& producer = graph.nodes[index.at(n.inputs[0])];
    if (producer.op != OpKind::Conv && producer.op != OpKind::TransposedConv)
      throw Error("batch norm '" + n.id + "' is not preceded by a convolution");
    if (consumers[producer.id] != 1)
      throw Error("convolution '" + producer.id + "' feeds more than the batch norm '" + n.id + "'");
    const BatchNormParams<Scalar>& bn = *params.at(n.id).bn;
    if (stats_untouched(bn))
      throw Error("batch norm '" + n.id + "' has never seen training data (running stats at initial values)");

    NodeParams<Scalar>& conv = folded.params.at(producer.id);
    const Shape ws = conv.weight.shape();
    const bool transposed = producer.op == OpKind::TransposedConv;
    const std::int64_t out_channels = transposed ? ws.c : ws.n;
    const std::int64_t per_filter = ws.h * ws.w;
    for (std::int64_t c = 0; c < out_channels; ++c) {
      const double scale = static_cast<double>(bn.gamma[c]) / std::sqrt(static_cast<double>(bn.running_var[c]) + bn.eps);
      if (transposed) {
        for (std::int64_t i = 0; i < ws.n; ++i) {
          Scalar* w = conv.weight.data() + (i * ws.c + c) * per_filter;
          for (std::int64_t k = 0; k < per_filter; ++k) w[k] = static_cast<Scalar>(w[k] * scale);
        }
      } else {
        Scalar* w = conv.weight.data() + c * ws.c * per_filter;
        for (std::int64_t k = 0; k < ws.c * per_filter; ++k) w[k] = static_cast<Scalar>(w[k] * scale);
      }
      conv.bias[c] = static_cast<Scalar>((static_cast<double>(conv.bias[c]) - bn.running_mean[c]) * scale + bn.beta[c]);
    }
    folded.params.erase(n.id);
    rename[n.id] = producer.id;
  }

  folded.graph = graph;
  folded.graph.nodes.clear();
  for (const auto& n : graph.nodes) {
    if (n.op == OpKind::BatchNorm) continue;
    LayerNode copy = n;
    for (auto& in : copy.inputs)
      if (auto it = rename.find(in); it != rename.end()) in = it->second;
    folded.graph.nodes.push_back(std::move(copy));
  }
  if (auto it = rename.find(graph.output_id); it != rename.end()) folded.graph.output_id = it->second;
  validate_graph(folded.graph);
  check_params(folded.graph, folded.params);
  return folded;
}

template FoldedModel<float> fold_batch_norm(const GraphSpec&, const ParamStore<float>&);
template FoldedModel<double> fold_batch_norm(const GraphSpec&, const ParamStore<double>&);

}  // namespace dsnet
