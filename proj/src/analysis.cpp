#include "dsnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "dsnet/builder.hpp"

namespace dsnet {

ParamCount count_parameters(const GraphSpec& graph) {
  ParamCount c;
  for (const auto& n : graph.nodes) {
    if (!n.has_params()) continue;
    const ParamShapes s = expected_param_shapes(n);
    if (n.op == OpKind::BatchNorm)
      c.total += 4 * s.bn_channels;
    else
      c.total += s.weight.numel() + s.bias.numel();
  }
  c.float32_bytes = 4 * c.total;
  return c;
}

template <typename Scalar>
ParamCount count_parameters(const GraphSpec& graph, const ParamStore<Scalar>& params) {
  check_params(graph, params);
  ParamCount c;
  c.total = params.total_count();
  c.float32_bytes = 4 * c.total;
  return c;
}

FlopReport count_flops(const GraphSpec& graph, const Shape& input) {
  const auto shapes = infer_shapes(graph, input);
  const auto index = graph.index_map();
  FlopReport report;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerNode& n = graph.nodes[i];
    const Shape& out = shapes[i];
    const Shape in = n.inputs.empty() ? Shape{} : shapes[index.at(n.inputs[0])];
    std::int64_t macs = 0;
    switch (n.op) {
      case OpKind::Conv:
        macs = out.numel() * n.in_channels * n.kernel * n.kernel;
        break;
      case OpKind::TransposedConv:
        macs = in.numel() * n.out_channels * n.kernel * n.kernel;
        break;
      case OpKind::BatchNorm:
      case OpKind::GlobalAvgPool:
        macs = in.numel();
        break;
      case OpKind::AvgPool:
        macs = out.numel() * n.kernel * n.kernel;
        break;
      case OpKind::Resize:
        macs = (in.h == out.h && in.w == out.w) ? 0 : 4 * out.numel();
        break;
      default:
        break;
    }
    report.per_node.push_back({n.id, macs});
    report.total += macs;
  }
  return report;
}

namespace {

// Receptive field of every node up to and including `last`; nodes not fed
// by the image input are left unreached.
std::vector<std::optional<ReceptiveField>> sweep_receptive_fields(const GraphSpec& graph,
                                                                  const std::vector<Shape>& shapes,
                                                                  std::size_t last) {
  const auto index = graph.index_map();
  std::vector<std::optional<ReceptiveField>> rf(graph.nodes.size());
  for (std::size_t i = 0; i <= last; ++i) {
    const LayerNode& n = graph.nodes[i];
    if (n.op == OpKind::Input) {
      if (n.id == graph.input_id) rf[i] = ReceptiveField{};
      continue;
    }
    std::optional<ReceptiveField> acc;
    // Only the data input of a resize contributes; inputs[1] supplies its size.
    const std::size_t data_inputs = n.op == OpKind::Resize ? 1 : n.inputs.size();
    for (std::size_t k = 0; k < data_inputs; ++k) {
      const auto& src = rf[index.at(n.inputs[k])];
      if (!src) continue;
      if (!acc) {
        acc = src;
        continue;
      }
      acc->rf_h = std::max(acc->rf_h, src->rf_h);
      acc->rf_w = std::max(acc->rf_w, src->rf_w);
      acc->stride_h = std::max(acc->stride_h, src->stride_h);
      acc->stride_w = std::max(acc->stride_w, src->stride_w);
    }
    if (!acc) continue;
    const Shape& in = shapes[index.at(n.inputs[0])];
    const Shape& out = shapes[i];
    switch (n.op) {
      case OpKind::Conv:
      case OpKind::MaxPool:
      case OpKind::AvgPool:
        acc->rf_h += (n.kernel - 1) * acc->stride_h;
        acc->rf_w += (n.kernel - 1) * acc->stride_w;
        acc->stride_h *= n.stride;
        acc->stride_w *= n.stride;
        break;
      case OpKind::TransposedConv: {
        const double taps = std::ceil(static_cast<double>(n.kernel) / n.stride) - 1;
        acc->rf_h += taps * acc->stride_h;
        acc->rf_w += taps * acc->stride_w;
        acc->stride_h /= n.stride;
        acc->stride_w /= n.stride;
        break;
      }
      case OpKind::GlobalAvgPool:
        acc->rf_h += (in.h - 1) * acc->stride_h;
        acc->rf_w += (in.w - 1) * acc->stride_w;
        acc->stride_h *= in.h;
        acc->stride_w *= in.w;
        break;
      case OpKind::Resize: {
        // Upsampling blends two neighbouring inputs; downsampling by s
        // spans about ceil(s) + 1 of them.
        const double sh = static_cast<double>(in.h) / out.h;
        const double sw = static_cast<double>(in.w) / out.w;
        if (sh != 1.0) acc->rf_h += acc->stride_h * std::max(1.0, std::ceil(sh));
        if (sw != 1.0) acc->rf_w += acc->stride_w * std::max(1.0, std::ceil(sw));
        acc->stride_h *= sh;
        acc->stride_w *= sw;
        break;
      }
      default:
        break;
    }
    rf[i] = acc;
  }
  return rf;
}

}  // namespace

ReceptiveField receptive_field(const GraphSpec& graph, const std::string& node_id, const Shape& input) {
  const std::size_t target = graph.index_of(node_id);
  const auto shapes = infer_shapes(graph, input);
  const auto rf = sweep_receptive_fields(graph, shapes, target);
  if (!rf[target]) throw Error("node '" + node_id + "' is not reachable from the input");
  return *rf[target];
}

template <typename Scalar>
nlohmann::json analyze(const GraphSpec& graph, const ParamStore<Scalar>& params, const Shape& input) {
  using nlohmann::json;
  const ParamCount pc = count_parameters(graph, params);
  const FlopReport flops = count_flops(graph, input);
  const auto shapes = infer_shapes(graph, input);
  const UnitCounts units = count_dense_units(graph);

  const auto rf = sweep_receptive_fields(graph, shapes, graph.nodes.size() - 1);
  json nodes = json::array();
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerNode& n = graph.nodes[i];
    const Shape& s = shapes[i];
    json entry{{"id", n.id}, {"op", to_string(n.op)}, {"shape", {s.n, s.c, s.h, s.w}}, {"macs", flops.per_node[i].macs}};
    if (rf[i])
      entry["receptive_field"] = {
          {"rf_h", rf[i]->rf_h}, {"rf_w", rf[i]->rf_w}, {"stride_h", rf[i]->stride_h}, {"stride_w", rf[i]->stride_w}};
    nodes.push_back(std::move(entry));
  }
  json report{{"variant", to_string(graph.variant)},
              {"num_classes", graph.num_classes},
              {"input_shape", {input.n, input.c, input.h, input.w}},
              {"output_shape", {shapes.back().n, shapes.back().c, shapes.back().h, shapes.back().w}},
              {"total_parameters", pc.total},
              {"float32_bytes", pc.float32_bytes},
              {"model_size_mb", pc.megabytes()},
              {"model_size_mib", pc.mebibytes()},
              {"total_macs", flops.total},
              {"batch_norm_nodes",
               std::count_if(graph.nodes.begin(), graph.nodes.end(),
                             [](const LayerNode& n) { return n.op == OpKind::BatchNorm; })},
              {"dense_units", {{"non_bottleneck", units.non_bottleneck}, {"bottleneck", units.bottleneck}}},
              {"decoder_concat_channels", graph.contains("dec.concat") ? shapes[graph.index_of("dec.concat")].c : 0},
              {"nodes", std::move(nodes)}};
  return report;
}

template ParamCount count_parameters(const GraphSpec&, const ParamStore<float>&);
template ParamCount count_parameters(const GraphSpec&, const ParamStore<double>&);
template nlohmann::json analyze(const GraphSpec&, const ParamStore<float>&, const Shape&);
template nlohmann::json analyze(const GraphSpec&, const ParamStore<double>&, const Shape&);

}  // namespace dsnet
