#include "dsnet/graph.hpp"

#include <algorithm>
#include <array>
#include <unordered_set>

#include "dsnet/ops.hpp"

namespace dsnet {

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 11> kOpNames{{
    {OpKind::Input, "input"},
    {OpKind::Conv, "conv"},
    {OpKind::TransposedConv, "transposed_conv"},
    {OpKind::BatchNorm, "batch_norm"},
    {OpKind::Relu, "relu"},
    {OpKind::MaxPool, "max_pool"},
    {OpKind::AvgPool, "avg_pool"},
    {OpKind::GlobalAvgPool, "global_avg_pool"},
    {OpKind::Resize, "resize"},
    {OpKind::Concat, "concat"},
    {OpKind::Dropout, "dropout"},
}};

constexpr std::array<std::pair<Variant, std::string_view>, 3> kVariantNames{{
    {Variant::Fast, "fast"},
    {Variant::Accurate, "accurate"},
    {Variant::Classifier, "classifier"},
}};

std::size_t expected_arity(const LayerNode& n) {
  switch (n.op) {
    case OpKind::Input:
      return 0;
    case OpKind::Concat:
      return n.inputs.empty() ? 1 : n.inputs.size();
    case OpKind::Resize:
      return n.inputs.size() == 2 ? 2 : 1;
    default:
      return 1;
  }
}

void check_hyperparameters(const LayerNode& n) {
  auto fail = [&](const std::string& what) { throw Error("node '" + n.id + "': " + what); };
  switch (n.op) {
    case OpKind::Input:
      if (n.out_channels < 1) fail("input needs a positive channel count");
      break;
    case OpKind::Conv:
    case OpKind::TransposedConv:
      if (n.in_channels < 1 || n.out_channels < 1) fail("convolution channel counts must be positive");
      if (n.kernel < 1 || n.stride < 1 || n.padding < 0) fail("invalid convolution geometry");
      break;
    case OpKind::BatchNorm:
      if (n.out_channels < 1) fail("batch norm channel count must be positive");
      if (!(n.eps > 0)) fail("batch norm eps must be positive");
      if (!(n.momentum > 0 && n.momentum <= 1)) fail("batch norm momentum must lie in (0, 1]");
      break;
    case OpKind::MaxPool:
    case OpKind::AvgPool:
      if (n.kernel < 1 || n.stride < 1) fail("invalid pooling geometry");
      break;
    case OpKind::Dropout:
      if (!(n.rate >= 0 && n.rate < 1)) fail("dropout rate must lie in [0, 1)");
      break;
    case OpKind::Resize:
      if (n.inputs.size() == 1 && (n.out_h < 1 || n.out_w < 1)) fail("resize needs a reference input or a target size");
      break;
    case OpKind::Relu:
    case OpKind::GlobalAvgPool:
    case OpKind::Concat:
      break;
  }
}

}  // namespace

std::string_view to_string(OpKind op) {
  for (const auto& [k, name] : kOpNames)
    if (k == op) return name;
  return "unknown";
}

std::string_view to_string(Variant v) {
  for (const auto& [k, name] : kVariantNames)
    if (k == v) return name;
  return "unknown";
}

OpKind op_kind_from_string(std::string_view s) {
  for (const auto& [k, name] : kOpNames)
    if (name == s) return k;
  throw Error("unknown op kind '" + std::string(s) + "'");
}

Variant variant_from_string(std::string_view s) {
  for (const auto& [k, name] : kVariantNames)
    if (name == s) return k;
  throw Error("unknown variant '" + std::string(s) + "'");
}

std::size_t GraphSpec::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].id == id) return i;
  throw Error("no node named '" + std::string(id) + "'");
}

bool GraphSpec::contains(std::string_view id) const {
  return std::any_of(nodes.begin(), nodes.end(), [&](const LayerNode& n) { return n.id == id; });
}

std::unordered_map<std::string, std::size_t> GraphSpec::index_map() const {
  std::unordered_map<std::string, std::size_t> map;
  map.reserve(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) map.emplace(nodes[i].id, i);
  return map;
}

void validate_graph(const GraphSpec& graph) {
  if (graph.nodes.empty()) throw Error("graph has no nodes");
  if (graph.num_classes < 1) throw Error("graph num_classes must be positive");
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t input_count = 0;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerNode& n = graph.nodes[i];
    if (n.id.empty()) throw Error("node with empty id at position " + std::to_string(i));
    if (seen.count(n.id)) throw Error("duplicate node id '" + n.id + "'");
    if (n.inputs.size() != expected_arity(n))
      throw Error("node '" + n.id + "' has " + std::to_string(n.inputs.size()) + " inputs");
    for (const auto& in : n.inputs)
      if (!seen.count(in)) throw Error("node '" + n.id + "' references '" + in + "' which is not an earlier node");
    if (n.op == OpKind::Input) ++input_count;
    check_hyperparameters(n);
    seen.emplace(n.id, i);
  }
  if (input_count != 1) throw Error("graph must have exactly one input node");
  if (!seen.count(graph.input_id) || graph.nodes[seen[graph.input_id]].op != OpKind::Input)
    throw Error("graph input '" + graph.input_id + "' is not an input node");
  if (!seen.count(graph.output_id)) throw Error("graph output '" + graph.output_id + "' does not exist");

  // Forward reachability from the input, backward reachability from the output.
  std::vector<char> from_input(graph.nodes.size(), 0);
  from_input[seen[graph.input_id]] = 1;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i)
    for (const auto& in : graph.nodes[i].inputs)
      if (from_input[seen[in]]) from_input[i] = 1;
  std::vector<char> to_output(graph.nodes.size(), 0);
  to_output[seen[graph.output_id]] = 1;
  for (std::size_t i = graph.nodes.size(); i-- > 0;)
    if (to_output[i])
      for (const auto& in : graph.nodes[i].inputs) to_output[seen[in]] = 1;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    if (!from_input[i]) throw Error("node '" + graph.nodes[i].id + "' is unreachable from the input");
    if (!to_output[i]) throw Error("node '" + graph.nodes[i].id + "' does not reach the output");
  }
}

std::vector<Shape> infer_shapes(const GraphSpec& graph, const Shape& input) {
  const auto index = graph.index_map();
  std::vector<Shape> shapes(graph.nodes.size());
  auto in_shape = [&](const LayerNode& n, std::size_t k) -> const Shape& { return shapes[index.at(n.inputs[k])]; };
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerNode& n = graph.nodes[i];
    try {
      switch (n.op) {
        case OpKind::Input:
          if (input.c != n.out_channels)
            throw Error("expects " + std::to_string(n.out_channels) + " channels, got " + input.str());
          if (input.n < 1 || input.h < 1 || input.w < 1) throw Error("input shape " + input.str() + " is empty");
          shapes[i] = input;
          break;
        case OpKind::Conv:
          shapes[i] = conv2d_output_shape(in_shape(n, 0), {n.out_channels, n.in_channels, n.kernel, n.kernel}, n.stride,
                                          n.padding);
          break;
        case OpKind::TransposedConv:
          shapes[i] = transposed_conv2d_output_shape(in_shape(n, 0), {n.in_channels, n.out_channels, n.kernel, n.kernel},
                                                     n.stride, n.padding);
          break;
        case OpKind::BatchNorm:
          if (in_shape(n, 0).c != n.out_channels) throw Error("channel mismatch " + in_shape(n, 0).str());
          shapes[i] = in_shape(n, 0);
          break;
        case OpKind::Relu:
        case OpKind::Dropout:
          shapes[i] = in_shape(n, 0);
          break;
        case OpKind::MaxPool:
        case OpKind::AvgPool:
          shapes[i] = pool2d_output_shape(in_shape(n, 0), n.kernel, n.stride);
          break;
        case OpKind::GlobalAvgPool: {
          const Shape& s = in_shape(n, 0);
          shapes[i] = {s.n, s.c, 1, 1};
          break;
        }
        case OpKind::Resize: {
          const Shape& s = in_shape(n, 0);
          if (n.inputs.size() == 2) {
            const Shape& ref = in_shape(n, 1);
            shapes[i] = {s.n, s.c, ref.h, ref.w};
          } else {
            shapes[i] = {s.n, s.c, n.out_h, n.out_w};
          }
          break;
        }
        case OpKind::Concat: {
          Shape out = in_shape(n, 0);
          out.c = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const Shape& s = in_shape(n, k);
            if (s.n != out.n || s.h != out.h || s.w != out.w) throw Error("concat spatial mismatch " + s.str());
            out.c += s.c;
          }
          shapes[i] = out;
          break;
        }
      }
    } catch (const Error& e) {
      throw Error("shape propagation failed at '" + n.id + "': " + e.what());
    }
  }
  return shapes;
}

nlohmann::json graph_to_json(const GraphSpec& graph) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : graph.nodes) {
    json j{{"id", n.id}, {"op", to_string(n.op)}, {"inputs", n.inputs}};
    switch (n.op) {
      case OpKind::Input:
        j["channels"] = n.out_channels;
        break;
      case OpKind::Conv:
      case OpKind::TransposedConv:
        j["in_channels"] = n.in_channels;
        j["out_channels"] = n.out_channels;
        j["kernel"] = n.kernel;
        j["stride"] = n.stride;
        j["padding"] = n.padding;
        break;
      case OpKind::BatchNorm:
        j["channels"] = n.out_channels;
        j["eps"] = n.eps;
        j["momentum"] = n.momentum;
        break;
      case OpKind::MaxPool:
      case OpKind::AvgPool:
        j["kernel"] = n.kernel;
        j["stride"] = n.stride;
        break;
      case OpKind::Dropout:
        j["rate"] = n.rate;
        break;
      case OpKind::Resize:
        if (n.inputs.size() == 1) {
          j["out_h"] = n.out_h;
          j["out_w"] = n.out_w;
        }
        break;
      default:
        break;
    }
    nodes.push_back(std::move(j));
  }
  return json{{"variant", to_string(graph.variant)},
              {"num_classes", graph.num_classes},
              {"input", graph.input_id},
              {"output", graph.output_id},
              {"nodes", std::move(nodes)}};
}

GraphSpec graph_from_json(const nlohmann::json& j) {
  GraphSpec g;
  try {
    g.variant = variant_from_string(j.at("variant").get<std::string>());
    g.num_classes = j.at("num_classes").get<int>();
    g.input_id = j.at("input").get<std::string>();
    g.output_id = j.at("output").get<std::string>();
    for (const auto& jn : j.at("nodes")) {
      LayerNode n;
      n.id = jn.at("id").get<std::string>();
      n.op = op_kind_from_string(jn.at("op").get<std::string>());
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      switch (n.op) {
        case OpKind::Input:
          n.out_channels = jn.at("channels").get<std::int64_t>();
          break;
        case OpKind::Conv:
        case OpKind::TransposedConv:
          n.in_channels = jn.at("in_channels").get<std::int64_t>();
          n.out_channels = jn.at("out_channels").get<std::int64_t>();
          n.kernel = jn.at("kernel").get<int>();
          n.stride = jn.at("stride").get<int>();
          n.padding = jn.at("padding").get<int>();
          break;
        case OpKind::BatchNorm:
          n.out_channels = jn.at("channels").get<std::int64_t>();
          n.eps = jn.at("eps").get<double>();
          n.momentum = jn.at("momentum").get<double>();
          break;
        case OpKind::MaxPool:
        case OpKind::AvgPool:
          n.kernel = jn.at("kernel").get<int>();
          n.stride = jn.at("stride").get<int>();
          break;
        case OpKind::Dropout:
          n.rate = jn.at("rate").get<double>();
          break;
        case OpKind::Resize:
          if (n.inputs.size() == 1) {
            n.out_h = jn.at("out_h").get<std::int64_t>();
            n.out_w = jn.at("out_w").get<std::int64_t>();
          }
          break;
        default:
          break;
      }
      g.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed graph description: ") + e.what());
  }
  validate_graph(g);
  return g;
}

}  // namespace dsnet
