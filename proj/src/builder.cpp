#include "dsnet/builder.hpp"

#include <cmath>
#include <map>

namespace dsnet {

namespace {

void append(std::vector<LayerNode>& dst, Fragment&& f) {
  for (auto& n : f.nodes) dst.push_back(std::move(n));
}

LayerNode make(const std::string& id, OpKind op, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = id;
  n.op = op;
  n.inputs = std::move(inputs);
  return n;
}

}  // namespace

void DenseUnitConfig::validate() const {
  if (growth <= 0) throw Error("dense unit growth must be positive");
  if (bottleneck && bottleneck_width < growth) throw Error("bottleneck width must be at least the growth rate");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) throw Error("dropout rate must lie in [0, 1)");
}

NetworkConfig NetworkConfig::fast(int num_classes) {
  NetworkConfig c;
  c.variant = Variant::Fast;
  c.num_classes = num_classes;
  return c;
}

NetworkConfig NetworkConfig::accurate(int num_classes) {
  NetworkConfig c;
  c.variant = Variant::Accurate;
  c.num_classes = num_classes;
  return c;
}

void NetworkConfig::validate() const {
  if (variant == Variant::Classifier) throw Error("network config variant must be fast or accurate");
  if (num_classes < 1) throw Error("num_classes must be positive");
  if (input_channels < 1) throw Error("input_channels must be positive");
  if (growth < 1 || initial_channels < 1 || decoder_channels < 1) throw Error("channel counts must be positive");
  if (!(compression > 0 && compression <= 1)) throw Error("compression must lie in (0, 1]");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) throw Error("dropout rate must lie in [0, 1)");
  for (int u : block_units)
    if (u < 1) throw Error("every block needs at least one unit");
  for (BlockKind k : block_kind)
    if (k == BlockKind::Bottleneck && bottleneck_width < growth)
      throw Error("bottleneck width must be at least the growth rate");
}

nlohmann::json config_to_json(const NetworkConfig& cfg) {
  std::vector<std::string> kinds;
  for (BlockKind k : cfg.block_kind) kinds.push_back(k == BlockKind::Bottleneck ? "bottleneck" : "non_bottleneck");
  return {{"variant", to_string(cfg.variant)},
          {"num_classes", cfg.num_classes},
          {"input_channels", cfg.input_channels},
          {"growth", cfg.growth},
          {"initial_channels", cfg.initial_channels},
          {"compression", cfg.compression},
          {"block_units", cfg.block_units},
          {"block_kind", kinds},
          {"bottleneck_width", cfg.bottleneck_width},
          {"decoder_channels", cfg.decoder_channels},
          {"dropout_rate", cfg.dropout_rate}};
}

NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.num_classes = j.at("num_classes").get<int>();
    c.input_channels = j.value("input_channels", 3);
    c.growth = j.at("growth").get<std::int64_t>();
    c.initial_channels = j.at("initial_channels").get<std::int64_t>();
    c.compression = j.at("compression").get<double>();
    c.block_units = j.at("block_units").get<std::array<int, 5>>();
    const auto kinds = j.at("block_kind").get<std::vector<std::string>>();
    if (kinds.size() != 5) throw Error("block_kind needs five entries");
    for (std::size_t i = 0; i < 5; ++i) {
      if (kinds[i] == "bottleneck")
        c.block_kind[i] = BlockKind::Bottleneck;
      else if (kinds[i] == "non_bottleneck")
        c.block_kind[i] = BlockKind::NonBottleneck;
      else
        throw Error("unknown block kind '" + kinds[i] + "'");
    }
    c.bottleneck_width = j.at("bottleneck_width").get<std::int64_t>();
    c.decoder_channels = j.at("decoder_channels").get<std::int64_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed network config: ") + e.what());
  }
  c.validate();
  return c;
}

Fragment conv_bn_relu(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                      std::int64_t out_channels, int kernel, int stride, int padding) {
  Fragment f;
  LayerNode conv = make(prefix + ".conv", OpKind::Conv, {input});
  conv.in_channels = in_channels;
  conv.out_channels = out_channels;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.padding = padding;
  LayerNode bn = make(prefix + ".bn", OpKind::BatchNorm, {conv.id});
  bn.out_channels = out_channels;
  LayerNode act = make(prefix + ".relu", OpKind::Relu, {bn.id});
  f.output = act.id;
  f.channels = out_channels;
  f.nodes = {std::move(conv), std::move(bn), std::move(act)};
  return f;
}

Fragment build_initial_block(Variant variant, const std::string& input, std::int64_t in_channels,
                             std::int64_t out_channels) {
  if (variant == Variant::Classifier) throw Error("initial block variant must be fast or accurate");
  return conv_bn_relu("init", input, in_channels, out_channels, 3, variant == Variant::Fast ? 2 : 1, 1);
}

Fragment build_dense_unit(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                          const DenseUnitConfig& cfg) {
  if (in_channels <= 0) throw Error("dense unit input channels must be positive");
  cfg.validate();
  Fragment f;
  std::string cur = input;
  std::int64_t width = in_channels;
  if (cfg.bottleneck) {
    Fragment reduce = conv_bn_relu(prefix + ".reduce", cur, width, cfg.bottleneck_width, 1, 1, 0);
    cur = reduce.output;
    width = reduce.channels;
    append(f.nodes, std::move(reduce));
  }
  Fragment a = conv_bn_relu(prefix + ".conv_a", cur, width, cfg.growth, 3, 1, 1);
  cur = a.output;
  append(f.nodes, std::move(a));
  Fragment b = conv_bn_relu(prefix + ".conv_b", cur, cfg.growth, cfg.growth, 3, 1, 1);
  cur = b.output;
  append(f.nodes, std::move(b));
  if (cfg.dropout_rate > 0) {
    LayerNode d = make(prefix + ".dropout", OpKind::Dropout, {cur});
    d.rate = cfg.dropout_rate;
    cur = d.id;
    f.nodes.push_back(std::move(d));
  }
  f.nodes.push_back(make(prefix + ".concat", OpKind::Concat, {input, cur}));
  f.output = prefix + ".concat";
  f.channels = in_channels + cfg.growth;
  return f;
}

Fragment build_transition(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                          double compression) {
  if (in_channels < 2) throw Error("transition needs at least two input channels");
  if (!(compression > 0 && compression <= 1)) throw Error("compression must lie in (0, 1]");
  const auto out = static_cast<std::int64_t>(std::floor(static_cast<double>(in_channels) * compression));
  if (out < 1) throw Error("transition would produce no channels");
  Fragment f = conv_bn_relu(prefix, input, in_channels, out, 1, 1, 0);
  LayerNode pool = make(prefix + ".pool", OpKind::AvgPool, {f.output});
  pool.kernel = 2;
  pool.stride = 2;
  f.output = pool.id;
  f.nodes.push_back(std::move(pool));
  return f;
}

EncoderFragment build_encoder(const NetworkConfig& cfg) {
  cfg.validate();
  EncoderFragment enc;
  enc.input_id = "image";
  LayerNode image = make("image", OpKind::Input, {});
  image.out_channels = cfg.input_channels;
  enc.nodes.push_back(std::move(image));

  Fragment init = build_initial_block(cfg.variant, "image", cfg.input_channels, cfg.initial_channels);
  std::string cur = init.output;
  std::int64_t channels = init.channels;
  append(enc.nodes, std::move(init));

  for (int b = 0; b < 5; ++b) {
    const std::string block = "b" + std::to_string(b + 1);
    DenseUnitConfig unit{cfg.growth, cfg.block_kind[b] == BlockKind::Bottleneck, cfg.bottleneck_width,
                         cfg.dropout_rate};
    for (int u = 0; u < cfg.block_units[b]; ++u) {
      Fragment f = build_dense_unit(block + ".u" + std::to_string(u + 1), cur, channels, unit);
      cur = f.output;
      channels = f.channels;
      append(enc.nodes, std::move(f));
    }
    enc.block_outputs[b] = cur;
    enc.block_channels[b] = channels;
    if (b < 4) {
      Fragment t = build_transition("t" + std::to_string(b + 1), cur, channels, cfg.compression);
      cur = t.output;
      channels = t.channels;
      append(enc.nodes, std::move(t));
    }
  }
  return enc;
}

Fragment build_decoder(Variant variant, const std::vector<DecoderTap>& taps, int num_classes,
                       std::int64_t projection_channels) {
  const std::size_t expected = variant == Variant::Fast ? 4 : 3;
  if (variant == Variant::Classifier) throw Error("decoder variant must be fast or accurate");
  if (taps.size() != expected)
    throw Error("decoder expects " + std::to_string(expected) + " taps, got " + std::to_string(taps.size()));
  if (num_classes < 1) throw Error("num_classes must be positive");
  Fragment f;
  const int first_block = variant == Variant::Fast ? 2 : 3;
  std::vector<std::string> projected;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const std::string name = "dec.p" + std::to_string(first_block + static_cast<int>(i));
    Fragment p = conv_bn_relu(name, taps[i].id, taps[i].channels, projection_channels, 3, 1, 1);
    projected.push_back(p.output);
    append(f.nodes, std::move(p));
  }
  std::vector<std::string> concat_inputs{projected.front()};
  for (std::size_t i = 1; i < projected.size(); ++i) {
    LayerNode up = make("dec.up" + std::to_string(first_block + static_cast<int>(i)), OpKind::Resize,
                        {projected[i], projected.front()});
    concat_inputs.push_back(up.id);
    f.nodes.push_back(std::move(up));
  }
  f.nodes.push_back(make("dec.concat", OpKind::Concat, concat_inputs));
  LayerNode deconv = make("dec.deconv", OpKind::TransposedConv, {"dec.concat"});
  deconv.in_channels = projection_channels * static_cast<std::int64_t>(taps.size());
  deconv.out_channels = num_classes;
  deconv.kernel = 8;
  deconv.stride = 4;
  deconv.padding = 2;
  f.output = deconv.id;
  f.channels = num_classes;
  f.nodes.push_back(std::move(deconv));
  return f;
}

GraphSpec build_dsnet_graph(const NetworkConfig& cfg) {
  EncoderFragment enc = build_encoder(cfg);
  std::vector<DecoderTap> taps;
  for (int b = cfg.variant == Variant::Fast ? 1 : 2; b < 5; ++b) taps.push_back({enc.block_outputs[b], enc.block_channels[b]});
  Fragment dec = build_decoder(cfg.variant, taps, cfg.num_classes, cfg.decoder_channels);

  GraphSpec g;
  g.nodes = std::move(enc.nodes);
  append(g.nodes, std::move(dec));
  g.input_id = enc.input_id;
  g.output_id = "dec.deconv";
  g.variant = cfg.variant;
  g.num_classes = cfg.num_classes;
  validate_graph(g);
  return g;
}

Model build_dsnet(const NetworkConfig& cfg, std::uint64_t seed) {
  Model m{cfg, build_dsnet_graph(cfg), {}};
  m.params = init_params<float>(m.graph, seed);
  return m;
}

GraphSpec attach_classifier_head(const EncoderFragment& encoder, int num_classes) {
  if (num_classes < 1) throw Error("num_classes must be positive");
  const std::string& block5 = encoder.block_outputs[4];
  if (block5.empty()) throw Error("encoder fragment does not end at Block5");
  GraphSpec g;
  g.nodes = encoder.nodes;
  // Nodes after Block5 (none for build_encoder output) are not part of the head.
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (g.nodes[i].id == block5) {
      g.nodes.resize(i + 1);
      break;
    }
  g.nodes.push_back(make("head.gap", OpKind::GlobalAvgPool, {block5}));
  LayerNode fc = make("head.fc", OpKind::Conv, {"head.gap"});
  fc.in_channels = encoder.block_channels[4];
  fc.out_channels = num_classes;
  fc.kernel = 1;
  fc.stride = 1;
  fc.padding = 0;
  g.nodes.push_back(std::move(fc));
  g.input_id = encoder.input_id;
  g.output_id = "head.fc";
  g.variant = Variant::Classifier;
  g.num_classes = num_classes;
  validate_graph(g);
  return g;
}

UnitCounts count_dense_units(const GraphSpec& graph) {
  // unit prefix "bX.uY" -> has a 1x1 convolution
  std::map<std::string, bool> units;
  for (const auto& n : graph.nodes) {
    if (n.id.size() < 2 || n.id[0] != 'b') continue;
    const auto first = n.id.find('.');
    if (first == std::string::npos || n.id.compare(first + 1, 1, "u") != 0) continue;
    const auto second = n.id.find('.', first + 1);
    if (second == std::string::npos) continue;
    const std::string unit = n.id.substr(0, second);
    auto [it, inserted] = units.try_emplace(unit, false);
    if (n.op == OpKind::Conv && n.kernel == 1) it->second = true;
  }
  UnitCounts counts;
  for (const auto& [unit, bottleneck] : units) {
    if (!graph.contains(unit + ".concat")) continue;
    (bottleneck ? counts.bottleneck : counts.non_bottleneck)++;
  }
  return counts;
}

std::int64_t decoder_concat_channels(const GraphSpec& graph) {
  if (!graph.contains("dec.concat") || !graph.contains(graph.input_id)) return 0;
  const LayerNode& in = graph.node(graph.input_id);
  // Channel widths do not depend on spatial size; a 64x64 probe suffices.
  const auto shapes = infer_shapes(graph, {1, in.out_channels, 64, 64});
  return shapes[graph.index_of("dec.concat")].c;
}

}  // namespace dsnet
