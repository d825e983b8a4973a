#include <gtest/gtest.h>

#include <fstream>

#include "dsnet/analysis.hpp"
#include "dsnet/builder.hpp"
#include "support.hpp"

using namespace dsnet;
using namespace dsnet::test;

namespace {

// Independent parameter arithmetic: conv weights + bias, batch norm holds
// gamma, beta and the two running statistics.
std::int64_t conv_params(std::int64_t cin, std::int64_t cout, std::int64_t k) { return cin * cout * k * k + cout; }
std::int64_t cbr_params(std::int64_t cin, std::int64_t cout, std::int64_t k) { return conv_params(cin, cout, k) + 4 * cout; }

std::int64_t oracle_parameter_count(const NetworkConfig& cfg) {
  std::int64_t total = cbr_params(3, 32, 3);
  std::int64_t c = 32;
  std::vector<std::int64_t> outs;
  for (int b = 0; b < 5; ++b) {
    const bool bottleneck = b >= 2;
    for (int u = 0; u < cfg.block_units[b]; ++u) {
      total += bottleneck ? cbr_params(c, 128, 1) + cbr_params(128, 32, 3) : cbr_params(c, 32, 3);
      total += cbr_params(32, 32, 3);
      c += 32;
    }
    outs.push_back(c);
    if (b < 4) {
      total += cbr_params(c, c / 2, 1);
      c /= 2;
    }
  }
  const int first = cfg.variant == Variant::Fast ? 1 : 2;
  for (int b = first; b < 5; ++b) total += cbr_params(outs[b], 32, 3);
  total += conv_params(32 * (5 - first), cfg.num_classes, 8);
  return total;
}

GraphSpec tiny_chain() {
  GraphSpec g;
  g.variant = Variant::Classifier;
  g.nodes = {input_node("x", 3), conv_node("c", "x", 3, 4, 3, 1, 1), bn_node("bn", "c", 4),
             make_node("r", OpKind::Relu, {"bn"})};
  g.input_id = "x";
  g.output_id = "r";
  g.num_classes = 4;
  return g;
}

}  // namespace

TEST(GraphValidation, AcceptsChain) { EXPECT_NO_THROW(validate_graph(tiny_chain())); }

TEST(GraphValidation, RejectsDuplicateIds) {
  GraphSpec g = tiny_chain();
  g.nodes[2].id = "c";
  g.nodes[3].inputs = {"c"};
  EXPECT_THROW(validate_graph(g), Error);
}

TEST(GraphValidation, RejectsOutOfOrderAndCycles) {
  GraphSpec g = tiny_chain();
  std::swap(g.nodes[1], g.nodes[2]);
  EXPECT_THROW(validate_graph(g), Error);
  GraphSpec cyc = tiny_chain();
  cyc.nodes[1].inputs = {"r"};
  EXPECT_THROW(validate_graph(cyc), Error);
}

TEST(GraphValidation, RejectsDanglingAndSecondInput) {
  GraphSpec g = tiny_chain();
  g.nodes.push_back(make_node("dead", OpKind::Relu, {"c"}));
  EXPECT_THROW(validate_graph(g), Error);
  GraphSpec two = tiny_chain();
  two.nodes.insert(two.nodes.begin() + 1, input_node("y", 3));
  EXPECT_THROW(validate_graph(two), Error);
}

TEST(GraphValidation, ShapePropagationNamesTheNode) {
  GraphSpec g = tiny_chain();
  g.nodes[2].out_channels = 5;
  try {
    infer_shapes(g, {1, 3, 8, 8});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bn"), std::string::npos) << e.what();
  }
}

TEST(GraphJson, RoundTrip) {
  const GraphSpec g = build_dsnet_graph(NetworkConfig::accurate(11));
  EXPECT_EQ(graph_from_json(graph_to_json(g)), g);
  const NetworkConfig cfg = NetworkConfig::fast(7);
  EXPECT_EQ(config_from_json(config_to_json(cfg)), cfg);
}

TEST(Builder, InitialBlock) {
  for (auto [v, h, w, oh, ow] : {std::tuple{Variant::Fast, 512, 1024, 256, 512}, std::tuple{Variant::Accurate, 360, 480, 360, 480}}) {
    GraphSpec g;
    g.variant = Variant::Classifier;
    g.nodes = {input_node("image", 3)};
    const Fragment f = build_initial_block(v, "image");
    g.nodes.insert(g.nodes.end(), f.nodes.begin(), f.nodes.end());
    g.input_id = "image";
    g.output_id = f.output;
    g.num_classes = 32;
    EXPECT_EQ(f.channels, 32);
    EXPECT_EQ(infer_shapes(g, {1, 3, h, w}).back(), (Shape{1, 32, oh, ow}));
  }
}

TEST(Builder, DenseUnitChannelsAndOrder) {
  DenseUnitConfig plain;
  EXPECT_EQ(build_dense_unit("u", "in", 32, plain).channels, 64);
  DenseUnitConfig bottleneck;
  bottleneck.bottleneck = true;
  const Fragment f = build_dense_unit("u", "in", 56, bottleneck);
  EXPECT_EQ(f.channels, 88);
  std::vector<std::pair<OpKind, std::int64_t>> seq;
  for (const auto& n : f.nodes) seq.emplace_back(n.op, n.out_channels);
  ASSERT_GE(seq.size(), 9u);
  // Conv then BN then ReLU per stage, widths 128 -> 32 -> 32.
  EXPECT_EQ(seq[0], (std::pair{OpKind::Conv, std::int64_t{128}}));
  EXPECT_EQ(seq[1].first, OpKind::BatchNorm);
  EXPECT_EQ(seq[2].first, OpKind::Relu);
  EXPECT_EQ(seq[3], (std::pair{OpKind::Conv, std::int64_t{32}}));
  EXPECT_EQ(seq[6], (std::pair{OpKind::Conv, std::int64_t{32}}));
  EXPECT_EQ(f.nodes.back().op, OpKind::Concat);
}

TEST(Builder, TransitionCompression) {
  EXPECT_EQ(build_transition("t", "in", 96, 0.5).channels, 48);
  EXPECT_EQ(build_transition("t", "in", 312, 0.5).channels, 156);
  EXPECT_EQ(build_transition("t", "in", 312, 1.0).channels, 312);
}

TEST(Builder, BlockChannelAccounting) {
  const EncoderFragment enc = build_encoder(NetworkConfig::fast());
  const std::array<std::int64_t, 5> expect{96, 112, 312, 476, 494};
  EXPECT_EQ(enc.block_channels, expect);
  // Independent recurrence: out = in + units * growth, then floor(out * compression).
  std::int64_t c = 32;
  const auto units = NetworkConfig::fast().block_units;
  for (int b = 0; b < 5; ++b) {
    c += units[b] * 32;
    EXPECT_EQ(enc.block_channels[b], c);
    c = c / 2;
  }
}

TEST(Builder, TapStrides) {
  for (auto [cfg, strides] : {std::pair{NetworkConfig::fast(), std::array<int, 4>{4, 8, 16, 32}},
                              std::pair{NetworkConfig::accurate(), std::array<int, 4>{2, 4, 8, 16}}}) {
    const GraphSpec g = build_dsnet_graph(cfg);
    const EncoderFragment enc = build_encoder(cfg);
    const auto shapes = infer_shapes(g, {1, 3, 512, 1024});
    for (int b = 1; b < 5; ++b) {
      const Shape s = shapes[g.index_of(enc.block_outputs[b])];
      EXPECT_EQ(s.h, 512 / strides[b - 1]) << b;
      EXPECT_EQ(s.w, 1024 / strides[b - 1]) << b;
    }
  }
}

TEST(Builder, EndToEndShapes) {
  EXPECT_EQ(infer_shapes(build_dsnet_graph(NetworkConfig::fast(19)), {1, 3, 512, 1024}).back(), (Shape{1, 19, 512, 1024}));
  EXPECT_EQ(infer_shapes(build_dsnet_graph(NetworkConfig::accurate(11)), {1, 3, 360, 480}).back(), (Shape{1, 11, 360, 480}));
  const GraphSpec fast = build_dsnet_graph(NetworkConfig::fast(5));
  const GraphSpec accurate = build_dsnet_graph(NetworkConfig::accurate(5));
  for (std::int64_t k : {1, 2, 3, 5}) {
    EXPECT_EQ(infer_shapes(fast, {2, 3, 32 * k, 64 * k}).back(), (Shape{2, 5, 32 * k, 64 * k}));
    EXPECT_EQ(infer_shapes(accurate, {1, 3, 16 * k, 48 * k}).back(), (Shape{1, 5, 16 * k, 48 * k}));
  }
}

TEST(Builder, DecoderConcatWidths) {
  const GraphSpec fast = build_dsnet_graph(NetworkConfig::fast());
  EXPECT_EQ(decoder_concat_channels(fast), 128);
  EXPECT_EQ(decoder_concat_channels(build_dsnet_graph(NetworkConfig::accurate())), 96);
  const auto shapes = infer_shapes(fast, {1, 3, 512, 1024});
  EXPECT_EQ(shapes[fast.index_of("dec.concat")], (Shape{1, 128, 128, 256}));
}

TEST(Builder, UnitCounts) {
  for (const auto& cfg : {NetworkConfig::fast(), NetworkConfig::accurate()}) {
    const UnitCounts u = count_dense_units(build_dsnet_graph(cfg));
    EXPECT_EQ(u.non_bottleneck, 4);
    EXPECT_EQ(u.bottleneck, 26);
  }
}

TEST(Builder, DropoutAfterEveryUnit) {
  NetworkConfig cfg = NetworkConfig::fast();
  cfg.dropout_rate = 0.1;
  const GraphSpec g = build_dsnet_graph(cfg);
  int drops = 0;
  for (const auto& n : g.nodes) drops += n.op == OpKind::Dropout;
  EXPECT_EQ(drops, 30);
  EXPECT_NO_THROW(validate_graph(g));
}

TEST(Builder, ClassifierHead) {
  const EncoderFragment enc = build_encoder(NetworkConfig::fast());
  const GraphSpec g = attach_classifier_head(enc, 1000);
  const ParamShapes head = expected_param_shapes(g.node("head.fc"));
  EXPECT_EQ(head.weight.numel() + head.bias.numel(), 494 * 1000 + 1000);
  EXPECT_EQ(infer_shapes(g, {2, 3, 64, 128}).back(), (Shape{2, 1000, 1, 1}));
  for (const auto& n : build_dsnet_graph(NetworkConfig::fast()).nodes) EXPECT_EQ(n.id.rfind("head.", 0), std::string::npos);
}

TEST(Builder, EmittedGraphsValidate) {
  for (int classes : {2, 11, 19})
    for (const auto& cfg : {NetworkConfig::fast(classes), NetworkConfig::accurate(classes)}) {
      const GraphSpec g = build_dsnet_graph(cfg);
      EXPECT_NO_THROW(validate_graph(g));
      EXPECT_NO_THROW(infer_shapes(g, {1, 3, 64, 64}));
    }
}

TEST(Params, CountMatchesArithmeticOracle) {
  for (const auto& cfg : {NetworkConfig::fast(19), NetworkConfig::fast(11), NetworkConfig::accurate(11)}) {
    const Model m = build_dsnet(cfg, 1);
    EXPECT_EQ(count_parameters(m.graph).total, oracle_parameter_count(cfg));
    EXPECT_EQ(m.params.total_count(), oracle_parameter_count(cfg));
  }
  GraphSpec g;
  g.variant = Variant::Classifier;
  g.nodes = {input_node("x", 3), conv_node("c", "x", 3, 32, 3, 1, 1)};
  g.input_id = "x";
  g.output_id = "c";
  g.num_classes = 32;
  EXPECT_EQ(count_parameters(g).total, 896);
}

TEST(Params, InitialisationScheme) {
  const Model m = build_dsnet(NetworkConfig::fast(4), 5);
  const auto& conv = m.params.at("b3.u1.reduce.conv");
  const double fan_in = static_cast<double>(conv.weight.shape().c);
  const double var = conv.weight.values().cast<double>().squaredNorm() / static_cast<double>(conv.weight.size());
  EXPECT_NEAR(var, 2.0 / fan_in, 0.2 * 2.0 / fan_in);
  EXPECT_EQ(conv.bias.values().cwiseAbs().maxCoeff(), 0.0f);
  const auto& bn = *m.params.at("b3.u1.reduce.bn").bn;
  EXPECT_EQ(bn.gamma.values().minCoeff(), 1.0f);
  EXPECT_EQ(bn.running_var.values().maxCoeff(), 1.0f);
  EXPECT_NO_THROW(check_params(m.graph, m.params));
  const Model again = build_dsnet(NetworkConfig::fast(4), 5);
  EXPECT_EQ(again.params.tensor("dec.deconv/weight").values(), m.params.tensor("dec.deconv/weight").values());
}

TEST(Params, CheckRejectsMissingAndMisshapen) {
  Model m = build_dsnet(NetworkConfig::fast(4), 5);
  auto p = m.params;
  p.erase("init.conv");
  EXPECT_THROW(check_params(m.graph, p), Error);
  p = m.params;
  p.at("init.conv").bias = TensorF::vector(3);
  EXPECT_THROW(check_params(m.graph, p), Error);
}

TEST(Golden, CanonicalAnalyzeSummary) {
  std::ifstream in(std::string(DSNET_GOLDEN_DIR) + "/analyze_canonical.json");
  ASSERT_TRUE(in.good());
  const auto golden = nlohmann::json::parse(in);
  const std::vector<std::tuple<std::string, NetworkConfig, Shape>> builds{
      {"fast_19_512x1024", NetworkConfig::fast(19), {1, 3, 512, 1024}},
      {"fast_11_360x480", NetworkConfig::fast(11), {1, 3, 360, 480}},
      {"accurate_11_360x480", NetworkConfig::accurate(11), {1, 3, 360, 480}}};
  for (const auto& [key, cfg, shape] : builds) {
    const Model m = build_dsnet(cfg, 42);
    const auto report = analyze(m.graph, m.params, shape);
    for (const auto& [field, value] : golden.at(key).items()) EXPECT_EQ(report.at(field), value) << key << " " << field;
  }
}
