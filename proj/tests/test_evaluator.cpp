#include <gtest/gtest.h>

#include "dsnet/builder.hpp"
#include "dsnet/evaluator.hpp"
#include "support.hpp"

using namespace dsnet;
using namespace dsnet::test;

namespace {

LabelMap map_of(std::int64_t h, std::int64_t w, std::vector<std::int32_t> values) {
  LabelMap m(1, h, w);
  m.data = std::move(values);
  return m;
}

GraphSpec tiny_net(int classes) {
  GraphSpec g;
  g.variant = Variant::Classifier;
  g.nodes = {input_node("x", 3), conv_node("c1", "x", 3, 5, 3, 1, 1), make_node("r1", OpKind::Relu, {"c1"}),
             conv_node("head", "r1", 5, classes, 1, 1, 0)};
  g.input_id = "x";
  g.output_id = "head";
  g.num_classes = classes;
  return g;
}

}  // namespace

TEST(Confusion, TwoPixelExample) {
  ConfusionMatrix cm(2);
  update_confusion(cm, map_of(1, 2, {0, 0}), map_of(1, 2, {0, 1}));
  EXPECT_EQ(cm.at(0, 0), 1);
  EXPECT_EQ(cm.at(1, 0), 1);
  EXPECT_EQ(cm.total(), 2);
  const Metrics m = miou_and_global_acc(cm);
  EXPECT_DOUBLE_EQ(*m.per_class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*m.per_class_iou[1], 0.0);
  EXPECT_DOUBLE_EQ(m.miou, 0.25);
  EXPECT_DOUBLE_EQ(m.global_acc, 0.5);
}

TEST(Confusion, IgnoredPixelsAndZeroUnion) {
  ConfusionMatrix cm(3);
  update_confusion(cm, map_of(1, 3, {0, 1, 2}), map_of(1, 3, {0, 1, kIgnoreIndex}));
  EXPECT_EQ(cm.total(), 2);
  const Metrics m = miou_and_global_acc(cm);
  EXPECT_FALSE(m.per_class_iou[2].has_value());
  EXPECT_DOUBLE_EQ(m.miou, 1.0);
  const auto j = metrics_to_json(m);
  EXPECT_TRUE(j.at("per_class_iou")[2].is_null());
  EXPECT_EQ(j.at("pixels"), 2);
}

TEST(Confusion, EmptyIsAnError) {
  EXPECT_THROW(miou_and_global_acc(ConfusionMatrix(4)), Error);
}

TEST(Confusion, SizeMismatchIsAnError) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(update_confusion(cm, LabelMap(1, 2, 2), LabelMap(1, 2, 3)), Error);
}

TEST(Metrics, MatchSetOracleOnRandomMaps) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int classes = 2 + static_cast<int>(rng.below(6));
    const LabelMap truth = random_labels(1, 16, 16, classes, rng, 0.1);
    const LabelMap pred = random_labels(1, 16, 16, classes, rng);
    ConfusionMatrix cm(classes);
    update_confusion(cm, pred, truth);
    const Metrics m = miou_and_global_acc(cm);
    const auto [miou, acc] = metric_set_oracle(pred, truth, classes);
    EXPECT_NEAR(m.miou, miou, 1e-12);
    EXPECT_NEAR(m.global_acc, acc, 1e-12);
  }
}

TEST(Metrics, AccumulationIsOrderIndependent) {
  Rng rng(12);
  std::vector<std::pair<LabelMap, LabelMap>> items;
  for (int i = 0; i < 6; ++i) items.emplace_back(random_labels(1, 5, 7, 4, rng), random_labels(1, 5, 7, 4, rng, 0.2));
  ConfusionMatrix forward_order(4), reverse_order(4), merged(4);
  for (const auto& [p, t] : items) update_confusion(forward_order, p, t);
  for (auto it = items.rbegin(); it != items.rend(); ++it) update_confusion(reverse_order, it->first, it->second);
  for (const auto& [p, t] : items) {
    ConfusionMatrix one(4);
    update_confusion(one, p, t);
    merged += one;
  }
  EXPECT_EQ(forward_order, reverse_order);
  EXPECT_EQ(forward_order, merged);
}

TEST(Predict, ArgmaxTiesGoToLowestIndex) {
  TensorF logits({1, 3, 1, 2});
  logits(0, 0, 0, 0) = 1.0f;
  logits(0, 1, 0, 0) = 1.0f;
  logits(0, 2, 0, 0) = 0.5f;
  logits(0, 2, 0, 1) = 2.0f;
  const LabelMap m = argmax_labels(logits);
  EXPECT_EQ(m.data, (std::vector<std::int32_t>{0, 2}));
}

TEST(Predict, InvariantToPositiveLogitScale) {
  const GraphSpec g = tiny_net(4);
  auto params = init_params<float>(g, 3);
  Rng rng(13);
  const TensorF x = random_tensor<float>({1, 3, 9, 11}, rng, 0, 1);
  const LabelMap a = predict(g, params, x);
  params.tensor("head/weight").values() *= 3.0f;
  params.tensor("head/bias").values() *= 3.0f;
  EXPECT_EQ(predict(g, params, x), a);
  EXPECT_EQ(a.h, 9);
  EXPECT_EQ(a.w, 11);
}

TEST(EvaluateDataset, NativeSizeMatchesPredictAndScore) {
  const GraphSpec g = tiny_net(4);
  const auto params = init_params<float>(g, 5);
  const auto data = synthetic_quadrants(3, 12, 7);
  ConfusionMatrix manual(4);
  for (const auto& s : data) update_confusion(manual, predict(g, params, s.image), s.label);
  const EvalResult r = evaluate_dataset(g, params, data, {});
  EXPECT_EQ(r.confusion, manual);
  EXPECT_DOUBLE_EQ(r.metrics.miou, miou_and_global_acc(manual).miou);

  auto reversed = data;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(evaluate_dataset(g, params, reversed, {}).confusion, manual);
}

TEST(EvaluateDataset, ResizedEvaluationCountsFullResolution) {
  const GraphSpec g = tiny_net(4);
  const auto params = init_params<float>(g, 5);
  const auto data = synthetic_quadrants(2, 16, 8);
  for (UpsampleMode mode : {UpsampleMode::Logits, UpsampleMode::Labels}) {
    EvalOptions opt;
    opt.eval_h = opt.eval_w = 8;
    opt.upsample = mode;
    EXPECT_EQ(evaluate_dataset(g, params, data, opt).metrics.pixels, 2 * 16 * 16);
    opt.full_h = 12;
    opt.full_w = 20;
    EXPECT_EQ(evaluate_dataset(g, params, data, opt).metrics.pixels, 2 * 12 * 20);
  }
  auto mixed = data;
  mixed.push_back(synthetic_quadrants(1, 10, 1)[0]);
  EXPECT_THROW(evaluate_dataset(g, params, mixed, {}), Error);
}

TEST(Benchmark, ReportIsConsistent) {
  const Model m = build_dsnet(NetworkConfig::fast(4), 1);
  const BenchReport r = benchmark(m.graph, m.params, {1, 3, 64, 64}, 1, 3);
  EXPECT_NEAR(r.fps * r.mean_ms, 1000.0, 1e-9);
  EXPECT_EQ(r.per_node_ms.size(), m.graph.nodes.size());
  EXPECT_NEAR(r.per_node_total(), r.mean_ms, 0.05 * r.mean_ms);
  const auto j = bench_to_json(r);
  EXPECT_EQ(j.at("iterations"), 3);
  EXPECT_EQ(j.at("per_node").size(), m.graph.nodes.size());
  EXPECT_THROW(benchmark(m.graph, m.params, {1, 3, 64, 64}, 0, 0), Error);
}
