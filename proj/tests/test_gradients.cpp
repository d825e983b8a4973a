#include <gtest/gtest.h>

#include "dsnet/builder.hpp"
#include "gradient_checks.hpp"

using namespace dsnet;
using namespace dsnet::test;

TEST(Gradients, EveryPrimitive) {
  for (const auto& c : primitive_gradient_cases()) EXPECT_LT(c.error, 1e-4) << c.name;
}

TEST(Gradients, RandomSmallGraphs) {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u, 16u}) {
    const GraphSpec g = random_small_graph(seed);
    ASSERT_NO_THROW(validate_graph(g)) << seed;
    auto params = init_params<double>(g, seed);
    Rng rng(seed);
    const TensorD x = random_tensor<double>({2, 2, 6, 6}, rng);
    EXPECT_LT(graph_fd_check(g, params, x, Mode::Train, 1, 2), 1e-4) << "seed " << seed;
  }
}

TEST(Gradients, DenseUnitOnFourByFour) {
  for (bool bottleneck : {false, true}) {
    DenseUnitConfig cfg;
    cfg.growth = 3;
    cfg.bottleneck = bottleneck;
    cfg.bottleneck_width = 4;
    GraphSpec g;
    g.variant = Variant::Classifier;
    g.nodes.push_back(input_node("x", 2));
    const Fragment unit = build_dense_unit("u", "x", 2, cfg);
    g.nodes.insert(g.nodes.end(), unit.nodes.begin(), unit.nodes.end());
    g.input_id = "x";
    g.output_id = unit.output;
    g.num_classes = static_cast<int>(unit.channels);
    auto params = init_params<double>(g, 3);
    Rng rng(4);
    EXPECT_LT(graph_fd_check(g, params, random_tensor<double>({2, 2, 4, 4}, rng), Mode::Train, 1, 2), 1e-4)
        << (bottleneck ? "bottleneck" : "plain");
  }
}

TEST(Gradients, UnusedParameterGetsExactZero) {
  Tape<double> tape;
  Rng rng(1);
  auto x = tape.leaf(random_tensor<double>({1, 1, 3, 3}, rng));
  auto unused = tape.leaf(random_tensor<double>({1, 1, 3, 3}, rng));
  auto loss = tape.dot(tape.relu(x), TensorD({1, 1, 3, 3}, 1.0));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(unused).values().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradients, TapeRejectsParameterMutation) {
  GraphSpec g;
  g.variant = Variant::Classifier;
  g.nodes = {input_node("x", 1), conv_node("c", "x", 1, 1, 1, 1, 0)};
  g.input_id = "x";
  g.output_id = "c";
  g.num_classes = 1;
  auto params = init_params<double>(g, 1);
  Rng rng(1);
  auto pass = forward_taped(g, params, TensorD({1, 1, 2, 2}, 1.0), Mode::Train, rng);
  auto loss = pass->tape.dot(pass->output, TensorD({1, 1, 2, 2}, 1.0));
  params.bump_version();
  EXPECT_THROW(pass->tape.backward(loss), Error);
}
