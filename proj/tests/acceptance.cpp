// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "dsnet/analysis.hpp"
#include "dsnet/builder.hpp"
#include "dsnet/checkpoint.hpp"
#include "dsnet/evaluator.hpp"
#include "dsnet/fold.hpp"
#include "dsnet/trainer.hpp"
#include "gradient_checks.hpp"

using namespace dsnet;
using namespace dsnet::test;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// Moves BN running statistics and affine terms off their initial values.
void perturb_batch_norm(ParamStore<float>& params, std::uint64_t seed) {
  Rng rng(seed);
  params.for_each([&](const std::string&, TensorRole role, TensorF& t) {
    if (role == TensorRole::RunningMean || role == TensorRole::Beta) t = random_tensor<float>(t.shape(), rng, -0.2, 0.2);
    if (role == TensorRole::RunningVar || role == TensorRole::Gamma) t = random_tensor<float>(t.shape(), rng, 0.5, 1.5);
  });
}

double pixel_accuracy(const GraphSpec& g, const ParamStore<float>& p, const std::vector<Sample>& data) {
  ConfusionMatrix cm(g.num_classes);
  for (const auto& s : data) update_confusion(cm, predict(g, p, s.image), s.label);
  return miou_and_global_acc(cm).global_acc;
}

bool bit_equal(const TensorF& a, const TensorF& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  const auto cases = primitive_gradient_cases();
  for (const auto& c : cases)
    if (c.error > worst) worst = c.error, worst_name = c.name;
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const GraphSpec g = random_small_graph(seed);
    auto params = init_params<double>(g, seed);
    Rng rng(seed);
    const double e = graph_fd_check(g, params, random_tensor<double>({2, 2, 6, 6}, rng), Mode::Train, 1, 2);
    if (e > worst) worst = e, worst_name = "random graph " + std::to_string(seed);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120,
          fmt("%zu primitive cases + 3 random graphs, max rel err %.2e (%s), %.1f s", cases.size(), worst,
              worst_name.c_str(), secs)};
}

Outcome shape_audit() {
  const Model fast = build_dsnet(NetworkConfig::fast(19), 1);
  const Model accurate = build_dsnet(NetworkConfig::accurate(11), 1);
  Rng rng(5);
  const Shape fast_out = forward(fast.graph, fast.params, random_tensor<float>({1, 3, 512, 1024}, rng, 0, 1)).shape();
  const Shape acc_out = forward(accurate.graph, accurate.params, random_tensor<float>({1, 3, 360, 480}, rng, 0, 1)).shape();
  bool ok = fast_out == Shape{1, 19, 512, 1024} && acc_out == Shape{1, 11, 360, 480};

  auto strides = [](const NetworkConfig& cfg, const Shape& in) {
    const GraphSpec g = build_dsnet_graph(cfg);
    const EncoderFragment enc = build_encoder(cfg);
    const auto shapes = infer_shapes(g, in);
    std::array<std::int64_t, 4> s{};
    for (int b = 1; b < 5; ++b) s[b - 1] = in.h / shapes[g.index_of(enc.block_outputs[b])].h;
    return s;
  };
  const auto fs = strides(NetworkConfig::fast(19), {1, 3, 512, 1024});
  const auto as = strides(NetworkConfig::accurate(11), {1, 3, 360, 480});
  ok = ok && fs == std::array<std::int64_t, 4>{4, 8, 16, 32} && as == std::array<std::int64_t, 4>{2, 4, 8, 16};
  return {ok, "fast " + fast_out.str() + " taps /" + std::to_string(fs[0]) + "/" + std::to_string(fs[1]) + "/" +
                  std::to_string(fs[2]) + "/" + std::to_string(fs[3]) + ", accurate " + acc_out.str() + " taps /" +
                  std::to_string(as[0]) + "/" + std::to_string(as[1]) + "/" + std::to_string(as[2]) + "/" +
                  std::to_string(as[3])};
}

Outcome structural_audit() {
  const GraphSpec fast = build_dsnet_graph(NetworkConfig::fast(19));
  const GraphSpec accurate = build_dsnet_graph(NetworkConfig::accurate(11));
  const UnitCounts uf = count_dense_units(fast), ua = count_dense_units(accurate);
  const auto cf = decoder_concat_channels(fast), ca = decoder_concat_channels(accurate);
  const bool ok = uf.non_bottleneck == 4 && uf.bottleneck == 26 && ua.non_bottleneck == 4 && ua.bottleneck == 26 &&
                  cf == 128 && ca == 96;
  return {ok, fmt("units fast %d+%d accurate %d+%d, concat widths %lld/%lld", uf.non_bottleneck, uf.bottleneck,
                  ua.non_bottleneck, ua.bottleneck, static_cast<long long>(cf), static_cast<long long>(ca))};
}

Outcome model_size() {
  std::ifstream in(std::string(DSNET_GOLDEN_DIR) + "/analyze_canonical.json");
  if (!in) return {false, "golden file missing"};
  const auto golden = nlohmann::json::parse(in);
  auto mb = [](const NetworkConfig& cfg) { return count_parameters(build_dsnet_graph(cfg)).megabytes(); };
  const double f19 = mb(NetworkConfig::fast(19)), f11 = mb(NetworkConfig::fast(11)), a11 = mb(NetworkConfig::accurate(11));
  const bool golden_ok = golden.at("fast_19_512x1024").at("model_size_mb").get<double>() == f19 &&
                         golden.at("fast_11_360x480").at("model_size_mb").get<double>() == f11 &&
                         golden.at("accurate_11_360x480").at("model_size_mb").get<double>() == a11;
  const bool ok = golden_ok && std::abs(f19 - 11.9) <= 0.1 * 11.9 && std::abs(a11 - 11.6) <= 0.1 * 11.6;
  return {ok, fmt("fast/19 %.3f MB (%+.1f%%), fast/11 %.3f MB, accurate/11 %.3f MB (%+.1f%%), golden %s", f19,
                  100 * (f19 / 11.9 - 1), f11, a11, 100 * (a11 / 11.6 - 1), golden_ok ? "match" : "MISMATCH")};
}

Outcome bn_fold() {
  Model m = build_dsnet(NetworkConfig::fast(4), 7);
  TrainConfig cfg;
  cfg.total_iterations = 100;
  cfg.batch_size = 2;
  cfg.augmentation = {true, 4};
  cfg.seed = 7;
  train_loop(m.graph, m.params, synthetic_quadrants(4, 64, 7), cfg);
  const auto folded = fold_batch_norm(m.graph, m.params);
  Rng rng(8);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const TensorF x = random_tensor<float>({1, 3, 64, 64}, rng, 0, 1);
    const TensorF a = forward(m.graph, m.params, x), b = forward(folded.graph, folded.params, x);
    worst = std::max(worst, static_cast<double>((a.values() - b.values()).cwiseAbs().maxCoeff()));
  }
  const auto macs = count_flops(m.graph, {1, 3, 64, 64}).total, fmacs = count_flops(folded.graph, {1, 3, 64, 64}).total;
  return {worst < 1e-5 && fmacs < macs,
          fmt("max abs diff %.2e over 20 inputs, MACs %lld -> %lld", worst, static_cast<long long>(macs),
              static_cast<long long>(fmacs))};
}

Outcome formula_exactness() {
  Rng rng(6);
  double worst_lr = 0.0, worst_w = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::int64_t total = 1 + static_cast<std::int64_t>(rng.below(100000));
    const std::int64_t it = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total) + 1));
    const double base = 1e-4 + rng.uniform(), power = 0.1 + 2 * rng.uniform();
    const double want = base * std::pow(1.0 - static_cast<double>(it) / static_cast<double>(total), power);
    worst_lr = std::max(worst_lr, std::abs(poly_lr(it, total, base, power) - want));

    const int classes = 2 + static_cast<int>(rng.below(30));
    std::vector<double> p(static_cast<std::size_t>(classes));
    double sum = 0;
    for (auto& v : p) sum += (v = rng.uniform());
    for (auto& v : p) v /= sum;
    std::vector<double> ref(p.size());
    double mx = 0;
    for (std::size_t c = 0; c < p.size(); ++c) mx = std::max(mx, ref[c] = 1.0 / std::log(p[c] + 1.1));
    const auto got = class_weights(p, 1.1);
    for (std::size_t c = 0; c < p.size(); ++c) worst_w = std::max(worst_w, std::abs(got[c] - ref[c] / mx));
  }
  return {worst_lr <= 1e-12 && worst_w <= 1e-12,
          fmt("1000 configs, max |poly_lr err| %.1e, max |class_weight err| %.1e", worst_lr, worst_w)};
}

Outcome metric_oracle() {
  Rng rng(7);
  int mismatches = 0, zero_union_maps = 0, ignore_maps = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 3 + static_cast<int>(rng.below(8));
    // Draw from a subset so some classes never appear.
    const int used = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(classes - 1)));
    const LabelMap truth = random_labels(1, 16, 16, used, rng, 0.15);
    const LabelMap pred = random_labels(1, 16, 16, used, rng);
    ConfusionMatrix cm(classes);
    update_confusion(cm, pred, truth);
    const Metrics m = miou_and_global_acc(cm);
    const auto [miou, acc] = metric_set_oracle(pred, truth, classes);
    mismatches += m.miou != miou || m.global_acc != acc;
    zero_union_maps += used < classes;
    ignore_maps += std::count(truth.data.begin(), truth.data.end(), kIgnoreIndex) > 0;
  }
  return {mismatches == 0, fmt("100 maps, %d mismatches, %d with zero-union classes, %d with ignore pixels",
                               mismatches, zero_union_maps, ignore_maps)};
}

Outcome tiny_overfit() {
  const auto data = synthetic_quadrants(8, 64, 3);
  TrainConfig cfg;
  cfg.total_iterations = 500;
  cfg.seed = 3;
  cfg.augmentation = {true, 4};
  auto run = [&] {
    Model m = build_dsnet(NetworkConfig::fast(4), 3);
    train_loop(m.graph, m.params, data, cfg);
    return m;
  };
  const auto t0 = Clock::now();
  const Model a = run();
  const double secs = seconds_since(t0);
  const double acc = pixel_accuracy(a.graph, a.params, data);
  const Model b = run();
  bool same = true;
  a.params.for_each([&](const std::string& name, TensorRole, const TensorF& t) { same &= bit_equal(t, b.params.tensor(name)); });
  return {acc >= 0.95 && same && secs < 600,
          fmt("train pixel acc %.2f%% after 500 it, %.0f s, repeat run %s", 100 * acc, secs,
              same ? "bit-identical" : "DIFFERS")};
}

Outcome persistence() {
  const Model m = build_dsnet(NetworkConfig::fast(19), 11);
  const Checkpoint ckpt{m.config, m.graph, m.params, {{"purpose", "acceptance"}}};
  const auto bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  const bool bytes_same = encode_checkpoint(back) == bytes;
  Rng rng(9);
  const TensorF x = random_tensor<float>({1, 3, 64, 128}, rng, 0, 1);
  const bool fwd_same = bit_equal(forward(m.graph, m.params, x), forward(back.graph, back.params, x));
  return {bytes_same && fwd_same, fmt("%zu bytes, re-encode %s, forward %s", bytes.size(),
                                      bytes_same ? "byte-identical" : "DIFFERS", fwd_same ? "bit-identical" : "DIFFERS")};
}

Outcome bench_harness() {
  Model m = build_dsnet(NetworkConfig::fast(19), 13);
  perturb_batch_norm(m.params, 13);
  const auto folded = fold_batch_norm(m.graph, m.params);
  const Shape in{1, 3, 256, 512};
  const BenchReport r = benchmark(m.graph, m.params, in, 1, 5);
  const double gap = std::abs(r.per_node_total() - r.mean_ms) / r.mean_ms;
  // Interleaved rounds, fastest mean of each.
  const Shape small{1, 3, 128, 256};
  double best_plain = 1e300, best_folded = 1e300;
  for (int round = 0; round < 10; ++round) {
    best_folded = std::min(best_folded, benchmark(folded.graph, folded.params, small, 1, 3).mean_ms);
    best_plain = std::min(best_plain, benchmark(m.graph, m.params, small, 1, 3).mean_ms);
  }
  const auto j = bench_to_json(r);
  const bool fields = j.contains("mean_ms") && j.contains("fps") && j.at("per_node").size() == m.graph.nodes.size();
  return {fields && gap <= 0.05 && best_folded <= 1.05 * best_plain,
          fmt("%.1f ms/%.2f fps, per-node sum off by %.2f%%, folded %.1f ms vs unfolded %.1f ms at 128x256", r.mean_ms, r.fps,
              100 * gap, best_folded, best_plain)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},   {"shape audit", shape_audit},
      {"structural audit", structural_audit}, {"model size", model_size},
      {"bn fold equivalence", bn_fold},     {"formula exactness", formula_exactness},
      {"metric oracle", metric_oracle},     {"tiny overfit", tiny_overfit},
      {"persistence", persistence},         {"benchmark harness", bench_harness}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %zu: %s | %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
