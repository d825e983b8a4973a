#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsnet/graph.hpp"
#include "dsnet/io.hpp"
#include "dsnet/params.hpp"

namespace dsnet {

/// counts(i, j) = pixels with ground truth i predicted as j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return classes_; }
  std::int64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth * classes_ + pred)]; }
  std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth * classes_ + pred)]; }
  std::int64_t total() const;
  std::int64_t trace() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int classes_ = 0;
  std::vector<std::int64_t> counts_;
};

/// Counts every pixel whose truth is not `ignore_index`.
void update_confusion(ConfusionMatrix& cm, const LabelMap& predicted, const LabelMap& truth,
                      std::int32_t ignore_index = kIgnoreIndex);

struct Metrics {
  std::vector<std::optional<double>> per_class_iou;  // nullopt: zero union, excluded from the mean
  double miou = 0.0;
  double global_acc = 0.0;
  std::int64_t pixels = 0;
  std::int64_t correct = 0;
};

Metrics miou_and_global_acc(const ConfusionMatrix& cm);
nlohmann::json metrics_to_json(const Metrics& m);

/// Per-pixel argmax over channels; ties go to the lowest class index.
LabelMap argmax_labels(const TensorF& logits);

/// Eval-mode forward then argmax. Output has the input's spatial size.
LabelMap predict(const GraphSpec& graph, const ParamStore<float>& params, const TensorF& image);

enum class UpsampleMode { Logits, Labels };

struct EvalOptions {
  std::int64_t eval_h = 0, eval_w = 0;  // 0: keep each image's size
  std::int64_t full_h = 0, full_w = 0;  // 0: the dataset's native size
  UpsampleMode upsample = UpsampleMode::Logits;
  std::int32_t ignore_index = kIgnoreIndex;
};

struct EvalResult {
  ConfusionMatrix confusion;
  Metrics metrics;
};

/// Each image is resized to the eval size, its logits resized to the full
/// size (or, in Labels mode, its argmax resized by nearest neighbour) and
/// scored against the ground truth at full size. All items must share one
/// resolution. Ground truth is resized by nearest neighbour when its native
/// size differs from the full size.
EvalResult evaluate_dataset(const GraphSpec& graph, const ParamStore<float>& params, const std::vector<Sample>& dataset,
                            const EvalOptions& options);

struct BenchReport {
  double mean_ms = 0.0;
  double fps = 0.0;
  int warmup = 0;
  int iterations = 0;
  Shape input_shape;
  std::vector<std::pair<std::string, double>> per_node_ms;  // mean per node, graph order

  double per_node_total() const;
};

/// Random input, warmup runs discarded, wall-clock mean over timed runs.
BenchReport benchmark(const GraphSpec& graph, const ParamStore<float>& params, const Shape& input_shape, int warmup,
                      int iterations, std::uint64_t seed = 0);
nlohmann::json bench_to_json(const BenchReport& r);

}  // namespace dsnet
