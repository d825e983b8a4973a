#include "dsnet/evaluator.hpp"

#include <chrono>
#include <numeric>

#include "dsnet/executor.hpp"
#include "dsnet/ops.hpp"
#include "dsnet/rng.hpp"

namespace dsnet {

ConfusionMatrix::ConfusionMatrix(int num_classes) : classes_(num_classes) {
  if (num_classes < 0) throw Error("confusion matrix needs a non-negative class count");
  counts_.assign(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0);
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int c = 0; c < classes_; ++c) t += at(c, c);
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw Error("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void update_confusion(ConfusionMatrix& cm, const LabelMap& predicted, const LabelMap& truth, std::int32_t ignore_index) {
  if (predicted.n != truth.n || predicted.h != truth.h || predicted.w != truth.w)
    throw Error("prediction and ground truth differ in shape");
  const int c = cm.num_classes();
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const std::int32_t t = truth.data[i];
    if (t == ignore_index) continue;
    const std::int32_t p = predicted.data[i];
    if (t < 0 || t >= c) throw Error("ground-truth class " + std::to_string(t) + " out of range");
    if (p < 0 || p >= c) throw Error("predicted class " + std::to_string(p) + " out of range");
    ++cm.at(t, p);
  }
}

Metrics miou_and_global_acc(const ConfusionMatrix& cm) {
  Metrics m;
  m.pixels = cm.total();
  if (m.pixels == 0) throw Error("confusion matrix is empty");
  m.correct = cm.trace();
  const int c = cm.num_classes();
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::int64_t tp = cm.at(k, k);
    const std::int64_t uni = row + col - tp;
    if (uni == 0) {
      m.per_class_iou.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    m.per_class_iou.emplace_back(iou);
    sum += iou;
    ++counted;
  }
  m.miou = sum / counted;
  m.global_acc = static_cast<double>(m.correct) / static_cast<double>(m.pixels);
  return m;
}

nlohmann::json metrics_to_json(const Metrics& m) {
  nlohmann::json ious = nlohmann::json::array();
  for (const auto& v : m.per_class_iou) ious.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"per_class_iou", ious},
          {"miou", m.miou},
          {"global_acc", m.global_acc},
          {"pixels", m.pixels},
          {"correct_pixels", m.correct}};
}

LabelMap argmax_labels(const TensorF& logits) {
  const Shape s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  const std::int64_t plane = s.plane();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t i = 0; i < plane; ++i) {
      std::int32_t best = 0;
      float best_v = logits.plane(n, 0)[i];
      for (std::int64_t c = 1; c < s.c; ++c) {
        const float v = logits.plane(n, c)[i];
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      out.data[static_cast<std::size_t>(n * plane + i)] = best;
    }
  return out;
}

LabelMap predict(const GraphSpec& graph, const ParamStore<float>& params, const TensorF& image) {
  const TensorF logits = forward(graph, params, image);
  if (logits.shape().h != image.shape().h || logits.shape().w != image.shape().w)
    throw Error("input " + image.shape().str() + " is incompatible with the network stride (logits " +
                logits.shape().str() + ")");
  return argmax_labels(logits);
}

EvalResult evaluate_dataset(const GraphSpec& graph, const ParamStore<float>& params, const std::vector<Sample>& dataset,
                            const EvalOptions& opt) {
  if (dataset.empty()) throw Error("evaluate_dataset: dataset is empty");
  const std::int64_t native_h = dataset.front().image.shape().h;
  const std::int64_t native_w = dataset.front().image.shape().w;
  const std::int64_t eval_h = opt.eval_h > 0 ? opt.eval_h : native_h;
  const std::int64_t eval_w = opt.eval_w > 0 ? opt.eval_w : native_w;
  const std::int64_t full_h = opt.full_h > 0 ? opt.full_h : native_h;
  const std::int64_t full_w = opt.full_w > 0 ? opt.full_w : native_w;

  EvalResult result{ConfusionMatrix(graph.num_classes), {}};
  for (const auto& s : dataset) {
    if (s.image.shape().h != native_h || s.image.shape().w != native_w)
      throw Error("resolution mismatch: '" + s.id + "' is " + std::to_string(s.image.shape().h) + "x" +
                  std::to_string(s.image.shape().w) + ", expected " + std::to_string(native_h) + "x" +
                  std::to_string(native_w));
    const TensorF input = bilinear_resize(s.image, eval_h, eval_w);
    const TensorF logits = forward(graph, params, input);
    if (logits.shape().h != eval_h || logits.shape().w != eval_w)
      throw Error("eval size " + std::to_string(eval_h) + "x" + std::to_string(eval_w) +
                  " is incompatible with the network stride");
    const LabelMap pred = opt.upsample == UpsampleMode::Logits
                              ? argmax_labels(bilinear_resize(logits, full_h, full_w))
                              : resize_labels_nearest(argmax_labels(logits), full_h, full_w);
    update_confusion(result.confusion, pred, resize_labels_nearest(s.label, full_h, full_w), opt.ignore_index);
  }
  result.metrics = miou_and_global_acc(result.confusion);
  return result;
}

double BenchReport::per_node_total() const {
  double t = 0.0;
  for (const auto& [_, ms] : per_node_ms) t += ms;
  return t;
}

BenchReport benchmark(const GraphSpec& graph, const ParamStore<float>& params, const Shape& input_shape, int warmup,
                      int iterations, std::uint64_t seed) {
  if (iterations < 1) throw Error("benchmark needs at least one timed iteration");
  if (warmup < 0) throw Error("benchmark warmup must be >= 0");
  Rng rng(seed);
  TensorF input(input_shape);
  for (std::int64_t i = 0; i < input.size(); ++i) input[i] = static_cast<float>(rng.uniform());

  for (int i = 0; i < warmup; ++i) forward(graph, params, input);

  BenchReport r;
  r.warmup = warmup;
  r.iterations = iterations;
  r.input_shape = input_shape;
  std::vector<double> node_sum(graph.nodes.size(), 0.0);
  double total = 0.0;
  for (int i = 0; i < iterations; ++i) {
    NodeTimings t;
    const auto start = std::chrono::steady_clock::now();
    forward(graph, params, input, &t);
    total += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    for (std::size_t k = 0; k < node_sum.size(); ++k) node_sum[k] += t.ms[k];
  }
  r.mean_ms = total / iterations;
  r.fps = 1000.0 / r.mean_ms;
  for (std::size_t k = 0; k < node_sum.size(); ++k) r.per_node_ms.emplace_back(graph.nodes[k].id, node_sum[k] / iterations);
  return r;
}

nlohmann::json bench_to_json(const BenchReport& r) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, ms] : r.per_node_ms) nodes.push_back({{"id", id}, {"ms", ms}});
  const Shape& s = r.input_shape;
  return {{"mean_ms", r.mean_ms},
          {"fps", r.fps},
          {"warmup", r.warmup},
          {"iterations", r.iterations},
          {"input_shape", {s.n, s.c, s.h, s.w}},
          {"per_node_total_ms", r.per_node_total()},
          {"per_node", nodes}};
}

}  // namespace dsnet
