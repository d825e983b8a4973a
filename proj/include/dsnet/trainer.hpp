#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsnet/graph.hpp"
#include "dsnet/io.hpp"
#include "dsnet/params.hpp"
#include "dsnet/rng.hpp"

namespace dsnet {

enum class LogBase { Natural, Base10 };

struct AugmentConfig {
  bool hflip = true;
  int max_translate_px = 8;
};

struct TrainConfig {
  double lr_base = 0.05;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 4;
  std::int64_t total_iterations = 13800;
  double dropout_rate = 0.0;
  bool class_balancing = true;
  double k = 1.1;
  LogBase log_base = LogBase::Natural;
  AugmentConfig augmentation;
  std::uint64_t seed = 0;
  std::int64_t save_every = 0;  // 0 = only at the end
  std::int32_t ignore_index = kIgnoreIndex;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// lr_base * (1 - iteration / total)^power.
double poly_lr(std::int64_t iteration, std::int64_t total_iterations, double lr_base, double power);

/// w_c = 1 / log(p_c + k), then divided by the maximum.
std::vector<double> class_weights(const std::vector<double>& probs, double k, LogBase base = LogBase::Natural);

/// Frequency of each class over the non-ignored pixels of `samples`.
std::vector<double> class_probabilities(const std::vector<Sample>& samples, int num_classes,
                                        std::int32_t ignore_index = kIgnoreIndex);

template <typename Scalar>
struct OptimizerState {
  std::map<std::string, Tensor<Scalar>> velocity;  // learnable tensors only
  std::int64_t iteration = 0;

  static OptimizerState zeros(const ParamStore<Scalar>& params);
};

/// g' = g + wd * p (weights and biases only), v = momentum * v + g',
/// p = p - lr * v. Running statistics are never touched. Bumps the store
/// version.
template <typename Scalar>
void sgd_step(ParamStore<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads,
              OptimizerState<Scalar>& state, double lr, double momentum, double weight_decay);

/// Horizontal flip with probability 0.5 (if enabled), then an integer shift
/// with offsets in [-max, max] per axis. Uncovered image pixels replicate the
/// nearest edge, uncovered label pixels become `ignore_index`.
Sample augment_sample(const Sample& sample, const AugmentConfig& cfg, Rng& rng,
                      std::int32_t ignore_index = kIgnoreIndex);

Sample hflip(const Sample& sample);

struct LogRow {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LogRow> log;
  OptimizerState<float> optimizer;
  std::vector<double> class_weights;
};

/// Called after the update of every iteration whose 1-based index is a
/// multiple of save_every.
using SaveHook = std::function<void(std::int64_t iterations_done)>;

/// Applies cfg.dropout_rate to the graph's dropout nodes. A positive rate
/// on a graph without dropout nodes is an error.
GraphSpec with_dropout_rate(const GraphSpec& graph, double rate);

TrainResult train_loop(const GraphSpec& graph, ParamStore<float>& params, const std::vector<Sample>& dataset,
                       const TrainConfig& cfg, const SaveHook& on_save = {}, std::ostream* log_stream = nullptr);

void write_log_header(std::ostream& out);
void write_log_row(std::ostream& out, const LogRow& row);

}  // namespace dsnet
