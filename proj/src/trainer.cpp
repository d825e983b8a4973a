#include "dsnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>

#include "dsnet/executor.hpp"

namespace dsnet {

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error("invalid train config: " + what); };
  if (!(lr_base > 0)) bad("lr_base must be > 0");
  if (!(power > 0)) bad("power must be > 0");
  if (!(momentum >= 0 && momentum < 1)) bad("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) bad("weight_decay must be >= 0");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (total_iterations < 1) bad("total_iterations must be >= 1");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) bad("dropout_rate must lie in [0, 1)");
  if (!(k > 0)) bad("k must be > 0");
  if (augmentation.max_translate_px < 0) bad("max_translate_px must be >= 0");
  if (save_every < 0) bad("save_every must be >= 0");
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {{"lr_base", cfg.lr_base},
          {"power", cfg.power},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"batch_size", cfg.batch_size},
          {"total_iterations", cfg.total_iterations},
          {"dropout_rate", cfg.dropout_rate},
          {"class_balancing", cfg.class_balancing},
          {"k", cfg.k},
          {"log_base", cfg.log_base == LogBase::Natural ? "ln" : "log10"},
          {"augmentation", {{"hflip", cfg.augmentation.hflip}, {"max_translate_px", cfg.augmentation.max_translate_px}}},
          {"seed", cfg.seed},
          {"save_every", cfg.save_every},
          {"ignore_index", cfg.ignore_index}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"lr_base",     "power",      "momentum",     "weight_decay", "batch_size",
                                           "total_iterations", "dropout_rate", "class_balancing", "k",
                                           "log_base",    "augmentation", "seed",       "save_every",   "ignore_index"};
  if (!j.is_object()) throw Error("train config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw Error("unknown train config key '" + key + "'");
  TrainConfig cfg;
  try {
    cfg.lr_base = j.value("lr_base", cfg.lr_base);
    cfg.power = j.value("power", cfg.power);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.total_iterations = j.value("total_iterations", cfg.total_iterations);
    cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
    cfg.class_balancing = j.value("class_balancing", cfg.class_balancing);
    cfg.k = j.value("k", cfg.k);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.save_every = j.value("save_every", cfg.save_every);
    cfg.ignore_index = j.value("ignore_index", cfg.ignore_index);
    const std::string base = j.value("log_base", std::string("ln"));
    if (base == "ln")
      cfg.log_base = LogBase::Natural;
    else if (base == "log10")
      cfg.log_base = LogBase::Base10;
    else
      throw Error("log_base must be \"ln\" or \"log10\", got \"" + base + "\"");
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      for (const auto& [key, _] : a.items())
        if (key != "hflip" && key != "max_translate_px") throw Error("unknown augmentation key '" + key + "'");
      cfg.augmentation.hflip = a.value("hflip", cfg.augmentation.hflip);
      cfg.augmentation.max_translate_px = a.value("max_translate_px", cfg.augmentation.max_translate_px);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double poly_lr(std::int64_t iteration, std::int64_t total_iterations, double lr_base, double power) {
  if (total_iterations < 1) throw Error("poly_lr: total_iterations must be >= 1");
  if (iteration < 0 || iteration > total_iterations)
    throw Error("poly_lr: iteration " + std::to_string(iteration) + " outside [0, " + std::to_string(total_iterations) +
                "]");
  return lr_base * std::pow(1.0 - static_cast<double>(iteration) / static_cast<double>(total_iterations), power);
}

std::vector<double> class_weights(const std::vector<double>& probs, double k, LogBase base) {
  if (probs.empty()) throw Error("class_weights: no classes");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0)) throw Error("class_weights: probabilities must be >= 0");
    sum += p;
  }
  if (sum > 1.0 + 1e-6) throw Error("class_weights: probabilities sum to more than 1");
  std::vector<double> w(probs.size());
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const double arg = probs[c] + k;
    if (!(arg > 1.0)) throw Error("class_weights: log(p + k) is not positive for class " + std::to_string(c));
    w[c] = 1.0 / (base == LogBase::Natural ? std::log(arg) : std::log10(arg));
  }
  const double top = *std::max_element(w.begin(), w.end());
  for (double& v : w) v /= top;
  return w;
}

std::vector<double> class_probabilities(const std::vector<Sample>& samples, int num_classes, std::int32_t ignore_index) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::int64_t total = 0;
  for (const auto& s : samples)
    for (std::int32_t v : s.label.data) {
      if (v == ignore_index) continue;
      if (v < 0 || v >= num_classes) throw Error("label " + std::to_string(v) + " out of range in '" + s.id + "'");
      ++counts[static_cast<std::size_t>(v)];
      ++total;
    }
  if (total == 0) throw Error("class_probabilities: no labelled pixels");
  std::vector<double> p(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) p[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return p;
}

template <typename Scalar>
OptimizerState<Scalar> OptimizerState<Scalar>::zeros(const ParamStore<Scalar>& params) {
  OptimizerState state;
  params.for_each([&](const std::string& name, TensorRole role, const Tensor<Scalar>& t) {
    if (is_learnable(role)) state.velocity.emplace(name, Tensor<Scalar>(t.shape(), Scalar(0)));
  });
  return state;
}

template <typename Scalar>
void sgd_step(ParamStore<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads,
              OptimizerState<Scalar>& state, double lr, double momentum, double weight_decay) {
  // Validate everything before touching any tensor.
  params.for_each([&](const std::string& name, TensorRole role, Tensor<Scalar>& p) {
    if (!is_learnable(role)) return;
    auto g = grads.find(name);
    if (g == grads.end()) throw Error("sgd_step: missing gradient for '" + name + "'");
    if (!(g->second.shape() == p.shape()))
      throw Error("sgd_step: gradient shape " + g->second.shape().str() + " != parameter shape " + p.shape().str() +
                  " for '" + name + "'");
    if (!g->second.all_finite()) throw Error("sgd_step: non-finite gradient for '" + name + "'");
    auto v = state.velocity.find(name);
    if (v == state.velocity.end()) throw Error("sgd_step: no velocity buffer for '" + name + "'");
    if (!(v->second.shape() == p.shape())) throw Error("sgd_step: velocity shape mismatch for '" + name + "'");
  });
  for (const auto& [name, _] : grads)
    if (!state.velocity.count(name)) throw Error("sgd_step: gradient for unknown parameter '" + name + "'");

  const Scalar m = static_cast<Scalar>(momentum);
  const Scalar step = static_cast<Scalar>(lr);
  const Scalar wd = static_cast<Scalar>(weight_decay);
  params.for_each([&](const std::string& name, TensorRole role, Tensor<Scalar>& p) {
    if (!is_learnable(role)) return;
    auto& v = state.velocity.at(name).values();
    const auto& g = grads.at(name).values();
    const bool decay = role == TensorRole::Weight || role == TensorRole::Bias;
    if (decay)
      v = m * v + g + wd * p.values();
    else
      v = m * v + g;
    p.values() -= step * v;
  });
  ++state.iteration;
  params.bump_version();
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const Shape sh = s.image.shape();
  for (std::int64_t n = 0; n < sh.n; ++n)
    for (std::int64_t c = 0; c < sh.c; ++c)
      for (std::int64_t y = 0; y < sh.h; ++y)
        for (std::int64_t x = 0; x < sh.w; ++x) out.image(n, c, y, x) = s.image(n, c, y, sh.w - 1 - x);
  for (std::int64_t n = 0; n < s.label.n; ++n)
    for (std::int64_t y = 0; y < s.label.h; ++y)
      for (std::int64_t x = 0; x < s.label.w; ++x) out.label.at(n, y, x) = s.label.at(n, y, s.label.w - 1 - x);
  return out;
}

Sample augment_sample(const Sample& sample, const AugmentConfig& cfg, Rng& rng, std::int32_t ignore_index) {
  const Shape sh = sample.image.shape();
  if (sample.label.h != sh.h || sample.label.w != sh.w || sample.label.n != sh.n)
    throw Error("augment: image " + sh.str() + " and label are not aligned");
  const std::int64_t t = cfg.max_translate_px;
  if (t >= sh.h || t >= sh.w)
    throw Error("augment: max_translate_px " + std::to_string(t) + " exceeds image size " + std::to_string(sh.h) + "x" +
                std::to_string(sh.w));

  Sample out = (cfg.hflip && rng.uniform() < 0.5) ? hflip(sample) : sample;
  if (t == 0) return out;
  const std::int64_t dy = rng.uniform_int(-t, t);
  const std::int64_t dx = rng.uniform_int(-t, t);
  if (dy == 0 && dx == 0) return out;

  const Sample src = out;
  for (std::int64_t n = 0; n < sh.n; ++n)
    for (std::int64_t y = 0; y < sh.h; ++y) {
      const std::int64_t sy = y - dy;
      const std::int64_t cy = std::clamp<std::int64_t>(sy, 0, sh.h - 1);
      for (std::int64_t x = 0; x < sh.w; ++x) {
        const std::int64_t sx = x - dx;
        const std::int64_t cx = std::clamp<std::int64_t>(sx, 0, sh.w - 1);
        for (std::int64_t c = 0; c < sh.c; ++c) out.image(n, c, y, x) = src.image(n, c, cy, cx);
        const bool inside = sy == cy && sx == cx;
        out.label.at(n, y, x) = inside ? src.label.at(n, sy, sx) : ignore_index;
      }
    }
  return out;
}

GraphSpec with_dropout_rate(const GraphSpec& graph, double rate) {
  GraphSpec out = graph;
  bool found = false;
  for (auto& n : out.nodes)
    if (n.op == OpKind::Dropout) {
      n.rate = rate;
      found = true;
    }
  if (rate > 0 && !found)
    throw Error("dropout_rate " + std::to_string(rate) + " requested but the graph has no dropout nodes");
  return out;
}

namespace {

struct Batch {
  TensorF images;
  LabelMap labels;
};

Batch stack(const std::vector<Sample>& items) {
  const Shape s0 = items.front().image.shape();
  Batch b{TensorF(Shape{static_cast<std::int64_t>(items.size()), s0.c, s0.h, s0.w}),
          LabelMap(static_cast<std::int64_t>(items.size()), s0.h, s0.w)};
  const std::int64_t per_image = s0.c * s0.h * s0.w;
  const std::int64_t per_label = s0.h * s0.w;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Shape s = items[i].image.shape();
    if (s.c != s0.c || s.h != s0.h || s.w != s0.w)
      throw Error("batch mixes image sizes: '" + items[i].id + "' is " + s.str() + ", expected " + s0.str());
    std::copy_n(items[i].image.data(), per_image, b.images.data() + static_cast<std::int64_t>(i) * per_image);
    std::copy_n(items[i].label.data.begin(), per_label,
                b.labels.data.begin() + static_cast<std::ptrdiff_t>(i) * per_label);
  }
  return b;
}

}  // namespace

TrainResult train_loop(const GraphSpec& graph_in, ParamStore<float>& params, const std::vector<Sample>& dataset,
                       const TrainConfig& cfg, const SaveHook& on_save, std::ostream* log_stream) {
  cfg.validate();
  if (dataset.empty()) throw Error("train_loop: dataset is empty");
  const GraphSpec graph = with_dropout_rate(graph_in, cfg.dropout_rate);
  validate_graph(graph);
  check_params(graph, params);
  const int classes = graph.num_classes;

  TrainResult result;
  if (cfg.class_balancing)
    result.class_weights = class_weights(class_probabilities(dataset, classes, cfg.ignore_index), cfg.k, cfg.log_base);
  else
    result.class_weights.assign(static_cast<std::size_t>(classes), 1.0);
  result.optimizer = OptimizerState<float>::zeros(params);

  Rng master(cfg.seed);
  Rng order_rng = master.fork();
  Rng augment_rng = master.fork();
  Rng dropout_rng = master.fork();

  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  if (log_stream) write_log_header(*log_stream);

  for (std::int64_t it = 0; it < cfg.total_iterations; ++it) {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - cursor);
    std::vector<Sample> items;
    items.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
      items.push_back(augment_sample(dataset[order[cursor + i]], cfg.augmentation, augment_rng, cfg.ignore_index));
    cursor += take;
    const Batch batch = stack(items);

    const double lr = poly_lr(it, cfg.total_iterations, cfg.lr_base, cfg.power);
    auto pass = forward_taped(graph, params, batch.images, Mode::Train, dropout_rng);
    auto loss = pass->tape.weighted_cross_entropy(pass->output, batch.labels, result.class_weights, cfg.ignore_index);
    const double loss_value = static_cast<double>(pass->tape.value(loss)[0]);
    if (!std::isfinite(loss_value)) throw Error("training diverged: non-finite loss at iteration " + std::to_string(it));
    pass->tape.backward(loss);
    const auto grads = pass->param_grads();
    pass.reset();
    sgd_step(params, grads, result.optimizer, lr, cfg.momentum, cfg.weight_decay);

    const LogRow row{it, lr, loss_value};
    result.log.push_back(row);
    if (log_stream) write_log_row(*log_stream, row);
    if (on_save && cfg.save_every > 0 && (it + 1) % cfg.save_every == 0) on_save(it + 1);
  }
  return result;
}

void write_log_header(std::ostream& out) { out << "iteration,lr,loss\n"; }

void write_log_row(std::ostream& out, const LogRow& row) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << row.iteration << ',' << std::setprecision(9) << row.lr << ',' << row.loss << '\n';
  out.flags(flags);
  out.precision(precision);
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void sgd_step(ParamStore<float>&, const std::map<std::string, TensorF>&, OptimizerState<float>&, double,
                       double, double);
template void sgd_step(ParamStore<double>&, const std::map<std::string, TensorD>&, OptimizerState<double>&, double,
                       double, double);

}  // namespace dsnet
