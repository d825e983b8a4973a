// dsnet command-line driver.
#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsnet/analysis.hpp"
#include "dsnet/builder.hpp"
#include "dsnet/checkpoint.hpp"
#include "dsnet/evaluator.hpp"
#include "dsnet/executor.hpp"
#include "dsnet/fold.hpp"
#include "dsnet/io.hpp"
#include "dsnet/ops.hpp"
#include "dsnet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Size2 {
  std::int64_t h = 0, w = 0;
};

Size2 parse_size(const std::string& s, const std::string& flag) {
  static const std::regex re(R"(^\s*(\d+)\s*[xX]\s*(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw dsnet::Error(flag + ": expected HxW, got '" + s + "'");
  Size2 out{std::stoll(m[1]), std::stoll(m[2])};
  if (out.h < 1 || out.w < 1) throw dsnet::Error(flag + ": sizes must be positive, got '" + s + "'");
  return out;
}

dsnet::Shape parse_shape(const std::string& s, const std::string& flag) {
  static const std::regex re(R"(^\s*(\d+)\s*[xX]\s*(\d+)\s*[xX]\s*(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw dsnet::Error(flag + ": expected CxHxW, got '" + s + "'");
  dsnet::Shape out{1, std::stoll(m[1]), std::stoll(m[2]), std::stoll(m[3])};
  if (out.c < 1 || out.h < 1 || out.w < 1) throw dsnet::Error(flag + ": extents must be positive, got '" + s + "'");
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw dsnet::Error("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw dsnet::Error("cannot parse '" + path.string() + "': " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw dsnet::Error("cannot write '" + path.string() + "'");
  out << text;
}

void apply_thread_limit() {
  const char* env = std::getenv("DSNET_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 0) throw dsnet::Error(std::string("DSNET_THREADS must be a non-negative integer, got '") + env + "'");
  if (n > 0) Eigen::setNbThreads(static_cast<int>(n));
}

std::vector<std::array<int, 3>> load_palette(const std::string& path, int classes) {
  std::vector<std::array<int, 3>> colors;
  if (!path.empty()) {
    const json j = read_json(path);
    const json& list = j.is_object() ? j.at("colors") : j;
    for (const auto& c : list) colors.push_back(c.get<std::array<int, 3>>());
    if (static_cast<int>(colors.size()) < classes)
      throw dsnet::Error("palette '" + path + "' has " + std::to_string(colors.size()) + " colours for " +
                         std::to_string(classes) + " classes");
    return colors;
  }
  dsnet::Rng rng(0x5eed);
  for (int c = 0; c < classes; ++c)
    colors.push_back({static_cast<int>(rng.below(256)), static_cast<int>(rng.below(256)), static_cast<int>(rng.below(256))});
  return colors;
}

dsnet::Checkpoint build_checkpoint(const std::string& variant, int classes, std::uint64_t seed) {
  const dsnet::Variant v = dsnet::variant_from_string(variant);
  dsnet::NetworkConfig cfg;
  if (v == dsnet::Variant::Fast)
    cfg = dsnet::NetworkConfig::fast(classes);
  else if (v == dsnet::Variant::Accurate)
    cfg = dsnet::NetworkConfig::accurate(classes);
  else
    throw dsnet::Error("--variant must be fast or accurate");
  dsnet::Model model = dsnet::build_dsnet(cfg, seed);
  return {model.config, model.graph, std::move(model.params), json{{"seed", seed}, {"folded", false}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DSNet segmentation engine"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // build
  std::string variant = "fast";
  int classes = 19;
  std::uint64_t seed = 0;
  std::string out_path;
  auto* build = app.add_subcommand("build", "Build a freshly initialised model");
  build->add_option("--variant", variant, "fast | accurate")->check(CLI::IsMember({"fast", "accurate"}));
  build->add_option("--classes", classes, "Number of classes")->check(CLI::PositiveNumber);
  build->add_option("--seed", seed, "Initialisation seed");
  build->add_option("--out", out_path, "Output checkpoint")->required();

  // train
  std::string model_path, data_root, split = "train", config_path, log_path, train_size;
  std::optional<double> lr_base, weight_decay, dropout;
  std::optional<std::int64_t> iterations, save_every;
  std::optional<int> batch_size;
  std::optional<std::uint64_t> train_seed;
  auto* train = app.add_subcommand("train", "Train a model on a dataset split");
  train->add_option("--model", model_path, "Input checkpoint")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data_root, "Dataset root")->required()->check(CLI::ExistingDirectory);
  train->add_option("--split", split, "Dataset split");
  train->add_option("--config", config_path, "Training config JSON")->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "Output checkpoint")->required();
  train->add_option("--log", log_path, "CSV training log");
  train->add_option("--train-size", train_size, "Resize samples to HxW before training");
  train->add_option("--lr-base", lr_base, "Override lr_base");
  train->add_option("--weight-decay", weight_decay, "Override weight_decay");
  train->add_option("--dropout", dropout, "Override dropout_rate");
  train->add_option("--iterations", iterations, "Override total_iterations");
  train->add_option("--batch-size", batch_size, "Override batch_size");
  train->add_option("--seed", train_seed, "Override seed");
  train->add_option("--save-every", save_every, "Save the checkpoint every N iterations");

  // eval
  std::string eval_size, full_size, upsample = "logits";
  auto* eval = app.add_subcommand("eval", "Score a model on a dataset split");
  eval->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_root, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "Dataset split");
  eval->add_option("--eval-size", eval_size, "Network input size HxW");
  eval->add_option("--full-size", full_size, "Scoring size HxW");
  eval->add_option("--upsample", upsample, "logits | labels")->check(CLI::IsMember({"logits", "labels"}));
  eval->add_option("--out", out_path, "Metrics JSON (stdout if omitted)");

  // infer
  std::string image_path, color_path, palette_path, infer_size;
  auto* infer = app.add_subcommand("infer", "Segment one image");
  infer->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", image_path, "Input PPM")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", out_path, "Output label PGM")->required();
  infer->add_option("--size", infer_size, "Network input size HxW (logits are resized back)");
  infer->add_option("--color", color_path, "Colourised PPM output");
  infer->add_option("--palette", palette_path, "Palette JSON: [[r,g,b], ...]")->check(CLI::ExistingFile);

  // fold
  auto* fold = app.add_subcommand("fold", "Fold batch norms into convolutions");
  fold->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  fold->add_option("--out", out_path, "Folded checkpoint")->required();

  // analyze
  std::string input_shape = "3x512x1024";
  auto* analyze = app.add_subcommand("analyze", "Static analysis report");
  analyze->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  analyze->add_option("--input-shape", input_shape, "CxHxW");
  analyze->add_option("--out", out_path, "Report JSON (stdout if omitted)");

  // bench
  int warmup = 5, iters = 50;
  auto* bench = app.add_subcommand("bench", "Latency benchmark");
  bench->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--input-shape", input_shape, "CxHxW");
  bench->add_option("--warmup", warmup, "Discarded runs")->check(CLI::NonNegativeNumber);
  bench->add_option("--iters", iters, "Timed runs")->check(CLI::PositiveNumber);
  bench->add_option("--seed", seed, "Input seed");
  bench->add_option("--out", out_path, "Report JSON (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "dsnet: error: " << e.what() << "\n";
    return 2;
  }

  try {
    apply_thread_limit();

    if (*build) {
      dsnet::save_checkpoint(out_path, build_checkpoint(variant, classes, seed));
    } else if (*train) {
      dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      dsnet::TrainConfig cfg = config_path.empty() ? dsnet::TrainConfig{} : dsnet::train_config_from_json(read_json(config_path));
      if (lr_base) cfg.lr_base = *lr_base;
      if (weight_decay) cfg.weight_decay = *weight_decay;
      if (dropout) cfg.dropout_rate = *dropout;
      if (iterations) cfg.total_iterations = *iterations;
      if (batch_size) cfg.batch_size = *batch_size;
      if (train_seed) cfg.seed = *train_seed;
      if (save_every) cfg.save_every = *save_every;
      cfg.validate();

      const auto index = dsnet::scan_dataset(data_root, split, ckpt.graph.num_classes);
      cfg.ignore_index = index.ignore_index;
      auto samples = dsnet::load_samples(index);
      if (!train_size.empty()) {
        const Size2 sz = parse_size(train_size, "--train-size");
        for (auto& s : samples) s = dsnet::resize_pair(s, sz.h, sz.w);
      }
      std::ofstream log;
      if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw dsnet::Error("cannot write '" + log_path + "'");
      }
      auto meta_for = [&](std::int64_t done) {
        json meta = ckpt.meta;
        meta["train_config"] = dsnet::train_config_to_json(cfg);
        meta["iterations_done"] = done;
        return meta;
      };
      auto save = [&](std::int64_t done) {
        dsnet::save_checkpoint(out_path, {ckpt.config, ckpt.graph, ckpt.params, meta_for(done)});
      };
      dsnet::train_loop(ckpt.graph, ckpt.params, samples, cfg, save, log_path.empty() ? nullptr : &log);
      save(cfg.total_iterations);
    } else if (*eval) {
      const dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      const auto index = dsnet::scan_dataset(data_root, split, ckpt.graph.num_classes);
      const auto samples = dsnet::load_samples(index);
      dsnet::EvalOptions opt;
      opt.ignore_index = index.ignore_index;
      opt.upsample = upsample == "labels" ? dsnet::UpsampleMode::Labels : dsnet::UpsampleMode::Logits;
      if (!eval_size.empty()) {
        const Size2 s = parse_size(eval_size, "--eval-size");
        opt.eval_h = s.h;
        opt.eval_w = s.w;
      }
      if (!full_size.empty()) {
        const Size2 s = parse_size(full_size, "--full-size");
        opt.full_h = s.h;
        opt.full_w = s.w;
      }
      const auto result = dsnet::evaluate_dataset(ckpt.graph, ckpt.params, samples, opt);
      json j = dsnet::metrics_to_json(result.metrics);
      j["images"] = samples.size();
      if (!index.class_names.empty()) j["class_names"] = index.class_names;
      write_json(out_path, j);
    } else if (*infer) {
      const dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      const dsnet::TensorF image = dsnet::read_image(image_path);
      dsnet::LabelMap labels;
      if (infer_size.empty()) {
        labels = dsnet::predict(ckpt.graph, ckpt.params, image);
      } else {
        const Size2 s = parse_size(infer_size, "--size");
        const auto logits = dsnet::forward(ckpt.graph, ckpt.params, dsnet::bilinear_resize(image, s.h, s.w));
        labels = dsnet::argmax_labels(dsnet::bilinear_resize(logits, image.shape().h, image.shape().w));
      }
      dsnet::write_label(out_path, labels);
      if (!color_path.empty()) {
        const auto palette = load_palette(palette_path, ckpt.graph.num_classes);
        dsnet::TensorF rgb(dsnet::Shape{1, 3, labels.h, labels.w});
        const std::int64_t plane = labels.h * labels.w;
        for (std::int64_t i = 0; i < plane; ++i)
          for (int c = 0; c < 3; ++c)
            rgb[c * plane + i] = static_cast<float>(palette[static_cast<std::size_t>(labels.data[i])][c]) / 255.0f;
        dsnet::write_image(color_path, rgb);
      }
    } else if (*fold) {
      const dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      auto folded = dsnet::fold_batch_norm(ckpt.graph, ckpt.params);
      json meta = ckpt.meta;
      meta["folded"] = true;
      dsnet::save_checkpoint(out_path, {ckpt.config, std::move(folded.graph), std::move(folded.params), meta});
    } else if (*analyze) {
      const dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      write_json(out_path, dsnet::analyze(ckpt.graph, ckpt.params, parse_shape(input_shape, "--input-shape")));
    } else if (*bench) {
      const dsnet::Checkpoint ckpt = dsnet::load_checkpoint(model_path);
      const auto report =
          dsnet::benchmark(ckpt.graph, ckpt.params, parse_shape(input_shape, "--input-shape"), warmup, iters, seed);
      write_json(out_path, dsnet::bench_to_json(report));
    }
  } catch (const std::exception& e) {
    std::cerr << "dsnet: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
