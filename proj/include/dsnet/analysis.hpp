#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsnet/graph.hpp"
#include "dsnet/params.hpp"

namespace dsnet {

struct ParamCount {
  std::int64_t total = 0;  // learnable tensors plus batch-norm running statistics
  std::int64_t float32_bytes = 0;
  double megabytes() const { return static_cast<double>(float32_bytes) / 1e6; }
  double mebibytes() const { return static_cast<double>(float32_bytes) / (1024.0 * 1024.0); }
};

/// Counts from the graph hyperparameters alone.
ParamCount count_parameters(const GraphSpec& graph);

/// Counts the stored tensors after checking they match the graph.
template <typename Scalar>
ParamCount count_parameters(const GraphSpec& graph, const ParamStore<Scalar>& params);

struct FlopReport {
  struct Entry {
    std::string id;
    std::int64_t macs = 0;
  };
  std::vector<Entry> per_node;
  std::int64_t total = 0;
};

/// Multiply-accumulate counts for the whole batch:
///   conv            Cout * Ho * Wo * Cin * k * k
///   transposed conv Cin * H * W * Cout * k * k
///   batch norm      one per element (scale and shift)
///   avg pool        k * k per output element
///   global pool     one per input element
///   resize          four per output element
///   input, relu, max pool, concat, dropout: zero
FlopReport count_flops(const GraphSpec& graph, const Shape& input);

struct ReceptiveField {
  double rf_h = 1;
  double rf_w = 1;
  double stride_h = 1;  // input pixels between adjacent outputs
  double stride_w = 1;
};

/// Composes r <- r + (k - 1) * j, j <- j * s from the input to `node_id`.
/// Transposed convolutions divide the jump by their stride and add
/// (ceil(k / s) - 1) input steps; bilinear resizes add one input step when
/// upsampling; global pooling covers its whole input. Multi-input nodes
/// take the maximum over their inputs.
ReceptiveField receptive_field(const GraphSpec& graph, const std::string& node_id, const Shape& input);

/// Full static report: parameters, model size, MACs, per-node shapes and
/// receptive fields, unit counts and decoder width.
template <typename Scalar>
nlohmann::json analyze(const GraphSpec& graph, const ParamStore<Scalar>& params, const Shape& input);

}  // namespace dsnet
