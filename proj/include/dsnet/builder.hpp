#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsnet/graph.hpp"
#include "dsnet/params.hpp"

namespace dsnet {

struct DenseUnitConfig {
  std::int64_t growth = 32;
  bool bottleneck = false;
  std::int64_t bottleneck_width = 128;
  double dropout_rate = 0.0;

  void validate() const;
};

enum class BlockKind { NonBottleneck, Bottleneck };

struct NetworkConfig {
  Variant variant = Variant::Fast;
  int num_classes = 19;
  int input_channels = 3;
  std::int64_t growth = 32;
  std::int64_t initial_channels = 32;
  double compression = 0.5;
  std::array<int, 5> block_units{2, 2, 8, 10, 8};
  std::array<BlockKind, 5> block_kind{BlockKind::NonBottleneck, BlockKind::NonBottleneck, BlockKind::Bottleneck,
                                      BlockKind::Bottleneck, BlockKind::Bottleneck};
  std::int64_t bottleneck_width = 128;  // 4 x growth
  std::int64_t decoder_channels = 32;
  double dropout_rate = 0.0;

  static NetworkConfig fast(int num_classes = 19);
  static NetworkConfig accurate(int num_classes = 11);

  void validate() const;
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

nlohmann::json config_to_json(const NetworkConfig& cfg);
NetworkConfig config_from_json(const nlohmann::json& j);

/// A run of nodes appended after `input`, producing `output` with
/// `channels` feature maps.
struct Fragment {
  std::vector<LayerNode> nodes;
  std::string output;
  std::int64_t channels = 0;
};

/// Conv -> BN -> ReLU, ids "<prefix>.conv", "<prefix>.bn", "<prefix>.relu".
Fragment conv_bn_relu(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                      std::int64_t out_channels, int kernel, int stride, int padding);

/// 3x3 Conv-BN-ReLU to `out_channels`, stride 2 for the fast variant and
/// stride 1 for the accurate one.
Fragment build_initial_block(Variant variant, const std::string& input, std::int64_t in_channels = 3,
                             std::int64_t out_channels = 32);

/// Dense unit whose branch output is concatenated with its input:
///   non-bottleneck: 3x3(in -> k), 3x3(k -> k)
///   bottleneck:     1x1(in -> width), 3x3(width -> k), 3x3(k -> k)
/// then optional dropout and concat, so channels grow by k.
Fragment build_dense_unit(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                          const DenseUnitConfig& cfg);

/// 1x1 Conv-BN-ReLU to floor(in * compression) channels, then 2x2/2 average pooling.
Fragment build_transition(const std::string& prefix, const std::string& input, std::int64_t in_channels,
                          double compression);

struct EncoderFragment {
  std::vector<LayerNode> nodes;  // starts with the input node
  std::string input_id;
  std::array<std::string, 5> block_outputs;  // pre-transition outputs of Block1..Block5
  std::array<std::int64_t, 5> block_channels{};
};

EncoderFragment build_encoder(const NetworkConfig& cfg);

struct DecoderTap {
  std::string id;
  std::int64_t channels = 0;
};

/// fast: taps Block2..Block5; accurate: Block3..Block5. Each tap gets a 3x3
/// Conv-BN-ReLU projection, every projection is resized to the first tap's
/// resolution, concatenated, and an 8x8 stride-4 pad-2 transposed
/// convolution produces the logits.
Fragment build_decoder(Variant variant, const std::vector<DecoderTap>& taps, int num_classes,
                       std::int64_t projection_channels = 32);

/// Whole segmentation network. The graph is validated before returning.
GraphSpec build_dsnet_graph(const NetworkConfig& cfg);

struct Model {
  NetworkConfig config;
  GraphSpec graph;
  ParamStore<float> params;
};

Model build_dsnet(const NetworkConfig& cfg, std::uint64_t seed);

/// Block5 -> global average pool -> fully connected (1x1 conv) -> (N, classes, 1, 1).
GraphSpec attach_classifier_head(const EncoderFragment& encoder, int num_classes);

struct UnitCounts {
  int non_bottleneck = 0;
  int bottleneck = 0;
};

/// Counts dense units by inspecting "bX.uY." node groups: a unit with a
/// 1x1 convolution is a bottleneck unit.
UnitCounts count_dense_units(const GraphSpec& graph);

/// Channel width of the decoder concatenation, or 0 when there is none.
std::int64_t decoder_concat_channels(const GraphSpec& graph);

}  // namespace dsnet
