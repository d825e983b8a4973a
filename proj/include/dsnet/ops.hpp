#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsnet/rng.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet {

enum class Mode { Train, Eval };
enum class PoolMode { Max, Avg };

// ---------------------------------------------------------------------------
// Convolution. Cross-correlation convention (the kernel is not flipped),
// symmetric zero padding.
//   input  (N, Cin, H, W), weight (Cout, Cin, kh, kw), bias (Cout)
//   output (N, Cout, (H + 2p - kh) / s + 1, (W + 2p - kw) / s + 1)
// ---------------------------------------------------------------------------

Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding);

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      int stride, int padding);

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                  const Tensor<Scalar>& grad_output, int stride, int padding,
                                  bool need_input_grad = true);

// ---------------------------------------------------------------------------
// Transposed convolution: the adjoint of conv2d with respect to its input.
//   weight (Cin, Cout, kh, kw); output extent (H - 1) * s - 2p + kh.
// ---------------------------------------------------------------------------

Shape transposed_conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding);

template <typename Scalar>
Tensor<Scalar> transposed_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                 const Tensor<Scalar>& bias, int stride, int padding);

template <typename Scalar>
ConvGrads<Scalar> transposed_conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                             const Tensor<Scalar>& grad_output, int stride, int padding,
                                             bool need_input_grad = true);

// ---------------------------------------------------------------------------
// Pooling without padding: output extent (H - k) / s + 1.
// ---------------------------------------------------------------------------

Shape pool2d_output_shape(const Shape& input, int kernel, int stride);

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  /// Flat input index of each output's maximum (max mode only).
  std::vector<std::int64_t> argmax;
};

template <typename Scalar>
PoolResult<Scalar> pool2d(const Tensor<Scalar>& input, PoolMode mode, int kernel, int stride);

template <typename Scalar>
Tensor<Scalar> pool2d_backward(const Shape& input_shape, const PoolResult<Scalar>& forward, PoolMode mode,
                               int kernel, int stride, const Tensor<Scalar>& grad_output);

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_output);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormParams identity(std::int64_t channels, double eps = 1e-5, double momentum = 0.1);
  std::int64_t channels() const { return gamma.size(); }
  void validate() const;
};

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;       // (x - mean) * inv_std
  std::vector<double> inv_std;     // per channel
  Mode mode = Mode::Eval;
};

/// Train mode normalizes with the batch mean and biased variance and
/// blends both into the running statistics:
///   running <- (1 - momentum) * running + momentum * batch.
/// Eval mode uses the running statistics only.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, BatchNormParams<Scalar>& params, Mode mode,
                          BatchNormCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormParams<Scalar>& params, const BatchNormCache<Scalar>& cache,
                                           const Tensor<Scalar>& grad_output);

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);

/// The subgradient at exactly zero is zero.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output);

/// Bilinear resampling with half-pixel centres (align_corners = false):
///   src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1],
/// blending the two neighbouring samples floor(src) and min(floor(src)+1, in-1).
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& input, std::int64_t out_h, std::int64_t out_w);

template <typename Scalar>
Tensor<Scalar> bilinear_resize_backward(const Shape& input_shape, const Tensor<Scalar>& grad_output);

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> inputs);

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& inputs);

/// Splits a gradient along channels into pieces of the given widths.
template <typename Scalar>
std::vector<Tensor<Scalar>> split_channels(const Tensor<Scalar>& grad, std::span<const std::int64_t> widths);

template <typename Scalar>
struct DropoutResult {
  Tensor<Scalar> output;
  /// Per-element multiplier: 0 for dropped, 1 / (1 - p) for kept. Empty
  /// when the op was the identity.
  Tensor<Scalar> mask;
};

/// Inverted dropout: survivors are scaled by 1 / (1 - p) at train time so
/// that eval mode is the identity. One uniform draw per element.
template <typename Scalar>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& input, double rate, Mode mode, Rng& rng);

template <typename Scalar>
Tensor<Scalar> dropout_backward(const DropoutResult<Scalar>& forward, const Tensor<Scalar>& grad_output);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Tensor<Scalar> grad;  // d loss / d logits
  std::int64_t counted_pixels = 0;
};

/// Softmax cross-entropy weighted by the class weight of each pixel's true
/// label, averaged over non-ignored pixels.
template <typename Scalar>
LossResult<Scalar> weighted_cross_entropy(const Tensor<Scalar>& logits, const LabelMap& labels,
                                          std::span<const double> class_weights,
                                          std::int32_t ignore_index = kIgnoreIndex);

/// Throws EngineFault naming `what` if any element is NaN or infinite.
template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const std::string& what);

}  // namespace dsnet
