#include "dsnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dsnet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

namespace {

struct Geometry {
  std::int64_t channels, height, width;  // image side
  std::int64_t kh, kw;
  std::int64_t stride, pad;
  std::int64_t out_h, out_w;  // column side
};

// Unfolds one (C, H, W) image into a (C*kh*kw, out_h*out_w) row-major matrix.
template <typename Scalar>
void im2col(const Scalar* image, const Geometry& g, Scalar* col) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const Scalar* src = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* line = src + iy * g.width;
          if (g.stride == 1) {
            // ix = ox - pad + kj in [0, width)
            const std::int64_t shift = kj - g.pad;
            const std::int64_t lo = std::clamp<std::int64_t>(-shift, 0, g.out_w);
            const std::int64_t hi = std::clamp<std::int64_t>(g.width - shift, lo, g.out_w);
            std::fill(dst, dst + lo, Scalar(0));
            std::copy(line + lo + shift, line + hi + shift, dst + lo);
            std::fill(dst + hi, dst + g.out_w, Scalar(0));
          } else {
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              dst[ox] = (ix >= 0 && ix < g.width) ? line[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the (C, H, W) image.
template <typename Scalar>
void col2im(const Scalar* col, const Geometry& g, Scalar* image) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    Scalar* dst_plane = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          Scalar* line = dst_plane + iy * g.width;
          const Scalar* src = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Geometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;
template <typename Scalar>
using ConstMap = typename Tensor<Scalar>::ConstMatrixMap;
template <typename Scalar>
using Map = typename Tensor<Scalar>::MatrixMap;

void require_positive(std::int64_t v, const char* what) {
  if (v <= 0) throw Error(std::string(what) + " must be positive");
}

}  // namespace

// ----------------------------------------------------------------------------
// conv2d
// ----------------------------------------------------------------------------

Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding) {
  require_positive(stride, "conv stride");
  if (padding < 0) throw Error("conv padding must be non-negative");
  if (input.c != weight.c)
    throw Error("conv2d channel mismatch: input " + input.str() + " weight " + weight.str());
  const std::int64_t span_h = input.h + 2 * padding - weight.h;
  const std::int64_t span_w = input.w + 2 * padding - weight.w;
  if (span_h < 0 || span_w < 0) throw Error("conv2d output would be empty for input " + input.str());
  return {input.n, weight.n, span_h / stride + 1, span_w / stride + 1};
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      int stride, int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv2d_output_shape(is, ws, stride, padding);
  if (bias.size() != 0 && bias.size() != ws.n) throw Error("conv2d bias length mismatch");
  const Geometry g{is.c, is.h, is.w, ws.h, ws.w, stride, padding, os.h, os.w};
  const std::int64_t k = is.c * ws.h * ws.w;
  ConstMap<Scalar> wm(weight.data(), ws.n, k);
  Tensor<Scalar> out(os);
  RowMatrix<Scalar> col;
  for (std::int64_t n = 0; n < is.n; ++n) {
    auto y = out.sample(n);
    if (is_pointwise(g)) {
      y.noalias() = wm * input.sample(n);
    } else {
      col.resize(k, os.h * os.w);
      im2col(input.plane(n, 0), g, col.data());
      y.noalias() = wm * col;
    }
    if (bias.size() != 0) y.colwise() += bias.values();
  }
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                  const Tensor<Scalar>& grad_output, int stride, int padding,
                                  bool need_input_grad) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv2d_output_shape(is, ws, stride, padding);
  if (!(grad_output.shape() == os)) throw Error("conv2d_backward gradient shape mismatch");
  const Geometry g{is.c, is.h, is.w, ws.h, ws.w, stride, padding, os.h, os.w};
  const std::int64_t k = is.c * ws.h * ws.w;
  ConstMap<Scalar> wm(weight.data(), ws.n, k);

  ConvGrads<Scalar> grads{Tensor<Scalar>(need_input_grad ? is : Shape{}), Tensor<Scalar>(ws),
                          Tensor<Scalar>::vector(ws.n)};
  Map<Scalar> dw(grads.weight.data(), ws.n, k);
  RowMatrix<Scalar> col;
  RowMatrix<Scalar> dcol;
  for (std::int64_t n = 0; n < is.n; ++n) {
    auto dy = grad_output.sample(n);
    grads.bias.values() += dy.rowwise().sum();
    if (is_pointwise(g)) {
      dw.noalias() += dy * input.sample(n).transpose();
      if (need_input_grad) grads.input.sample(n).noalias() = wm.transpose() * dy;
    } else {
      col.resize(k, os.h * os.w);
      im2col(input.plane(n, 0), g, col.data());
      dw.noalias() += dy * col.transpose();
      if (need_input_grad) {
        dcol.noalias() = wm.transpose() * dy;
        col2im(dcol.data(), g, grads.input.plane(n, 0));
      }
    }
  }
  return grads;
}

// ----------------------------------------------------------------------------
// transposed_conv2d
// ----------------------------------------------------------------------------

Shape transposed_conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding) {
  require_positive(stride, "transposed conv stride");
  if (padding < 0) throw Error("transposed conv padding must be non-negative");
  if (input.c != weight.n)
    throw Error("transposed_conv2d channel mismatch: input " + input.str() + " weight " + weight.str());
  const std::int64_t oh = (input.h - 1) * stride - 2 * padding + weight.h;
  const std::int64_t ow = (input.w - 1) * stride - 2 * padding + weight.w;
  if (oh <= 0 || ow <= 0) throw Error("transposed_conv2d output would be empty for input " + input.str());
  return {input.n, weight.c, oh, ow};
}

template <typename Scalar>
Tensor<Scalar> transposed_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                 const Tensor<Scalar>& bias, int stride, int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = transposed_conv2d_output_shape(is, ws, stride, padding);
  if (bias.size() != 0 && bias.size() != ws.c) throw Error("transposed_conv2d bias length mismatch");
  // The output plays the image role of the underlying convolution.
  const Geometry g{ws.c, os.h, os.w, ws.h, ws.w, stride, padding, is.h, is.w};
  const std::int64_t k = ws.c * ws.h * ws.w;
  ConstMap<Scalar> wm(weight.data(), ws.n, k);
  Tensor<Scalar> out(os);
  RowMatrix<Scalar> col;
  for (std::int64_t n = 0; n < is.n; ++n) {
    col.noalias() = wm.transpose() * input.sample(n);
    col2im(col.data(), g, out.plane(n, 0));
    if (bias.size() != 0) out.sample(n).colwise() += bias.values();
  }
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> transposed_conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                             const Tensor<Scalar>& grad_output, int stride, int padding,
                                             bool need_input_grad) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = transposed_conv2d_output_shape(is, ws, stride, padding);
  if (!(grad_output.shape() == os)) throw Error("transposed_conv2d_backward gradient shape mismatch");
  const Geometry g{ws.c, os.h, os.w, ws.h, ws.w, stride, padding, is.h, is.w};
  const std::int64_t k = ws.c * ws.h * ws.w;
  ConstMap<Scalar> wm(weight.data(), ws.n, k);

  ConvGrads<Scalar> grads{Tensor<Scalar>(need_input_grad ? is : Shape{}), Tensor<Scalar>(ws),
                          Tensor<Scalar>::vector(ws.c)};
  Map<Scalar> dw(grads.weight.data(), ws.n, k);
  RowMatrix<Scalar> dcol(k, is.h * is.w);
  for (std::int64_t n = 0; n < is.n; ++n) {
    grads.bias.values() += grad_output.sample(n).rowwise().sum();
    im2col(grad_output.plane(n, 0), g, dcol.data());
    dw.noalias() += input.sample(n) * dcol.transpose();
    if (need_input_grad) grads.input.sample(n).noalias() = wm * dcol;
  }
  return grads;
}

// ----------------------------------------------------------------------------
// pooling
// ----------------------------------------------------------------------------

Shape pool2d_output_shape(const Shape& input, int kernel, int stride) {
  require_positive(kernel, "pool kernel");
  require_positive(stride, "pool stride");
  if (kernel > input.h || kernel > input.w)
    throw Error("pool kernel " + std::to_string(kernel) + " exceeds input " + input.str());
  return {input.n, input.c, (input.h - kernel) / stride + 1, (input.w - kernel) / stride + 1};
}

template <typename Scalar>
PoolResult<Scalar> pool2d(const Tensor<Scalar>& input, PoolMode mode, int kernel, int stride) {
  const Shape& is = input.shape();
  const Shape os = pool2d_output_shape(is, kernel, stride);
  PoolResult<Scalar> result{Tensor<Scalar>(os), {}};
  if (mode == PoolMode::Max) result.argmax.resize(static_cast<std::size_t>(os.numel()));
  const Scalar inv_area = Scalar(1) / Scalar(kernel * kernel);
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < is.n; ++n) {
    for (std::int64_t c = 0; c < is.c; ++c) {
      const std::int64_t base = input.index(n, c, 0, 0);
      const Scalar* src = input.data() + base;
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        for (std::int64_t ox = 0; ox < os.w; ++ox, ++o) {
          const std::int64_t y0 = oy * stride;
          const std::int64_t x0 = ox * stride;
          if (mode == PoolMode::Max) {
            std::int64_t best = y0 * is.w + x0;
            for (std::int64_t dy = 0; dy < kernel; ++dy)
              for (std::int64_t dx = 0; dx < kernel; ++dx) {
                const std::int64_t i = (y0 + dy) * is.w + x0 + dx;
                if (src[i] > src[best]) best = i;
              }
            result.output[o] = src[best];
            result.argmax[static_cast<std::size_t>(o)] = base + best;
          } else {
            Scalar acc = 0;
            for (std::int64_t dy = 0; dy < kernel; ++dy)
              for (std::int64_t dx = 0; dx < kernel; ++dx) acc += src[(y0 + dy) * is.w + x0 + dx];
            result.output[o] = acc * inv_area;
          }
        }
      }
    }
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> pool2d_backward(const Shape& input_shape, const PoolResult<Scalar>& forward, PoolMode mode,
                               int kernel, int stride, const Tensor<Scalar>& grad_output) {
  const Shape os = pool2d_output_shape(input_shape, kernel, stride);
  if (!(grad_output.shape() == os)) throw Error("pool2d_backward gradient shape mismatch");
  Tensor<Scalar> grad(input_shape);
  if (mode == PoolMode::Max) {
    for (std::int64_t o = 0; o < os.numel(); ++o) grad[forward.argmax[static_cast<std::size_t>(o)]] += grad_output[o];
    return grad;
  }
  const Scalar inv_area = Scalar(1) / Scalar(kernel * kernel);
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t c = 0; c < os.c; ++c) {
      Scalar* dst = grad.plane(n, c);
      for (std::int64_t oy = 0; oy < os.h; ++oy)
        for (std::int64_t ox = 0; ox < os.w; ++ox, ++o) {
          const Scalar g = grad_output[o] * inv_area;
          for (std::int64_t dy = 0; dy < kernel; ++dy)
            for (std::int64_t dx = 0; dx < kernel; ++dx) dst[(oy * stride + dy) * input_shape.w + ox * stride + dx] += g;
        }
    }
  return grad;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  const Shape& is = input.shape();
  if (is.h < 1 || is.w < 1) throw Error("global_avg_pool on empty spatial extent " + is.str());
  Tensor<Scalar> out(Shape{is.n, is.c, 1, 1});
  for (std::int64_t n = 0; n < is.n; ++n) out.sample(n) = input.sample(n).rowwise().mean();
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_output) {
  if (!(grad_output.shape() == Shape{input_shape.n, input_shape.c, 1, 1}))
    throw Error("global_avg_pool_backward gradient shape mismatch");
  Tensor<Scalar> grad(input_shape);
  const Scalar inv = Scalar(1) / Scalar(input_shape.plane());
  for (std::int64_t n = 0; n < input_shape.n; ++n)
    grad.sample(n).colwise() = grad_output.sample(n).col(0) * inv;
  return grad;
}

// ----------------------------------------------------------------------------
// batch norm
// ----------------------------------------------------------------------------

template <typename Scalar>
BatchNormParams<Scalar> BatchNormParams<Scalar>::identity(std::int64_t channels, double eps, double momentum) {
  return {Tensor<Scalar>::vector(channels, 1), Tensor<Scalar>::vector(channels, 0),
          Tensor<Scalar>::vector(channels, 0), Tensor<Scalar>::vector(channels, 1), eps, momentum};
}

template <typename Scalar>
void BatchNormParams<Scalar>::validate() const {
  if (!(eps > 0)) throw Error("batch norm eps must be positive");
  if (!(momentum > 0 && momentum <= 1)) throw Error("batch norm momentum must lie in (0, 1]");
  const auto c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw Error("batch norm parameter vectors differ in length");
  if ((running_var.values().array() < Scalar(0)).any()) throw Error("batch norm running variance is negative");
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, BatchNormParams<Scalar>& params, Mode mode,
                          BatchNormCache<Scalar>* cache) {
  params.validate();
  const Shape& s = input.shape();
  if (s.c != params.channels())
    throw Error("batch_norm channel mismatch: input " + s.str() + " params " + std::to_string(params.channels()));
  const std::int64_t count = s.n * s.plane();
  if (mode == Mode::Train && count < 2) throw Error("batch_norm train mode needs at least 2 values per channel");

  std::vector<double> mean(static_cast<std::size_t>(s.c));
  std::vector<double> var(static_cast<std::size_t>(s.c));
  if (mode == Mode::Train) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double sum = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const Scalar* p = input.plane(n, c);
        for (std::int64_t i = 0; i < s.plane(); ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const Scalar* p = input.plane(n, c);
        for (std::int64_t i = 0; i < s.plane(); ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      mean[c] = mu;
      var[c] = sq / static_cast<double>(count);
      const double m = params.momentum;
      params.running_mean[c] = static_cast<Scalar>((1 - m) * params.running_mean[c] + m * mu);
      params.running_var[c] = static_cast<Scalar>((1 - m) * params.running_var[c] + m * var[c]);
    }
  } else {
    for (std::int64_t c = 0; c < s.c; ++c) {
      mean[c] = params.running_mean[c];
      var[c] = params.running_var[c];
    }
  }

  Tensor<Scalar> out(s);
  std::vector<double> inv_std(static_cast<std::size_t>(s.c));
  if (cache) {
    cache->normalized = Tensor<Scalar>(s);
    cache->mode = mode;
  }
  for (std::int64_t c = 0; c < s.c; ++c) {
    inv_std[c] = 1.0 / std::sqrt(var[c] + params.eps);
    const Scalar scale = static_cast<Scalar>(inv_std[c]);
    const Scalar shift = static_cast<Scalar>(mean[c]);
    const Scalar gamma = params.gamma[c];
    const Scalar beta = params.beta[c];
    for (std::int64_t n = 0; n < s.n; ++n) {
      const Scalar* src = input.plane(n, c);
      Scalar* dst = out.plane(n, c);
      Scalar* xhat = cache ? cache->normalized.plane(n, c) : nullptr;
      for (std::int64_t i = 0; i < s.plane(); ++i) {
        const Scalar z = (src[i] - shift) * scale;
        if (xhat) xhat[i] = z;
        dst[i] = gamma * z + beta;
      }
    }
  }
  if (cache) cache->inv_std = std::move(inv_std);
  return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormParams<Scalar>& params, const BatchNormCache<Scalar>& cache,
                                           const Tensor<Scalar>& grad_output) {
  const Shape& s = grad_output.shape();
  cache.normalized.require_same_shape(grad_output);
  const std::int64_t count = s.n * s.plane();
  BatchNormGrads<Scalar> grads{Tensor<Scalar>(s), Tensor<Scalar>::vector(s.c), Tensor<Scalar>::vector(s.c)};
  for (std::int64_t c = 0; c < s.c; ++c) {
    double sum_dy = 0;
    double sum_dy_xhat = 0;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const Scalar* dy = grad_output.plane(n, c);
      const Scalar* xh = cache.normalized.plane(n, c);
      for (std::int64_t i = 0; i < s.plane(); ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    grads.gamma[c] = static_cast<Scalar>(sum_dy_xhat);
    grads.beta[c] = static_cast<Scalar>(sum_dy);
    const double g = params.gamma[c];
    const double inv_std = cache.inv_std[c];
    for (std::int64_t n = 0; n < s.n; ++n) {
      const Scalar* dy = grad_output.plane(n, c);
      const Scalar* xh = cache.normalized.plane(n, c);
      Scalar* dx = grads.input.plane(n, c);
      if (cache.mode == Mode::Train) {
        // dx = g * inv_std / M * (M * dy - sum(dy) - xhat * sum(dy * xhat))
        const double k = g * inv_std / static_cast<double>(count);
        for (std::int64_t i = 0; i < s.plane(); ++i)
          dx[i] = static_cast<Scalar>(k * (static_cast<double>(count) * dy[i] - sum_dy - xh[i] * sum_dy_xhat));
      } else {
        const Scalar k = static_cast<Scalar>(g * inv_std);
        for (std::int64_t i = 0; i < s.plane(); ++i) dx[i] = k * dy[i];
      }
    }
  }
  return grads;
}

// ----------------------------------------------------------------------------
// elementwise / structural
// ----------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  return Tensor<Scalar>(input.shape(), input.values().cwiseMax(Scalar(0)));
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output) {
  input.require_same_shape(grad_output);
  return Tensor<Scalar>(input.shape(),
                        (input.values().array() > Scalar(0)).select(grad_output.values(), Scalar(0)).matrix());
}

namespace {

struct Tap {
  std::int64_t lo, hi;
  double frac;
};

std::vector<Tap> resize_taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(src));
    taps[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& input, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw Error("bilinear_resize target must be at least 1x1");
  const Shape& is = input.shape();
  if (is.h < 1 || is.w < 1) throw Error("bilinear_resize on empty input " + is.str());
  if (is.h == out_h && is.w == out_w) return input;
  const auto ty = resize_taps(is.h, out_h);
  const auto tx = resize_taps(is.w, out_w);
  Tensor<Scalar> out(Shape{is.n, is.c, out_h, out_w});
  for (std::int64_t n = 0; n < is.n; ++n)
    for (std::int64_t c = 0; c < is.c; ++c) {
      const Scalar* src = input.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[y];
        const Scalar fy = static_cast<Scalar>(a.frac);
        const Scalar* r0 = src + a.lo * is.w;
        const Scalar* r1 = src + a.hi * is.w;
        for (std::int64_t x = 0; x < out_w; ++x) {
          const Tap& b = tx[x];
          const Scalar fx = static_cast<Scalar>(b.frac);
          const Scalar top = r0[b.lo] + fx * (r0[b.hi] - r0[b.lo]);
          const Scalar bottom = r1[b.lo] + fx * (r1[b.hi] - r1[b.lo]);
          dst[y * out_w + x] = top + fy * (bottom - top);
        }
      }
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> bilinear_resize_backward(const Shape& input_shape, const Tensor<Scalar>& grad_output) {
  const Shape& os = grad_output.shape();
  if (os.n != input_shape.n || os.c != input_shape.c) throw Error("bilinear_resize_backward shape mismatch");
  if (os.h == input_shape.h && os.w == input_shape.w) return grad_output;
  const auto ty = resize_taps(input_shape.h, os.h);
  const auto tx = resize_taps(input_shape.w, os.w);
  Tensor<Scalar> grad(input_shape);
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t c = 0; c < os.c; ++c) {
      const Scalar* src = grad_output.plane(n, c);
      Scalar* dst = grad.plane(n, c);
      for (std::int64_t y = 0; y < os.h; ++y) {
        const Tap& a = ty[y];
        const Scalar fy = static_cast<Scalar>(a.frac);
        Scalar* r0 = dst + a.lo * input_shape.w;
        Scalar* r1 = dst + a.hi * input_shape.w;
        for (std::int64_t x = 0; x < os.w; ++x) {
          const Tap& b = tx[x];
          const Scalar fx = static_cast<Scalar>(b.frac);
          const Scalar g = src[y * os.w + x];
          const Scalar gt = g * (1 - fy);
          const Scalar gb = g * fy;
          r0[b.lo] += gt * (1 - fx);
          r0[b.hi] += gt * fx;
          r1[b.lo] += gb * (1 - fx);
          r1[b.hi] += gb * fx;
        }
      }
    }
  return grad;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> inputs) {
  if (inputs.empty()) throw Error("concat_channels needs at least one input");
  const Shape& first = inputs.front()->shape();
  std::int64_t channels = 0;
  for (const auto* t : inputs) {
    const Shape& s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw Error("concat_channels batch/spatial mismatch: " + first.str() + " vs " + s.str());
    channels += s.c;
  }
  Tensor<Scalar> out(Shape{first.n, channels, first.h, first.w});
  const std::int64_t plane = first.plane();
  for (std::int64_t n = 0; n < first.n; ++n) {
    Scalar* dst = out.plane(n, 0);
    for (const auto* t : inputs) {
      const std::int64_t len = t->shape().c * plane;
      std::copy_n(t->plane(n, 0), len, dst);
      dst += len;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& inputs) {
  std::vector<const Tensor<Scalar>*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(ptrs));
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split_channels(const Tensor<Scalar>& grad, std::span<const std::int64_t> widths) {
  const Shape& s = grad.shape();
  std::int64_t total = 0;
  for (auto w : widths) total += w;
  if (total != s.c) throw Error("split_channels widths do not sum to channel count");
  std::vector<Tensor<Scalar>> parts;
  parts.reserve(widths.size());
  for (auto w : widths) parts.emplace_back(Shape{s.n, w, s.h, s.w});
  const std::int64_t plane = s.plane();
  for (std::int64_t n = 0; n < s.n; ++n) {
    const Scalar* src = grad.plane(n, 0);
    for (auto& p : parts) {
      const std::int64_t len = p.shape().c * plane;
      std::copy_n(src, len, p.plane(n, 0));
      src += len;
    }
  }
  return parts;
}

template <typename Scalar>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return {input, {}};
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  Tensor<Scalar> mask(input.shape());
  for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  Tensor<Scalar> out(input.shape(), input.values().cwiseProduct(mask.values()));
  return {std::move(out), std::move(mask)};
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const DropoutResult<Scalar>& forward, const Tensor<Scalar>& grad_output) {
  if (forward.mask.empty()) return grad_output;
  forward.mask.require_same_shape(grad_output);
  return Tensor<Scalar>(grad_output.shape(), grad_output.values().cwiseProduct(forward.mask.values()));
}

template <typename Scalar>
LossResult<Scalar> weighted_cross_entropy(const Tensor<Scalar>& logits, const LabelMap& labels,
                                          std::span<const double> class_weights, std::int32_t ignore_index) {
  const Shape& s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w)
    throw Error("weighted_cross_entropy label shape does not match logits " + s.str());
  if (static_cast<std::int64_t>(class_weights.size()) != s.c)
    throw Error("weighted_cross_entropy expects one weight per class");

  LossResult<Scalar> result{0.0, Tensor<Scalar>(s), 0};
  const std::int64_t plane = s.plane();
  std::vector<double> prob(static_cast<std::size_t>(s.c));
  double total = 0;
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const std::int32_t label = labels.data[static_cast<std::size_t>(n * plane + i)];
      if (label == ignore_index) continue;
      if (label < 0 || label >= s.c)
        throw Error("label " + std::to_string(label) + " outside [0, " + std::to_string(s.c) + ")");
      const Scalar* base = logits.plane(n, 0) + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(base[c * plane]));
      double z = 0;
      for (std::int64_t c = 0; c < s.c; ++c) {
        prob[c] = std::exp(static_cast<double>(base[c * plane]) - mx);
        z += prob[c];
      }
      const double wt = class_weights[static_cast<std::size_t>(label)];
      total += wt * (std::log(z) - (static_cast<double>(base[label * plane]) - mx));
      Scalar* g = result.grad.plane(n, 0) + i;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const double p = prob[c] / z - (c == label ? 1.0 : 0.0);
        g[c * plane] = static_cast<Scalar>(wt * p);
      }
      ++result.counted_pixels;
    }
  }
  if (result.counted_pixels == 0) throw Error("weighted_cross_entropy: every pixel is ignored");
  const double inv = 1.0 / static_cast<double>(result.counted_pixels);
  result.loss = total * inv;
  result.grad.values() *= static_cast<Scalar>(inv);
  return result;
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const std::string& what) {
  if (!t.all_finite()) throw EngineFault("non-finite value produced by " + what);
}

#define DSNET_INSTANTIATE_OPS(S)                                                                              \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);                  \
  template ConvGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int, bool); \
  template Tensor<S> transposed_conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);       \
  template ConvGrads<S> transposed_conv2d_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int,  \
                                                   int, bool);                                                \
  template PoolResult<S> pool2d(const Tensor<S>&, PoolMode, int, int);                                        \
  template Tensor<S> pool2d_backward(const Shape&, const PoolResult<S>&, PoolMode, int, int, const Tensor<S>&); \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                       \
  template Tensor<S> global_avg_pool_backward(const Shape&, const Tensor<S>&);                                \
  template struct BatchNormParams<S>;                                                                          \
  template Tensor<S> batch_norm(const Tensor<S>&, BatchNormParams<S>&, Mode, BatchNormCache<S>*);             \
  template BatchNormGrads<S> batch_norm_backward(const BatchNormParams<S>&, const BatchNormCache<S>&,         \
                                                 const Tensor<S>&);                                           \
  template Tensor<S> relu(const Tensor<S>&);                                                                  \
  template Tensor<S> relu_backward(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> bilinear_resize(const Tensor<S>&, std::int64_t, std::int64_t);                           \
  template Tensor<S> bilinear_resize_backward(const Shape&, const Tensor<S>&);                                \
  template Tensor<S> concat_channels(std::span<const Tensor<S>* const>);                                      \
  template Tensor<S> concat_channels(const std::vector<Tensor<S>>&);                                          \
  template std::vector<Tensor<S>> split_channels(const Tensor<S>&, std::span<const std::int64_t>);            \
  template DropoutResult<S> dropout(const Tensor<S>&, double, Mode, Rng&);                                    \
  template Tensor<S> dropout_backward(const DropoutResult<S>&, const Tensor<S>&);                             \
  template LossResult<S> weighted_cross_entropy(const Tensor<S>&, const LabelMap&, std::span<const double>,   \
                                                std::int32_t);                                                \
  template void require_finite(const Tensor<S>&, const std::string&);

DSNET_INSTANTIATE_OPS(float)
DSNET_INSTANTIATE_OPS(double)

#undef DSNET_INSTANTIATE_OPS

}  // namespace dsnet
