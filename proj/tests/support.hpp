#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dsnet/executor.hpp"
#include "dsnet/graph.hpp"
#include "dsnet/io.hpp"
#include "dsnet/ops.hpp"
#include "dsnet/params.hpp"
#include "dsnet/rng.hpp"
#include "dsnet/tape.hpp"

namespace dsnet::test {

template <typename S>
Tensor<S> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(lo + (hi - lo) * rng.uniform());
  return t;
}

inline LabelMap random_labels(std::int64_t n, std::int64_t h, std::int64_t w, int classes, Rng& rng,
                              double ignore_fraction = 0.0) {
  LabelMap m(n, h, w);
  for (auto& v : m.data)
    v = rng.uniform() < ignore_fraction ? kIgnoreIndex : static_cast<std::int32_t>(rng.below(classes));
  return m;
}

// Direct-loop convolution used as an oracle.
template <typename S>
Tensor<S> naive_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int s, int p) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::int64_t oh = (xs.h + 2 * p - ws.h) / s + 1, ow = (xs.w + 2 * p - ws.w) / s + 1;
  Tensor<S> y(Shape{xs.n, ws.n, oh, ow});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < ws.n; ++co)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = b.empty() ? 0.0 : static_cast<double>(b[co]);
          for (std::int64_t ci = 0; ci < xs.c; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t yy = i * s - p + ky, xx = j * s - p + kx;
                if (yy < 0 || yy >= xs.h || xx < 0 || xx >= xs.w) continue;
                acc += static_cast<double>(x(n, ci, yy, xx)) * static_cast<double>(w(co, ci, ky, kx));
              }
          y(n, co, i, j) = static_cast<S>(acc);
        }
  return y;
}

// Scatter form of the transposed convolution, weight (Cin, Cout, k, k).
template <typename S>
Tensor<S> naive_transposed_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int s, int p) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::int64_t oh = (xs.h - 1) * s - 2 * p + ws.h, ow = (xs.w - 1) * s - 2 * p + ws.w;
  Tensor<S> y(Shape{xs.n, ws.c, oh, ow});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < ws.c; ++co)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) y(n, co, i, j) = b[co];
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t ci = 0; ci < xs.c; ++ci)
      for (std::int64_t i = 0; i < xs.h; ++i)
        for (std::int64_t j = 0; j < xs.w; ++j)
          for (std::int64_t co = 0; co < ws.c; ++co)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t yy = i * s - p + ky, xx = j * s - p + kx;
                if (yy < 0 || yy >= oh || xx < 0 || xx >= ow) continue;
                y(n, co, yy, xx) += x(n, ci, i, j) * w(ci, co, ky, kx);
              }
  return y;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central finite differences of `loss` against every entry of `target`,
// compared with `analytic`. Returns the worst relative error.
inline double fd_check(TensorD& target, const TensorD& analytic, const std::function<double()>& loss,
                       double h = 1e-5) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < target.size(); ++i) {
    const double saved = target[i];
    target[i] = saved + h;
    const double up = loss();
    target[i] = saved - h;
    const double down = loss();
    target[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * h)));
  }
  return worst;
}

// Gradient check of a whole graph through forward_taped with the probe loss
// sum(probe * output). Covers the input and every learnable tensor.
inline double graph_fd_check(const GraphSpec& graph, ParamStore<double>& params, TensorD input, Mode mode,
                             std::uint64_t dropout_seed, std::uint64_t probe_seed) {
  // Random biases keep ReLU inputs off the kink at exactly zero.
  Rng init(probe_seed + 1);
  params.for_each([&](const std::string&, TensorRole role, TensorD& t) {
    if (role == TensorRole::Bias || role == TensorRole::Beta) t = random_tensor<double>(t.shape(), init, -0.5, 0.5);
    if (role == TensorRole::Gamma) t = random_tensor<double>(t.shape(), init, 0.5, 1.5);
  });
  auto evaluate = [&](bool keep) {
    Rng drop(dropout_seed);
    auto pass = forward_taped(graph, params, input, mode, drop, true);
    Rng pr(probe_seed);
    const TensorD probe = random_tensor<double>(pass->tape.value(pass->output).shape(), pr);
    auto loss = pass->tape.dot(pass->output, probe);
    const double v = pass->tape.value(loss)[0];
    if (keep) pass->tape.backward(loss);
    return std::make_pair(v, keep ? std::move(pass) : nullptr);
  };
  auto [_, pass] = evaluate(true);
  const TensorD input_grad = pass->tape.grad(pass->input);
  const auto grads = pass->param_grads();
  pass.reset();

  auto loss = [&] { return evaluate(false).first; };
  double worst = fd_check(input, input_grad, loss);
  params.for_each([&](const std::string& name, TensorRole role, TensorD& t) {
    if (is_learnable(role)) worst = std::max(worst, fd_check(t, grads.at(name), loss));
  });
  return worst;
}

// 8 synthetic images with colour-coded quadrant classes.
inline std::vector<Sample> synthetic_quadrants(int count, std::int64_t size, std::uint64_t seed) {
  static const float palette[4][3] = {{0.9f, 0.1f, 0.1f}, {0.1f, 0.9f, 0.1f}, {0.1f, 0.1f, 0.9f}, {0.9f, 0.9f, 0.2f}};
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    Sample s{TensorF(Shape{1, 3, size, size}), LabelMap(1, size, size), "s" + std::to_string(i)};
    const std::int64_t cx = rng.uniform_int(size / 4, 3 * size / 4), cy = rng.uniform_int(size / 4, 3 * size / 4);
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const int c = (y < cy ? 0 : 2) + (x < cx ? 0 : 1);
        s.label.at(0, y, x) = c;
        for (int k = 0; k < 3; ++k) s.image(0, k, y, x) = palette[c][k] + 0.05f * static_cast<float>(rng.uniform() - 0.5);
      }
    out.push_back(std::move(s));
  }
  return out;
}

// IoU from explicit pixel sets, excluding classes with an empty union.
inline std::pair<double, double> metric_set_oracle(const LabelMap& pred, const LabelMap& truth, int classes) {
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> p, t;
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
      if (truth.data[i] == kIgnoreIndex) continue;
      if (pred.data[i] == c) p.insert(i);
      if (truth.data[i] == c) t.insert(i);
    }
    std::set<std::size_t> inter, uni;
    std::set_intersection(p.begin(), p.end(), t.begin(), t.end(), std::inserter(inter, inter.begin()));
    std::set_union(p.begin(), p.end(), t.begin(), t.end(), std::inserter(uni, uni.begin()));
    if (uni.empty()) continue;
    sum += static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    ++counted;
  }
  std::size_t valid = 0, correct = 0;
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    if (truth.data[i] == kIgnoreIndex) continue;
    ++valid;
    correct += pred.data[i] == truth.data[i];
  }
  return {sum / counted, static_cast<double>(correct) / static_cast<double>(valid)};
}

inline LayerNode make_node(std::string id, OpKind op, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = std::move(id);
  n.op = op;
  n.inputs = std::move(inputs);
  return n;
}

inline LayerNode conv_node(std::string id, std::string in, std::int64_t cin, std::int64_t cout, int k, int s, int p,
                           OpKind op = OpKind::Conv) {
  LayerNode n = make_node(std::move(id), op, {std::move(in)});
  n.in_channels = cin;
  n.out_channels = cout;
  n.kernel = k;
  n.stride = s;
  n.padding = p;
  return n;
}

inline LayerNode bn_node(std::string id, std::string in, std::int64_t c) {
  LayerNode n = make_node(std::move(id), OpKind::BatchNorm, {std::move(in)});
  n.out_channels = c;
  return n;
}

inline LayerNode input_node(std::string id, std::int64_t c) {
  LayerNode n = make_node(std::move(id), OpKind::Input, {});
  n.out_channels = c;
  return n;
}

}  // namespace dsnet::test
