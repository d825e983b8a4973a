#include "dsnet/executor.hpp"

#include <chrono>

namespace dsnet {

template <typename Scalar>
Tensor<Scalar> forward(const GraphSpec& graph, const ParamStore<Scalar>& params, const Tensor<Scalar>& input,
                       NodeTimings* timings) {
  const auto index = graph.index_map();
  const std::size_t count = graph.nodes.size();
  const std::size_t output_index = index.at(graph.output_id);

  std::vector<std::size_t> last_use(count, 0);
  for (std::size_t i = 0; i < count; ++i)
    for (const auto& in : graph.nodes[i].inputs) last_use[index.at(in)] = i;
  last_use[output_index] = count;

  std::vector<Tensor<Scalar>> values(count);
  if (timings) timings->ms.assign(count, 0.0);

  for (std::size_t i = 0; i < count; ++i) {
    const LayerNode& n = graph.nodes[i];
    const auto start = std::chrono::steady_clock::now();
    auto arg = [&](std::size_t k) -> const Tensor<Scalar>& { return values[index.at(n.inputs[k])]; };
    Tensor<Scalar> out;
    switch (n.op) {
      case OpKind::Input:
        if (input.shape().c != n.out_channels)
          throw Error("input has " + std::to_string(input.shape().c) + " channels, graph expects " +
                      std::to_string(n.out_channels));
        out = input;
        break;
      case OpKind::Conv: {
        const auto& p = params.at(n.id);
        out = conv2d(arg(0), p.weight, p.bias, n.stride, n.padding);
        break;
      }
      case OpKind::TransposedConv: {
        const auto& p = params.at(n.id);
        out = transposed_conv2d(arg(0), p.weight, p.bias, n.stride, n.padding);
        break;
      }
      case OpKind::BatchNorm: {
        auto bn = *params.at(n.id).bn;
        out = batch_norm(arg(0), bn, Mode::Eval);
        break;
      }
      case OpKind::Relu:
        out = relu(arg(0));
        break;
      case OpKind::MaxPool:
      case OpKind::AvgPool:
        out = pool2d(arg(0), n.op == OpKind::MaxPool ? PoolMode::Max : PoolMode::Avg, n.kernel, n.stride).output;
        break;
      case OpKind::GlobalAvgPool:
        out = global_avg_pool(arg(0));
        break;
      case OpKind::Resize:
        if (n.inputs.size() == 2)
          out = bilinear_resize(arg(0), arg(1).shape().h, arg(1).shape().w);
        else
          out = bilinear_resize(arg(0), n.out_h, n.out_w);
        break;
      case OpKind::Concat: {
        std::vector<const Tensor<Scalar>*> ins;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) ins.push_back(&arg(k));
        out = concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(ins));
        break;
      }
      case OpKind::Dropout:
        out = arg(0);
        break;
    }
    require_finite(out, "node '" + n.id + "'");
    values[i] = std::move(out);
    for (const auto& in : n.inputs) {
      const std::size_t j = index.at(in);
      if (last_use[j] == i) values[j] = Tensor<Scalar>();
    }
    if (timings)
      timings->ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  return std::move(values[output_index]);
}

template <typename Scalar>
std::map<std::string, Tensor<Scalar>> TapedForward<Scalar>::param_grads() const {
  std::map<std::string, Tensor<Scalar>> grads;
  for (const auto& [name, var] : params) grads.emplace(name, tape.grad(var));
  return grads;
}

template <typename Scalar>
std::unique_ptr<TapedForward<Scalar>> forward_taped(const GraphSpec& graph, ParamStore<Scalar>& params,
                                                    const Tensor<Scalar>& input, Mode mode, Rng& rng,
                                                    bool input_requires_grad) {
  using Var = typename Tape<Scalar>::Var;
  auto pass = std::make_unique<TapedForward<Scalar>>();
  Tape<Scalar>& tape = pass->tape;
  tape.guard(params.version());

  const auto index = graph.index_map();
  std::vector<Var> vars(graph.nodes.size());
  auto leaf = [&](const std::string& id, TensorRole role, const Tensor<Scalar>& value) {
    Var v = tape.leaf(value, true);
    pass->params.emplace(id + "/" + std::string(to_string(role)), v);
    return v;
  };

  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerNode& n = graph.nodes[i];
    auto arg = [&](std::size_t k) { return vars[index.at(n.inputs[k])]; };
    Var out;
    switch (n.op) {
      case OpKind::Input:
        if (input.shape().c != n.out_channels) throw Error("input channel count does not match the graph");
        out = tape.leaf(input, input_requires_grad);
        pass->input = out;
        break;
      case OpKind::Conv:
      case OpKind::TransposedConv: {
        const auto& p = params.at(n.id);
        Var w = leaf(n.id, TensorRole::Weight, p.weight);
        Var b = leaf(n.id, TensorRole::Bias, p.bias);
        out = n.op == OpKind::Conv ? tape.conv2d(arg(0), w, b, n.stride, n.padding)
                                   : tape.transposed_conv2d(arg(0), w, b, n.stride, n.padding);
        break;
      }
      case OpKind::BatchNorm: {
        auto& bn = *params.at(n.id).bn;
        Var gamma = leaf(n.id, TensorRole::Gamma, bn.gamma);
        Var beta = leaf(n.id, TensorRole::Beta, bn.beta);
        out = tape.batch_norm(arg(0), gamma, beta, bn, mode);
        break;
      }
      case OpKind::Relu:
        out = tape.relu(arg(0));
        break;
      case OpKind::MaxPool:
      case OpKind::AvgPool:
        out = tape.pool2d(arg(0), n.op == OpKind::MaxPool ? PoolMode::Max : PoolMode::Avg, n.kernel, n.stride);
        break;
      case OpKind::GlobalAvgPool:
        out = tape.global_avg_pool(arg(0));
        break;
      case OpKind::Resize:
        if (n.inputs.size() == 2)
          out = tape.bilinear_resize(arg(0), tape.value(arg(1)).shape().h, tape.value(arg(1)).shape().w);
        else
          out = tape.bilinear_resize(arg(0), n.out_h, n.out_w);
        break;
      case OpKind::Concat: {
        std::vector<Var> ins;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) ins.push_back(arg(k));
        out = tape.concat(ins);
        break;
      }
      case OpKind::Dropout:
        out = tape.dropout(arg(0), n.rate, mode, rng);
        break;
    }
    require_finite(tape.value(out), "node '" + n.id + "'");
    vars[i] = out;
  }
  pass->output = vars[index.at(graph.output_id)];
  return pass;
}

template Tensor<float> forward(const GraphSpec&, const ParamStore<float>&, const Tensor<float>&, NodeTimings*);
template Tensor<double> forward(const GraphSpec&, const ParamStore<double>&, const Tensor<double>&, NodeTimings*);
template struct TapedForward<float>;
template struct TapedForward<double>;
template std::unique_ptr<TapedForward<float>> forward_taped(const GraphSpec&, ParamStore<float>&, const Tensor<float>&,
                                                            Mode, Rng&, bool);
template std::unique_ptr<TapedForward<double>> forward_taped(const GraphSpec&, ParamStore<double>&,
                                                             const Tensor<double>&, Mode, Rng&, bool);

}  // namespace dsnet
