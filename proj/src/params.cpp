#include "dsnet/params.hpp"

#include <array>
#include <cmath>

namespace dsnet {

namespace {

constexpr std::array<std::pair<TensorRole, std::string_view>, 6> kRoleNames{{
    {TensorRole::Weight, "weight"},
    {TensorRole::Bias, "bias"},
    {TensorRole::Gamma, "gamma"},
    {TensorRole::Beta, "beta"},
    {TensorRole::RunningMean, "running_mean"},
    {TensorRole::RunningVar, "running_var"},
}};

template <typename Scalar, typename Node, typename Fn>
void visit_node(const std::string& id, Node& p, Fn&& fn) {
  auto name = [&](TensorRole r) { return id + "/" + std::string(to_string(r)); };
  if (!p.weight.empty()) fn(name(TensorRole::Weight), TensorRole::Weight, p.weight);
  if (!p.bias.empty()) fn(name(TensorRole::Bias), TensorRole::Bias, p.bias);
  if (p.bn) {
    fn(name(TensorRole::Gamma), TensorRole::Gamma, p.bn->gamma);
    fn(name(TensorRole::Beta), TensorRole::Beta, p.bn->beta);
    fn(name(TensorRole::RunningMean), TensorRole::RunningMean, p.bn->running_mean);
    fn(name(TensorRole::RunningVar), TensorRole::RunningVar, p.bn->running_var);
  }
}

template <typename Scalar, typename Store>
auto& find_tensor(Store& store, const std::string& name) {
  const auto slash = name.rfind('/');
  if (slash == std::string::npos) throw Error("malformed tensor name '" + name + "'");
  auto& p = store.at(name.substr(0, slash));
  switch (tensor_role_from_string(name.substr(slash + 1))) {
    case TensorRole::Weight:
      return p.weight;
    case TensorRole::Bias:
      return p.bias;
    default:
      break;
  }
  if (!p.bn) throw Error("node of tensor '" + name + "' has no batch norm parameters");
  switch (tensor_role_from_string(name.substr(slash + 1))) {
    case TensorRole::Gamma:
      return p.bn->gamma;
    case TensorRole::Beta:
      return p.bn->beta;
    case TensorRole::RunningMean:
      return p.bn->running_mean;
    default:
      return p.bn->running_var;
  }
}

}  // namespace

std::string_view to_string(TensorRole role) {
  for (const auto& [r, n] : kRoleNames)
    if (r == role) return n;
  return "unknown";
}

TensorRole tensor_role_from_string(std::string_view s) {
  for (const auto& [r, n] : kRoleNames)
    if (n == s) return r;
  throw Error("unknown tensor role '" + std::string(s) + "'");
}

template <typename Scalar>
NodeParams<Scalar>& ParamStore<Scalar>::at(const std::string& id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw Error("no parameters for node '" + id + "'");
  return it->second;
}

template <typename Scalar>
const NodeParams<Scalar>& ParamStore<Scalar>::at(const std::string& id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw Error("no parameters for node '" + id + "'");
  return it->second;
}

template <typename Scalar>
void ParamStore<Scalar>::for_each(const Visitor& fn) {
  for (auto& [id, p] : nodes_) visit_node<Scalar>(id, p, fn);
}

template <typename Scalar>
void ParamStore<Scalar>::for_each(const ConstVisitor& fn) const {
  for (const auto& [id, p] : nodes_) visit_node<Scalar>(id, p, fn);
}

template <typename Scalar>
Tensor<Scalar>& ParamStore<Scalar>::tensor(const std::string& name) {
  return find_tensor<Scalar>(*this, name);
}

template <typename Scalar>
const Tensor<Scalar>& ParamStore<Scalar>::tensor(const std::string& name) const {
  return find_tensor<Scalar>(*this, name);
}

template <typename Scalar>
std::int64_t ParamStore<Scalar>::total_count() const {
  std::int64_t total = 0;
  for_each([&](const std::string&, TensorRole, const Tensor<Scalar>& t) { total += t.size(); });
  return total;
}

template <typename Scalar>
template <typename Other>
ParamStore<Other> ParamStore<Scalar>::cast() const {
  ParamStore<Other> out;
  for (const auto& [id, p] : nodes_) {
    NodeParams<Other> q;
    q.weight = p.weight.template cast<Other>();
    q.bias = p.bias.template cast<Other>();
    if (p.bn)
      q.bn = BatchNormParams<Other>{p.bn->gamma.template cast<Other>(), p.bn->beta.template cast<Other>(),
                                    p.bn->running_mean.template cast<Other>(),
                                    p.bn->running_var.template cast<Other>(), p.bn->eps, p.bn->momentum};
    out.insert(id, std::move(q));
  }
  return out;
}

ParamShapes expected_param_shapes(const LayerNode& n) {
  switch (n.op) {
    case OpKind::Conv:
      return {{n.out_channels, n.in_channels, n.kernel, n.kernel}, {n.out_channels, 1, 1, 1}, 0};
    case OpKind::TransposedConv:
      return {{n.in_channels, n.out_channels, n.kernel, n.kernel}, {n.out_channels, 1, 1, 1}, 0};
    case OpKind::BatchNorm:
      return {{}, {}, n.out_channels};
    default:
      throw Error("node '" + n.id + "' carries no parameters");
  }
}

template <typename Scalar>
void check_params(const GraphSpec& graph, const ParamStore<Scalar>& params) {
  std::size_t expected = 0;
  for (const auto& n : graph.nodes) {
    if (!n.has_params()) continue;
    ++expected;
    if (!params.contains(n.id)) throw Error("parameters missing for node '" + n.id + "'");
    const auto& p = params.at(n.id);
    const ParamShapes s = expected_param_shapes(n);
    if (n.op == OpKind::BatchNorm) {
      if (!p.bn) throw Error("node '" + n.id + "' lacks batch norm parameters");
      p.bn->validate();
      if (p.bn->channels() != s.bn_channels) throw Error("batch norm width mismatch at '" + n.id + "'");
      if (!p.weight.empty() || !p.bias.empty()) throw Error("unexpected weights on batch norm '" + n.id + "'");
    } else {
      if (!(p.weight.shape() == s.weight))
        throw Error("weight shape " + p.weight.shape().str() + " at '" + n.id + "', expected " + s.weight.str());
      if (!(p.bias.shape() == s.bias)) throw Error("bias shape mismatch at '" + n.id + "'");
      if (p.bn) throw Error("unexpected batch norm parameters on '" + n.id + "'");
    }
  }
  if (params.node_count() != expected) throw Error("parameter store has entries for nodes absent from the graph");
}

template <typename Scalar>
ParamStore<Scalar> init_params(const GraphSpec& graph, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<Scalar> store;
  for (const auto& n : graph.nodes) {
    if (!n.has_params()) continue;
    const ParamShapes s = expected_param_shapes(n);
    NodeParams<Scalar> p;
    if (n.op == OpKind::BatchNorm) {
      p.bn = BatchNormParams<Scalar>::identity(s.bn_channels, n.eps, n.momentum);
    } else {
      double fan_in = static_cast<double>(n.in_channels) * n.kernel * n.kernel;
      if (n.op == OpKind::TransposedConv) fan_in /= static_cast<double>(n.stride) * n.stride;
      const double std_dev = std::sqrt(2.0 / std::max(fan_in, 1.0));
      p.weight = Tensor<Scalar>(s.weight);
      for (std::int64_t i = 0; i < p.weight.size(); ++i) p.weight[i] = static_cast<Scalar>(std_dev * rng.normal());
      p.bias = Tensor<Scalar>(s.bias);
    }
    store.insert(n.id, std::move(p));
  }
  return store;
}

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<double> ParamStore<float>::cast<double>() const;
template ParamStore<float> ParamStore<double>::cast<float>() const;
template ParamStore<float> ParamStore<float>::cast<float>() const;
template void check_params(const GraphSpec&, const ParamStore<float>&);
template void check_params(const GraphSpec&, const ParamStore<double>&);
template ParamStore<float> init_params(const GraphSpec&, std::uint64_t);
template ParamStore<double> init_params(const GraphSpec&, std::uint64_t);

}  // namespace dsnet
