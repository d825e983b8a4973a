#include "dsnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dsnet {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void store_le(std::uint8_t* dst, T value) {
  std::memcpy(dst, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(dst, dst + sizeof(T));
}

template <typename T>
T load_le(const std::uint8_t* src) {
  std::uint8_t tmp[sizeof(T)];
  std::memcpy(tmp, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
  T value;
  std::memcpy(&value, tmp, sizeof(T));
  return value;
}

std::size_t align_up(std::size_t v) { return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment; }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  using nlohmann::json;
  check_params(ckpt.graph, ckpt.params);

  json directory = json::array();
  std::size_t offset = 0;
  ckpt.params.for_each([&](const std::string& name, TensorRole, const TensorF& t) {
    const Shape& s = t.shape();
    const std::size_t length = static_cast<std::size_t>(t.size()) * sizeof(float);
    directory.push_back({{"name", name},
                         {"shape", {s.n, s.c, s.h, s.w}},
                         {"dtype", "f32"},
                         {"byte_offset", offset},
                         {"byte_length", length}});
    offset = align_up(offset + length);
  });
  const std::size_t payload_size = offset;

  const json header{{"format_version", kCheckpointVersion},
                    {"network_config", config_to_json(ckpt.config)},
                    {"graph", graph_to_json(ckpt.graph)},
                    {"tensors", std::move(directory)},
                    {"meta", ckpt.meta}};
  std::string text = header.dump();
  text.append(align_up(8 + text.size()) - 8 - text.size(), ' ');

  std::vector<std::uint8_t> bytes(8 + text.size() + payload_size, 0);
  std::memcpy(bytes.data(), kCheckpointMagic, 4);
  store_le<std::uint32_t>(bytes.data() + 4, static_cast<std::uint32_t>(text.size()));
  std::memcpy(bytes.data() + 8, text.data(), text.size());
  std::uint8_t* payload = bytes.data() + 8 + text.size();
  std::size_t i = 0;
  ckpt.params.for_each([&](const std::string&, TensorRole, const TensorF& t) {
    std::uint8_t* dst = payload + header["tensors"][i++]["byte_offset"].get<std::size_t>();
    for (std::int64_t k = 0; k < t.size(); ++k) store_le<float>(dst + k * sizeof(float), t[k]);
  });
  return bytes;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using nlohmann::json;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw Error("bad magic");
  const std::uint32_t header_len = load_le<std::uint32_t>(bytes.data() + 4);
  if (8 + static_cast<std::size_t>(header_len) > bytes.size()) throw Error("checkpoint header exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw Error("checkpoint version mismatch: file has " + std::to_string(version) + ", reader supports " +
                  std::to_string(kCheckpointVersion));
    ckpt.config = config_from_json(header.at("network_config"));
    ckpt.graph = graph_from_json(header.at("graph"));
    ckpt.meta = header.value("meta", json::object());

    const std::size_t payload_start = 8 + header_len;
    const std::size_t payload_size = bytes.size() - payload_start;
    const std::uint8_t* payload = bytes.data() + payload_start;

    // Build an empty store shaped by the graph, then fill it from the directory.
    for (const auto& n : ckpt.graph.nodes) {
      if (!n.has_params()) continue;
      NodeParams<float> p;
      if (n.op == OpKind::BatchNorm) {
        BatchNormParams<float> bn = BatchNormParams<float>::identity(n.out_channels, n.eps, n.momentum);
        p.bn = std::move(bn);
      } else {
        const ParamShapes s = expected_param_shapes(n);
        p.weight = TensorF(s.weight);
        p.bias = TensorF(s.bias);
      }
      ckpt.params.insert(n.id, std::move(p));
    }

    std::size_t expected_tensors = 0;
    ckpt.params.for_each([&](const std::string&, TensorRole, const TensorF&) { ++expected_tensors; });
    const auto& directory = header.at("tensors");
    if (directory.size() != expected_tensors)
      throw Error("tensor directory lists " + std::to_string(directory.size()) + " tensors, graph needs " +
                  std::to_string(expected_tensors));

    std::size_t prev_end = 0;
    for (const auto& entry : directory) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = entry.at("dtype").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto off = entry.at("byte_offset").get<std::size_t>();
      const auto len = entry.at("byte_length").get<std::size_t>();
      if (shape.size() != 4) throw Error("tensor '" + name + "' shape must have four extents");
      const Shape s{shape[0], shape[1], shape[2], shape[3]};
      TensorF& dst = ckpt.params.tensor(name);
      if (!(dst.shape() == s))
        throw Error("shape mismatch for '" + name + "': file " + s.str() + ", graph " + dst.shape().str());
      const std::size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
      if (elem == 0) throw Error("tensor '" + name + "' has unsupported dtype '" + dtype + "'");
      if (len != static_cast<std::size_t>(s.numel()) * elem) throw Error("byte_length of '" + name + "' disagrees with its shape");
      if (off % kPayloadAlignment != 0) throw Error("tensor '" + name + "' is not 64-byte aligned");
      if (off < prev_end || off + len > payload_size) throw Error("tensor '" + name + "' lies outside the payload");
      prev_end = off + len;
      for (std::int64_t k = 0; k < s.numel(); ++k)
        dst[k] = elem == 4 ? load_le<float>(payload + off + k * 4)
                           : static_cast<float>(load_le<double>(payload + off + k * 8));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
  check_params(ckpt.graph, ckpt.params);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace dsnet
