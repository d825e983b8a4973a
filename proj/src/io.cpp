#include "dsnet/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "dsnet/ops.hpp"

namespace dsnet {

namespace {

struct PnmHeader {
  std::string magic;
  std::int64_t width = 0;
  std::int64_t height = 0;
  int maxval = 0;
};

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

PnmHeader read_header(std::istream& in, const std::string& expected, const std::string& what) {
  PnmHeader h;
  h.magic = next_token(in);
  if (h.magic != expected) throw Error(what + ": unsupported format '" + h.magic + "' (expected " + expected + ")");
  try {
    h.width = std::stoll(next_token(in));
    h.height = std::stoll(next_token(in));
    h.maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw Error(what + ": malformed header");
  }
  // next_token consumed exactly one whitespace byte after maxval.
  if (h.width < 1 || h.height < 1) throw Error(what + ": malformed header (non-positive size)");
  if (h.maxval != 255) throw Error(what + ": unsupported maxval " + std::to_string(h.maxval));
  return h;
}

std::vector<unsigned char> read_payload(std::istream& in, std::size_t bytes, const std::string& what) {
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) throw Error(what + ": truncated payload");
  return buf;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

TensorF decode_ppm(std::istream& in, const std::string& what) {
  const PnmHeader h = read_header(in, "P6", what);
  const auto buf = read_payload(in, static_cast<std::size_t>(h.width * h.height * 3), what);
  TensorF image(Shape{1, 3, h.height, h.width});
  const std::int64_t plane = h.width * h.height;
  for (std::int64_t i = 0; i < plane; ++i)
    for (std::int64_t c = 0; c < 3; ++c) image[c * plane + i] = static_cast<float>(buf[i * 3 + c]) / 255.0f;
  return image;
}

TensorF read_image(const std::filesystem::path& path) {
  auto in = open_in(path);
  return decode_ppm(in, path.string());
}

LabelMap decode_pgm(std::istream& in, int num_classes, std::int32_t ignore_index, const std::string& what) {
  const PnmHeader h = read_header(in, "P5", what);
  const auto buf = read_payload(in, static_cast<std::size_t>(h.width * h.height), what);
  LabelMap labels(1, h.height, h.width);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const std::int32_t v = buf[i];
    if (v != ignore_index && (v < 0 || v >= num_classes))
      throw Error(what + ": label value " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) +
                  ") and not the ignore index " + std::to_string(ignore_index));
    labels.data[i] = v;
  }
  return labels;
}

LabelMap read_label(const std::filesystem::path& path, int num_classes, std::int32_t ignore_index) {
  auto in = open_in(path);
  return decode_pgm(in, num_classes, ignore_index, path.string());
}

void encode_ppm(std::ostream& out, const TensorF& image) {
  const Shape& s = image.shape();
  if (s.c != 3) throw Error("PPM output needs 3 channels, got " + s.str());
  out << "P6\n" << s.w << " " << s.h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(s.plane() * 3));
  for (std::int64_t i = 0; i < s.plane(); ++i)
    for (std::int64_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * s.plane() + i], 0.0f, 1.0f);
      buf[static_cast<std::size_t>(i * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_image(const std::filesystem::path& path, const TensorF& image) {
  auto out = open_out(path);
  encode_ppm(out, image);
}

void encode_pgm(std::ostream& out, const LabelMap& labels) {
  out << "P5\n" << labels.w << " " << labels.h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(labels.h * labels.w));
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const std::int32_t v = labels.data[i];
    if (v < 0 || v > 255) throw Error("label value " + std::to_string(v) + " does not fit in a PGM byte");
    buf[i] = static_cast<unsigned char>(v);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_label(const std::filesystem::path& path, const LabelMap& labels) {
  auto out = open_out(path);
  encode_pgm(out, labels);
}

LabelMap resize_labels_nearest(const LabelMap& labels, std::int64_t target_h, std::int64_t target_w) {
  if (target_h < 1 || target_w < 1) throw Error("resize target must be at least 1x1");
  if (labels.h == target_h && labels.w == target_w) return labels;
  auto src_index = [](std::int64_t dst, std::int64_t in, std::int64_t out) {
    const auto v = static_cast<std::int64_t>(std::floor((static_cast<double>(dst) + 0.5) * in / out));
    return std::min(v, in - 1);
  };
  LabelMap out(labels.n, target_h, target_w);
  for (std::int64_t b = 0; b < labels.n; ++b)
    for (std::int64_t y = 0; y < target_h; ++y) {
      const std::int64_t sy = src_index(y, labels.h, target_h);
      for (std::int64_t x = 0; x < target_w; ++x) out.at(b, y, x) = labels.at(b, sy, src_index(x, labels.w, target_w));
    }
  return out;
}

Sample resize_pair(const Sample& sample, std::int64_t target_h, std::int64_t target_w) {
  if (target_h < 1 || target_w < 1) throw Error("resize target must be at least 1x1");
  return {bilinear_resize(sample.image, target_h, target_w), resize_labels_nearest(sample.label, target_h, target_w),
          sample.id};
}

DatasetIndex scan_dataset(const std::filesystem::path& root, const std::string& split, int num_classes) {
  namespace fs = std::filesystem;
  DatasetIndex index;
  index.root = root;
  index.split = split;
  index.num_classes = num_classes;

  const fs::path sidecar = root / "classes.json";
  if (fs::exists(sidecar)) {
    std::ifstream in(sidecar);
    try {
      const auto j = nlohmann::json::parse(in);
      index.ignore_index = j.value("ignore_index", kIgnoreIndex);
      index.class_names = j.value("names", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
      throw Error("classes.json: " + std::string(e.what()));
    }
  }

  auto collect = [&](const fs::path& dir, const std::string& ext) {
    std::map<std::string, fs::path> files;
    if (!fs::is_directory(dir)) return files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ext) files.emplace(e.path().stem().string(), e.path());
    return files;
  };
  const auto images = collect(root / "images" / split, ".ppm");
  const auto labels = collect(root / "labels" / split, ".pgm");
  if (images.empty() && labels.empty()) throw Error("empty split '" + split + "' under " + root.string());
  for (const auto& [stem, path] : images) {
    auto it = labels.find(stem);
    if (it == labels.end()) throw Error("image '" + stem + "' has no matching label");
    index.entries.push_back({stem, path, it->second});
  }
  for (const auto& [stem, path] : labels)
    if (!images.count(stem)) throw Error("label '" + stem + "' has no matching image");
  return index;
}

std::vector<Sample> load_samples(const DatasetIndex& index) {
  std::vector<Sample> samples;
  samples.reserve(index.entries.size());
  for (const auto& e : index.entries) {
    Sample s{read_image(e.image), read_label(e.label, index.num_classes, index.ignore_index), e.stem};
    if (s.label.h != s.image.shape().h || s.label.w != s.image.shape().w)
      throw Error("image and label sizes differ for '" + e.stem + "'");
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace dsnet
