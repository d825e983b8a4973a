#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsnet/tensor.hpp"

namespace dsnet {

/// One training/evaluation pair. The image is (1, 3, H, W) in [0, 1];
/// the label is (1, H, W).
struct Sample {
  TensorF image;
  LabelMap label;
  std::string id;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::string split;
  struct Entry {
    std::string stem;
    std::filesystem::path image;
    std::filesystem::path label;
  };
  std::vector<Entry> entries;  // sorted by stem
  int num_classes = 0;
  std::int32_t ignore_index = kIgnoreIndex;
  std::vector<std::string> class_names;  // from classes.json when present
};

/// Binary PPM (P6, maxval 255) -> (1, 3, H, W) with values / 255, R,G,B order.
TensorF read_image(const std::filesystem::path& path);
TensorF decode_ppm(std::istream& in, const std::string& what = "image");

/// Binary PGM (P5, maxval 255) of class ids; values outside
/// [0, num_classes) other than ignore_index are rejected.
LabelMap read_label(const std::filesystem::path& path, int num_classes, std::int32_t ignore_index = kIgnoreIndex);
LabelMap decode_pgm(std::istream& in, int num_classes, std::int32_t ignore_index, const std::string& what = "label");

/// Writes sample 0 of `image`, clamping to [0, 1] and rounding to 8 bits.
void write_image(const std::filesystem::path& path, const TensorF& image);
void encode_ppm(std::ostream& out, const TensorF& image);

/// Writes batch entry 0 of `labels`; values must fit in a byte.
void write_label(const std::filesystem::path& path, const LabelMap& labels);
void encode_pgm(std::ostream& out, const LabelMap& labels);

/// Image resized bilinearly, label by nearest neighbour (half-pixel centres,
/// src = floor((dst + 0.5) * in / out)), so class ids never blend.
Sample resize_pair(const Sample& sample, std::int64_t target_h, std::int64_t target_w);

/// Nearest-neighbour resize of every map in the batch.
LabelMap resize_labels_nearest(const LabelMap& labels, std::int64_t target_h, std::int64_t target_w);

/// Layout: root/images/<split>/*.ppm and root/labels/<split>/*.pgm matched
/// by file stem, plus an optional root/classes.json
/// {"names": [...], "ignore_index": 255}.
DatasetIndex scan_dataset(const std::filesystem::path& root, const std::string& split, int num_classes);

std::vector<Sample> load_samples(const DatasetIndex& index);

}  // namespace dsnet
