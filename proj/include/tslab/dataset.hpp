#pragma once

// Synthetic texture-classification images and their on-disk form.
//
// Class m = 2 * hue + texture: a square of one of five hues, either solid or
// checkered with a darker shade, placed on either a flat grey background
// (easy) or a grey background with a periodic texture and pixel noise (hard).

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tslab/tensor.hpp"

namespace tslab {

enum class Split { train, holdout, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct LabeledImage {
  int id = 0;
  int label = 0;
  int difficulty = 0;  // 0 easy, 1 hard
  Tensor<float> image;  // C x H x W in [0, 1]
};

struct DatasetSpec {
  int num_classes = 10;
  int per_class = 200;
  int image_size = 64;
  int channels = 3;
  std::uint64_t seed = 0;
  double hard_fraction = 0.5;

  void validate() const;
};

struct ImageRecord {
  int id = 0;
  std::string file;  // relative to the manifest directory
  int label = 0;
  Split split = Split::train;
  int difficulty = 0;
};

struct DatasetManifest {
  int num_classes = 0;
  int image_size = 0;
  int channels = 0;
  std::uint64_t seed = 0;
  std::vector<ImageRecord> records;
};

// Renders every image in memory. Splits are assigned per class in a seeded
// shuffled order: 70% train, 10% holdout, 20% test.
std::vector<std::pair<LabeledImage, Split>> synthesize(const DatasetSpec& spec);

// Writes images/<id>.tsimg plus manifest.csv under `dir` and returns the manifest.
DatasetManifest gen_dataset(const DatasetSpec& spec, const std::string& dir);

// Reads `dir`/manifest.csv; throws std::runtime_error naming the missing path.
DatasetManifest load_manifest(const std::string& dir);
std::vector<LabeledImage> load_split(const DatasetManifest& manifest, const std::string& dir,
                                     Split split);

// Raw image container, little-endian: "TSIMG001", u32 width, u32 height,
// u32 channels, then channel-major u8 pixels.
void save_image(const std::string& path, const Tensor<float>& image);
Tensor<float> load_image(const std::string& path);

}  // namespace tslab
