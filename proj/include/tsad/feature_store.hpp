#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsad/grid.hpp"

namespace tsad {

namespace fs = std::filesystem;

struct Padding {
  std::uint32_t top = 0;
  std::uint32_t left = 0;
  std::uint32_t bottom = 0;
  std::uint32_t right = 0;

  friend bool operator==(const Padding&, const Padding&) = default;
};

/// Patch embeddings of one image at one Transformer layer.
///
/// `data` is row-major [grid_h][grid_w][dim]; patch index i = r * grid_w + c
/// follows the raster order of the backbone's patch tokens.
struct FeatureGrid {
  std::uint32_t layer_index = 0;
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t dim = 0;
  std::uint32_t patch_size = 1;
  std::uint32_t orig_h = 0;
  std::uint32_t orig_w = 0;
  Padding pad;
  std::vector<float> data;

  std::size_t num_patches() const noexcept {
    return std::size_t{grid_h} * grid_w;
  }
  std::uint32_t padded_h() const noexcept { return orig_h + pad.top + pad.bottom; }
  std::uint32_t padded_w() const noexcept { return orig_w + pad.left + pad.right; }

  std::span<const float> patch(std::size_t i) const {
    return std::span<const float>(data).subspan(i * dim, dim);
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

/// Throws FormatError("invalid geometry" | "non-finite values" | ...) when a
/// FeatureGrid invariant is broken.
void validate_feature_grid(const FeatureGrid& grid);

inline constexpr char kFeatureMagic[4] = {'P', 'E', 'F', 'G'};
inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 52;

void write_feature_grid(const FeatureGrid& grid, const fs::path& path);
FeatureGrid read_feature_grid(const fs::path& path);
/// Header only; payload untouched.
FeatureGrid read_feature_header(const fs::path& path);

/// Single-channel score map stored as a PEFG file with dim = 1, patch_size = 1.
void write_score_map(const ScoreGrid& map, const fs::path& path);
ScoreGrid read_score_map(const fs::path& path);

enum class Split { kTrain, kTest };
enum class Label { kNominal, kAnomalous };

const char* to_string(Split split);
const char* to_string(Label label);

struct ImageDims {
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

struct SampleRecord {
  std::string sample_id;
  std::string category;
  Split split = Split::kTrain;
  Label label = Label::kNominal;
  std::map<std::uint32_t, fs::path> feature_paths;  // layer index -> file
  std::optional<fs::path> mask_path;
  ImageDims image_dims;
};

struct LayerPair {
  std::uint32_t j = 8;
  std::uint32_t k = 12;
  friend bool operator==(const LayerPair&, const LayerPair&) = default;
};

struct Manifest {
  std::string dataset_name;
  LayerPair layer_pair;
  std::vector<SampleRecord> samples;

  std::vector<const SampleRecord*> select(Split split) const;
  std::vector<std::string> categories() const;  // sorted, unique
};

/// Parses and eagerly validates a JSON manifest. Relative paths are resolved
/// against the manifest's directory. All violations are collected and
/// reported together in one DataError.
Manifest load_manifest(const fs::path& path);

/// Writes `manifest` as JSON; paths are stored relative to the manifest's
/// directory when they live below it.
void save_manifest(const Manifest& manifest, const fs::path& path);

/// Reads an 8-bit grayscale PNG; pixel is anomalous iff its value > 0.
Mask read_mask(const fs::path& path, ImageDims expected);
ImageDims read_mask_dims(const fs::path& path);
/// Writes 0 / 255 grayscale.
void write_mask(const Mask& mask, const fs::path& path);

/// Keeps every test sample and exactly `shots` uniformly chosen train samples
/// per category. Deterministic in `seed`.
Manifest sample_fewshot(const Manifest& manifest, std::uint32_t shots,
                        std::uint64_t seed);

}  // namespace tsad
