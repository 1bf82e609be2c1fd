#pragma once

#include <cstdint>
#include <string>

#include "tsad/feature_store.hpp"
#include "tsad/grid.hpp"
#include "tsad/student.hpp"

namespace tsad {

enum class Fusion { kProduct, kSum, kDeltaJOnly, kDeltaKOnly };

const char* to_string(Fusion f);
Fusion parse_fusion(const std::string& s);

enum class StageOrder {
  kCropThenSmooth,  // upsample -> crop -> smooth (default)
  kSmoothThenCrop,  // upsample -> smooth -> crop
};

struct InferConfig {
  Distance infer_distance = Distance::kL2;
  Fusion fusion = Fusion::kProduct;
  double smoothing_sigma = 4.0;
  double top_fraction = 0.001;
  StageOrder order = StageOrder::kCropThenSmooth;
  bool score_on_smoothed = true;

  void validate() const;
};

struct AnomalyMap {
  std::string sample_id;
  ScoreGrid map;  // orig_h x orig_w
  double global_score = 0;
};

/// Per-patch distance between two grids of identical shape, returned as a
/// grid_h x grid_w grid.
ScoreGrid patch_discrepancies(const FeatureGrid& actual, const FeatureGrid& predicted,
                              Distance distance);

ScoreGrid fuse(const ScoreGrid& delta_j, const ScoreGrid& delta_k, Fusion fusion);

/// Bilinear resize with half-pixel centres: output pixel x samples source
/// coordinate (x + 0.5) * src / dst - 0.5, clamped to the border.
ScoreGrid upsample_bilinear(const ScoreGrid& grid, std::size_t rows, std::size_t cols);

/// Separable Gaussian, radius ceil(4 sigma), symmetric (edge-repeating)
/// reflection at the borders. sigma == 0 returns the input unchanged.
ScoreGrid gaussian_smooth(const ScoreGrid& map, double sigma);

/// Normalised 1-D kernel of length 2 * ceil(4 sigma) + 1.
std::vector<double> gaussian_kernel(double sigma);

ScoreGrid crop_padding(const ScoreGrid& map, const Padding& pad);

/// Number of pixels averaged by global_score: max(1, round-half-up(f * n)).
std::size_t top_count(std::size_t pixels, double top_fraction);

/// Mean of the top_count() largest values.
double global_score(const ScoreGrid& map, double top_fraction);

/// Full inference on one image given its two feature grids.
AnomalyMap infer_grids(const std::string& sample_id, const FeatureGrid& layer_j,
                       const FeatureGrid& layer_k, const StudentPair& model,
                       const InferConfig& config);

/// Loads the sample's features for the model's layer pair and runs
/// infer_grids. Errors carry the sample id.
AnomalyMap infer(const SampleRecord& sample, const StudentPair& model,
                 const InferConfig& config);

}  // namespace tsad
