#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsad/feature_store.hpp"
#include "tsad/grid.hpp"

namespace tsad {

struct ScoredLabel {
  double score = 0;
  bool anomalous = false;
};

/// Mann-Whitney AUROC; ties between a nominal and an anomalous score count
/// one half. Throws DataError unless both classes are present.
double auroc(std::span<const ScoredLabel> samples);

/// Pixel-level AUROC over all pixels of all images. Images with an empty mask
/// (0x0) are treated as fully nominal.
double p_auroc(std::span<const ScoreGrid> maps, std::span<const Mask> masks);

/// One 8-connected ground-truth component.
struct Region {
  std::size_t image = 0;       // index of the image the region belongs to
  std::size_t component_id = 0;
  std::vector<std::uint32_t> pixels;  // flat row-major indices
  std::size_t size() const noexcept { return pixels.size(); }
};

/// Maximal 8-connected regions, labelled in raster order of their first pixel.
std::vector<Region> connected_components(const Mask& mask, std::size_t image = 0);

struct CurvePoint {
  double fpr = 0;
  double pro = 0;
};

struct ProCurve {
  std::vector<CurvePoint> points;  // fpr non-decreasing
  double limit = 0.3;
  double aupro = 0;
};

/// Normalised area under a monotone (fpr, pro) polyline on [0, limit], with
/// linear interpolation at the limit.
double integrate_to_limit(std::span<const CurvePoint> points, double limit);

/// Threshold sweep for PRO curves over a fixed set of maps and masks.
///
/// The false-positive population is every non-anomalous pixel of every image,
/// nominal images included. Thresholds are negative-pixel quantiles at
/// `levels` evenly spaced FPR targets in (0, limit], each also probed just
/// above its value, plus the quantiles bracketing the limit itself.
class ProEvaluator {
 public:
  ProEvaluator(std::span<const ScoreGrid> maps, std::span<const Mask> masks);

  /// Regions larger than `max_region_size` are left out of the PRO mean; the
  /// FPR population does not change.
  ProCurve curve(double limit, std::optional<double> max_region_size = std::nullopt,
                 std::size_t levels = 500) const;

  const std::vector<Region>& regions() const noexcept { return regions_; }
  std::vector<std::size_t> region_sizes() const;
  std::size_t negative_count() const noexcept { return negatives_.size(); }

 private:
  struct RegionScores {
    std::vector<float> desc;  // scores sorted descending
  };
  std::vector<float> negatives_;  // sorted descending
  std::vector<Region> regions_;
  std::vector<RegionScores> region_scores_;
};

inline ProCurve pro_curve(std::span<const ScoreGrid> maps, std::span<const Mask> masks,
                          double limit,
                          std::optional<double> max_region_size = std::nullopt) {
  return ProEvaluator(maps, masks).curve(limit, max_region_size);
}

/// Linear-interpolation percentile of a sample, p in [0, 100].
double percentile(std::vector<double> values, double p);

/// Cumulative quartile size thresholds Q1..Q4 (25/50/75/100th percentiles).
std::array<double, 4> quartile_thresholds(std::span<const std::size_t> region_sizes);

struct Robustness {
  double w = 0;
  double s = 0;
  double rho = 0;
};

/// rho = w * (1 - s), w = mean AUPRO over quartile sets,
/// s = |AUPRO(Q4) - AUPRO(Q1)| / max(AUPRO(Q1), AUPRO(Q4)) (0 if that max is 0).
Robustness robustness(const std::array<double, 4>& aupro_q);

struct LimitReport {
  double limit = 0.3;
  double aupro = 0;
  std::array<double, 4> aupro_q{};
  Robustness robust;
  ProCurve curve;  // unfiltered
};

struct CategoryReport {
  std::string category;
  std::size_t test_samples = 0;
  std::size_t anomalous_samples = 0;
  std::size_t regions = 0;
  double i_auroc = 0;
  double p_auroc = 0;
  std::array<double, 4> quartiles{};  // region-size thresholds in pixels
  std::vector<LimitReport> limits;
};

struct EvaluationReport {
  std::vector<double> limits;
  std::vector<CategoryReport> categories;
  CategoryReport mean;  // unweighted mean over categories
};

struct EvaluationInput {
  std::map<std::string, ScoreGrid> maps;    // sample_id -> map at GT resolution
  std::map<std::string, double> scores;     // sample_id -> global score
};

/// Runs the full protocol on the manifest's test split, per category.
EvaluationReport evaluate(const Manifest& manifest, const EvaluationInput& input,
                          std::span<const double> limits, unsigned threads = 1);

/// Tab-separated report, one row per category plus a final "mean" row.
std::string format_report_tsv(const EvaluationReport& report);
/// Aligned plain-text table for terminals.
std::string format_report_table(const EvaluationReport& report);
/// Reads back a TSV produced by format_report_tsv (values only, no curves).
EvaluationReport parse_report_tsv(const std::string& text);

}  // namespace tsad
