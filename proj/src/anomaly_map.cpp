#include "tsad/anomaly_map.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "tsad/error.hpp"

namespace tsad {

const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::kProduct:
      return "product";
    case Fusion::kSum:
      return "sum";
    case Fusion::kDeltaJOnly:
      return "delta_j_only";
    case Fusion::kDeltaKOnly:
      return "delta_k_only";
  }
  return "?";
}

Fusion parse_fusion(const std::string& s) {
  if (s == "product") return Fusion::kProduct;
  if (s == "sum") return Fusion::kSum;
  if (s == "delta_j_only") return Fusion::kDeltaJOnly;
  if (s == "delta_k_only") return Fusion::kDeltaKOnly;
  throw UsageError("unknown fusion '" + s +
                   "' (expected product|sum|delta_j_only|delta_k_only)");
}

void InferConfig::validate() const {
  if (!(top_fraction > 0 && top_fraction <= 1)) {
    throw UsageError("top_fraction must lie in (0, 1]");
  }
  if (!(smoothing_sigma >= 0) || !std::isfinite(smoothing_sigma)) {
    throw UsageError("smoothing sigma must be >= 0");
  }
}

ScoreGrid patch_discrepancies(const FeatureGrid& actual, const FeatureGrid& predicted,
                              Distance distance) {
  if (actual.grid_h != predicted.grid_h || actual.grid_w != predicted.grid_w ||
      actual.dim != predicted.dim || actual.data.size() != predicted.data.size()) {
    throw DataError("patch_discrepancies: shape mismatch");
  }
  ScoreGrid out(actual.grid_h, actual.grid_w);
  auto values = out.values();
  for (std::size_t i = 0; i < actual.num_patches(); ++i) {
    values[i] = per_patch_loss<float>(predicted.patch(i), actual.patch(i), distance);
  }
  return out;
}

ScoreGrid fuse(const ScoreGrid& delta_j, const ScoreGrid& delta_k, Fusion fusion) {
  if (!delta_j.same_shape(delta_k)) throw DataError("fuse: shape mismatch");
  switch (fusion) {
    case Fusion::kDeltaJOnly:
      return delta_j;
    case Fusion::kDeltaKOnly:
      return delta_k;
    case Fusion::kProduct:
    case Fusion::kSum:
      break;
  }
  ScoreGrid out(delta_j.rows(), delta_j.cols());
  const auto a = delta_j.values();
  const auto b = delta_k.values();
  auto o = out.values();
  if (fusion == Fusion::kProduct) {
    std::transform(a.begin(), a.end(), b.begin(), o.begin(), std::multiplies<>{});
  } else {
    std::transform(a.begin(), a.end(), b.begin(), o.begin(), std::plus<>{});
  }
  return out;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t src, std::size_t dst) {
  std::vector<Tap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  const double last = static_cast<double>(src - 1);
  for (std::size_t x = 0; x < dst; ++x) {
    const double s = std::clamp((static_cast<double>(x) + 0.5) * scale - 0.5, 0.0, last);
    const auto lo = static_cast<std::size_t>(std::floor(s));
    taps[x] = {lo, std::min(lo + 1, src - 1), s - static_cast<double>(lo)};
  }
  return taps;
}

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  const std::ptrdiff_t period = 2 * n;
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

}  // namespace

ScoreGrid upsample_bilinear(const ScoreGrid& grid, std::size_t rows, std::size_t cols) {
  if (grid.empty()) throw DataError("upsample_bilinear: empty grid");
  const auto ty = bilinear_taps(grid.rows(), rows);
  const auto tx = bilinear_taps(grid.cols(), cols);
  ScoreGrid out(rows, cols);
  for (std::size_t y = 0; y < rows; ++y) {
    const Tap& a = ty[y];
    for (std::size_t x = 0; x < cols; ++x) {
      const Tap& b = tx[x];
      const double top = (1 - b.frac) * grid(a.lo, b.lo) + b.frac * grid(a.lo, b.hi);
      const double bottom = (1 - b.frac) * grid(a.hi, b.lo) + b.frac * grid(a.hi, b.hi);
      out(y, x) = static_cast<float>((1 - a.frac) * top + a.frac * bottom);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

ScoreGrid gaussian_smooth(const ScoreGrid& map, double sigma) {
  if (sigma < 0) throw UsageError("gaussian_smooth: sigma must be >= 0");
  if (sigma == 0 || map.empty()) return map;
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto rows = static_cast<std::ptrdiff_t>(map.rows());
  const auto cols = static_cast<std::ptrdiff_t>(map.cols());

  std::vector<double> tmp(map.size());
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      double acc = 0;
      for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
        acc += kernel[static_cast<std::size_t>(t + radius)] *
               map(static_cast<std::size_t>(r), reflect_index(c + t, cols));
      }
      tmp[static_cast<std::size_t>(r * cols + c)] = acc;
    }
  }
  ScoreGrid out(map.rows(), map.cols());
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      double acc = 0;
      for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
        acc += kernel[static_cast<std::size_t>(t + radius)] *
               tmp[reflect_index(r + t, rows) * static_cast<std::size_t>(cols) +
                   static_cast<std::size_t>(c)];
      }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(acc);
    }
  }
  return out;
}

ScoreGrid crop_padding(const ScoreGrid& map, const Padding& pad) {
  if (std::size_t{pad.top} + pad.bottom >= map.rows() ||
      std::size_t{pad.left} + pad.right >= map.cols()) {
    throw DataError("crop_padding: padding exceeds map size");
  }
  const std::size_t rows = map.rows() - pad.top - pad.bottom;
  const std::size_t cols = map.cols() - pad.left - pad.right;
  ScoreGrid out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = map(r + pad.top, c + pad.left);
  }
  return out;
}

std::size_t top_count(std::size_t pixels, double top_fraction) {
  const double m = std::floor(top_fraction * static_cast<double>(pixels) + 0.5);
  return std::clamp<std::size_t>(static_cast<std::size_t>(m), 1, std::max<std::size_t>(pixels, 1));
}

double global_score(const ScoreGrid& map, double top_fraction) {
  if (map.empty()) throw DataError("global_score: empty map");
  const std::size_t m = top_count(map.size(), top_fraction);
  std::vector<float> v(map.values().begin(), map.values().end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m - 1), v.end(),
                   std::greater<>{});
  // Sorting the selected prefix fixes the summation order.
  std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m), std::greater<>{});
  double sum = 0;
  for (std::size_t i = 0; i < m; ++i) sum += v[i];
  return sum / static_cast<double>(m);
}

namespace {

FeatureGrid predict(const StudentF& net, const FeatureGrid& input, std::uint32_t layer) {
  FeatureGrid out = input;
  out.layer_index = layer;
  const Matrix<float> pred = forward(net, as_matrix(input));
  out.dim = static_cast<std::uint32_t>(pred.cols());
  out.data.assign(pred.data(), pred.data() + pred.size());
  return out;
}

}  // namespace

AnomalyMap infer_grids(const std::string& sample_id, const FeatureGrid& layer_j,
                       const FeatureGrid& layer_k, const StudentPair& model,
                       const InferConfig& config) {
  config.validate();
  if (layer_j.grid_h != layer_k.grid_h || layer_j.grid_w != layer_k.grid_w ||
      layer_j.pad != layer_k.pad || layer_j.patch_size != layer_k.patch_size ||
      layer_j.orig_h != layer_k.orig_h || layer_j.orig_w != layer_k.orig_w) {
    throw DataError(sample_id + ": feature grids of the two layers disagree on geometry");
  }
  // S_F(F_j) approximates F_k, S_B(F_k) approximates F_j.
  const FeatureGrid pred_k = predict(model.forward_net, layer_j, layer_k.layer_index);
  const FeatureGrid pred_j = predict(model.backward_net, layer_k, layer_j.layer_index);
  const ScoreGrid delta_k = patch_discrepancies(layer_k, pred_k, config.infer_distance);
  const ScoreGrid delta_j = patch_discrepancies(layer_j, pred_j, config.infer_distance);
  const ScoreGrid fused = fuse(delta_j, delta_k, config.fusion);

  const ScoreGrid up = upsample_bilinear(fused, layer_j.padded_h(), layer_j.padded_w());
  AnomalyMap result;
  result.sample_id = sample_id;
  ScoreGrid unsmoothed;
  if (config.order == StageOrder::kCropThenSmooth) {
    unsmoothed = crop_padding(up, layer_j.pad);
    result.map = gaussian_smooth(unsmoothed, config.smoothing_sigma);
  } else {
    result.map = crop_padding(gaussian_smooth(up, config.smoothing_sigma), layer_j.pad);
    unsmoothed = crop_padding(up, layer_j.pad);
  }
  result.global_score = global_score(config.score_on_smoothed ? result.map : unsmoothed,
                                     config.top_fraction);
  return result;
}

AnomalyMap infer(const SampleRecord& sample, const StudentPair& model,
                 const InferConfig& config) {
  const LayerPair& pair = model.config.layer_pair;
  for (std::uint32_t layer : {pair.j, pair.k}) {
    if (!sample.feature_paths.contains(layer)) {
      throw DataError(sample.sample_id + ": layer-pair mismatch, model needs layer " +
                      std::to_string(layer) + " features");
    }
  }
  try {
    const FeatureGrid fj = read_feature_grid(sample.feature_paths.at(pair.j));
    const FeatureGrid fk = read_feature_grid(sample.feature_paths.at(pair.k));
    if (fj.dim != model.forward_net.params.d_in() || fk.dim != model.backward_net.params.d_in()) {
      throw DataError("embedding dimensions do not match the model");
    }
    AnomalyMap m = infer_grids(sample.sample_id, fj, fk, model, config);
    if (m.map.rows() != sample.image_dims.h || m.map.cols() != sample.image_dims.w) {
      throw DataError("anomaly map size differs from image_dims");
    }
    return m;
  } catch (const NumericError& e) {
    throw NumericError(sample.sample_id + ": " + e.what());
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw DataError(sample.sample_id + ": " + e.what());
  }
}

}  // namespace tsad
