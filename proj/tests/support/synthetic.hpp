#pragma once

// Deterministic toy "Teacher" features for tests and demos. Nominal F_j
// tokens live on a low-dimensional smooth manifold with constant norm, F_k is
// a fixed nonlinear map of F_j (also norm-fixed), and anomalies push F_j off
// the manifold inside disk-shaped regions. Each layer also carries a few
// blobs of layer-specific nominal nuisance.

#include <cstdint>
#include <string>
#include <vector>

#include "tsad/feature_store.hpp"

namespace tsad::synthetic {

struct Config {
  std::uint32_t grid = 16;
  std::uint32_t dim = 32;
  std::uint32_t patch_size = 8;
  std::uint32_t pad = 1;  // on every side, in pixels
  std::uint32_t latent_dim = 4;
  std::vector<std::string> categories = {"widget"};
  std::uint32_t train_per_category = 40;
  std::uint32_t test_nominal_per_category = 20;
  std::uint32_t test_anomalous_per_category = 20;
  std::vector<std::uint32_t> layers = {8, 12};  // first is the input layer
  double anomaly_strength = 6.0;
  // Smooth per-layer structure that the other layer cannot predict; drawn
  // independently for every layer of every image, nominal ones included.
  double nuisance_strength = 3.0;
  std::uint32_t nuisance_blobs = 2;
  double min_radius = 3.0;   // pixels
  double max_radius = 22.0;  // pixels
  std::uint64_t seed = 7;
};

/// Writes features/, masks/ and manifest.json under `root`; returns the
/// manifest path.
fs::path generate(const Config& config, const fs::path& root);

}  // namespace tsad::synthetic
