// Writes the synthetic fixture used by the acceptance suite and the demo.

#include <iostream>

#include <CLI11.hpp>

#include "synthetic.hpp"
#include "tsad/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic patch-embedding dataset"};
  std::string out;
  tsad::synthetic::Config cfg;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--seed", cfg.seed, "Generator seed")->capture_default_str();
  app.add_option("--grid", cfg.grid, "Patches per side")->capture_default_str();
  app.add_option("--dim", cfg.dim, "Embedding dimension")->capture_default_str();
  app.add_option("--patch-size", cfg.patch_size, "Patch size in pixels")->capture_default_str();
  app.add_option("--train", cfg.train_per_category, "Train images per category")->capture_default_str();
  app.add_option("--test-nominal", cfg.test_nominal_per_category)->capture_default_str();
  app.add_option("--test-anomalous", cfg.test_anomalous_per_category)->capture_default_str();
  app.add_option("--categories", cfg.categories, "Category names")->capture_default_str();
  app.add_option("--strength", cfg.anomaly_strength, "Size of the off-manifold push")->capture_default_str();
  app.add_option("--layers", cfg.layers, "Layer indices; the first is the input layer")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  try {
    std::cout << tsad::synthetic::generate(cfg, out).string() << '\n';
  } catch (const tsad::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return tsad::exit_code_for(e.kind());
  }
  return 0;
}
