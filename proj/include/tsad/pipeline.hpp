#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tsad/anomaly_map.hpp"
#include "tsad/feature_store.hpp"
#include "tsad/metrics.hpp"
#include "tsad/student.hpp"

namespace tsad {

/// File name used for a sample's persisted map ('/' and other separators
/// replaced so ids stay flat).
std::string map_file_name(const std::string& sample_id);

struct ScoreRow {
  std::string sample_id;
  double global_score = 0;
  Label label = Label::kNominal;
};

/// Tab-separated: header "sample_id\tglobal_score\tlabel", one row per sample.
void write_scores(const std::vector<ScoreRow>& rows, const fs::path& path);
std::vector<ScoreRow> read_scores(const fs::path& path);

struct InferSummary {
  std::size_t samples = 0;
  double mean_ms = 0;  // per sample, features in memory -> map computed
};

/// Runs inference on every test sample, writing <out>/maps/<id>.pefg and
/// <out>/scores.tsv. Output is independent of `threads`.
InferSummary run_inference(const Manifest& manifest, const StudentPair& model,
                           const InferConfig& config, const fs::path& out_dir,
                           unsigned threads = 1);

/// In-memory variant used by ablations and tests.
std::vector<AnomalyMap> infer_all(const Manifest& manifest, const StudentPair& model,
                                  const InferConfig& config, unsigned threads = 1,
                                  double* mean_ms = nullptr);

EvaluationInput to_evaluation_input(std::vector<AnomalyMap> maps);

/// Reads maps and scores written by run_inference.
EvaluationInput load_evaluation_input(const Manifest& manifest, const fs::path& infer_dir);

/// Writes report.tsv, report.txt and curves/<category>@<limit>.tsv.
void write_evaluation(const EvaluationReport& report, const fs::path& out_dir);

struct AblationEntry {
  LayerPair layers;
  Distance train_distance = Distance::kCosine;
  Distance infer_distance = Distance::kL2;
  Fusion fusion = Fusion::kProduct;
};

struct AblationGrid {
  std::vector<LayerPair> layer_pairs;
  std::vector<Distance> train_distances;
  std::vector<Distance> infer_distances;
  std::vector<Fusion> fusions;

  std::vector<AblationEntry> expand() const;
};

struct AblationRow {
  AblationEntry entry;
  double i_auroc = 0;
  double aupro_30 = 0;
  double aupro_5 = 0;
  double rho_30 = 0;
  double rho_5 = 0;
};

/// Trains one model per (layer pair, train distance) and evaluates every
/// (infer distance, fusion) combination on it.
std::vector<AblationRow> run_ablation(const Manifest& manifest, const AblationGrid& grid,
                                      const TrainConfig& base_train,
                                      const InferConfig& base_infer, unsigned threads,
                                      std::ostream* progress = nullptr);

std::string format_ablation_tsv(const std::vector<AblationRow>& rows);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

/// Label used in ablation tables: "[j, k]" for fused maps, "[j -> k]" for
/// the forward map alone, "[j <- k]" for the backward map alone.
std::string ablation_label(const AblationEntry& e);

/// gnuplot script plotting PRO curves found in `curves_dir`.
std::string plot_script(const fs::path& curves_dir, const std::vector<std::string>& curve_files);

}  // namespace tsad
