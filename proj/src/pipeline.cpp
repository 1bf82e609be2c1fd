#include "tsad/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "tsad/error.hpp"

namespace tsad {

std::string map_file_name(const std::string& sample_id) {
  std::string name = sample_id;
  for (char& c : name) {
    if (c == '/' || c == '\\' || c == ':' || c == ' ') c = '_';
  }
  return name + ".pefg";
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned count =
      std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < count; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

void write_scores(const std::vector<ScoreRow>& rows, const fs::path& path) {
  std::string text = "sample_id\tglobal_score\tlabel\n";
  for (const auto& r : rows) {
    text += r.sample_id + '\t' + exact(r.global_score) + '\t' + to_string(r.label) + '\n';
  }
  write_text(path, text);
}

std::vector<ScoreRow> read_scores(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scores file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("sample_id\tglobal_score\tlabel", 0) != 0) {
    throw DataError(path.string() + ": unexpected scores header");
  }
  std::vector<ScoreRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, score, label;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, score, '\t') ||
        !std::getline(ss, label, '\t')) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
    ScoreRow row;
    row.sample_id = id;
    try {
      row.global_score = std::stod(score);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad score");
    }
    if (label == "nominal") {
      row.label = Label::kNominal;
    } else if (label == "anomalous") {
      row.label = Label::kAnomalous;
    } else {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad label");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AnomalyMap> infer_all(const Manifest& manifest, const StudentPair& model,
                                  const InferConfig& config, unsigned threads,
                                  double* mean_ms) {
  config.validate();
  if (manifest.layer_pair != model.config.layer_pair) {
    throw DataError("layer-pair mismatch: model trained on (" +
                    std::to_string(model.config.layer_pair.j) + "," +
                    std::to_string(model.config.layer_pair.k) + "), manifest provides (" +
                    std::to_string(manifest.layer_pair.j) + "," +
                    std::to_string(manifest.layer_pair.k) + ")");
  }
  const auto tests = manifest.select(Split::kTest);
  const LayerPair& pair = model.config.layer_pair;
  auto load = [&](const SampleRecord& s) {
    for (std::uint32_t layer : {pair.j, pair.k}) {
      if (!s.feature_paths.contains(layer)) {
        throw DataError(s.sample_id + ": layer-pair mismatch, model needs layer " +
                        std::to_string(layer) + " features");
      }
    }
    try {
      return std::pair{read_feature_grid(s.feature_paths.at(pair.j)),
                       read_feature_grid(s.feature_paths.at(pair.k))};
    } catch (const Error& e) {
      throw DataError(s.sample_id + ": " + e.what());
    }
  };
  if (mean_ms && !tests.empty()) {
    const auto [fj, fk] = load(*tests.front());
    infer_grids(tests.front()->sample_id, fj, fk, model, config);  // warm-up
  }
  std::vector<AnomalyMap> maps(tests.size());
  std::vector<double> elapsed(tests.size(), 0.0);
  parallel_for(tests.size(), threads, [&](std::size_t i) {
    const SampleRecord& s = *tests[i];
    const auto [fj, fk] = load(s);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      maps[i] = infer_grids(s.sample_id, fj, fk, model, config);
    } catch (const NumericError& e) {
      throw NumericError(s.sample_id + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(s.sample_id + ": " + e.what());
    }
    elapsed[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (maps[i].map.rows() != s.image_dims.h || maps[i].map.cols() != s.image_dims.w) {
      throw DataError(s.sample_id + ": anomaly map size differs from image_dims");
    }
  });
  if (mean_ms) {
    *mean_ms = 0;
    for (double e : elapsed) *mean_ms += e;
    if (!tests.empty()) *mean_ms /= static_cast<double>(tests.size());
  }
  return maps;
}

InferSummary run_inference(const Manifest& manifest, const StudentPair& model,
                           const InferConfig& config, const fs::path& out_dir, unsigned threads) {
  InferSummary summary;
  const auto maps = infer_all(manifest, model, config, threads, &summary.mean_ms);
  summary.samples = maps.size();
  const fs::path map_dir = out_dir / "maps";
  fs::create_directories(map_dir);
  const auto tests = manifest.select(Split::kTest);
  std::vector<ScoreRow> rows;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    write_score_map(maps[i].map, map_dir / map_file_name(maps[i].sample_id));
    rows.push_back({maps[i].sample_id, maps[i].global_score, tests[i]->label});
  }
  write_scores(rows, out_dir / "scores.tsv");
  return summary;
}

EvaluationInput to_evaluation_input(std::vector<AnomalyMap> maps) {
  EvaluationInput in;
  for (auto& m : maps) {
    in.scores[m.sample_id] = m.global_score;
    in.maps[m.sample_id] = std::move(m.map);
  }
  return in;
}

EvaluationInput load_evaluation_input(const Manifest& manifest, const fs::path& infer_dir) {
  EvaluationInput in;
  for (const auto& row : read_scores(infer_dir / "scores.tsv")) {
    in.scores[row.sample_id] = row.global_score;
  }
  std::vector<std::string> missing;
  for (const SampleRecord* s : manifest.select(Split::kTest)) {
    const fs::path p = infer_dir / "maps" / map_file_name(s->sample_id);
    if (!fs::exists(p)) {
      missing.push_back(s->sample_id);
      continue;
    }
    in.maps[s->sample_id] = read_score_map(p);
  }
  if (!missing.empty()) {
    std::string msg = "missing anomaly maps for " + std::to_string(missing.size()) + " test sample(s):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  return in;
}

void write_evaluation(const EvaluationReport& report, const fs::path& out_dir) {
  fs::create_directories(out_dir / "curves");
  write_text(out_dir / "report.tsv", format_report_tsv(report));
  write_text(out_dir / "report.txt", format_report_table(report));
  for (const auto& c : report.categories) {
    for (const auto& l : c.limits) {
      char tag[32];
      std::snprintf(tag, sizeof tag, "%g", l.limit * 100.0);
      std::string text = "# category=" + c.category + " limit=" + exact(l.limit) +
                         " aupro=" + exact(l.aupro) + "\nfpr\tpro\n";
      for (const auto& p : l.curve.points) text += exact(p.fpr) + '\t' + exact(p.pro) + '\n';
      write_text(out_dir / "curves" / (map_file_name(c.category).substr(0, map_file_name(c.category).size() - 5) +
                                       "@" + tag + ".tsv"),
                 text);
    }
  }
}

std::vector<AblationEntry> AblationGrid::expand() const {
  std::vector<AblationEntry> out;
  for (const auto& lp : layer_pairs)
    for (Distance td : train_distances)
      for (Distance id : infer_distances)
        for (Fusion f : fusions) out.push_back({lp, td, id, f});
  return out;
}

std::string ablation_label(const AblationEntry& e) {
  const std::string j = std::to_string(e.layers.j);
  const std::string k = std::to_string(e.layers.k);
  switch (e.fusion) {
    case Fusion::kProduct:
      return "[" + j + ", " + k + "]";
    case Fusion::kSum:
      return "[" + j + " + " + k + "]";
    case Fusion::kDeltaKOnly:
      return "[" + j + " -> " + k + "]";
    case Fusion::kDeltaJOnly:
      return "[" + j + " <- " + k + "]";
  }
  return "?";
}

std::vector<AblationRow> run_ablation(const Manifest& manifest, const AblationGrid& grid,
                                      const TrainConfig& base_train,
                                      const InferConfig& base_infer, unsigned threads,
                                      std::ostream* progress) {
  const auto entries = grid.expand();
  if (entries.empty()) throw UsageError("ablation grid is empty");
  const std::vector<double> limits = {0.3, 0.05};
  std::vector<AblationRow> rows;
  std::optional<StudentPair> model;
  std::optional<std::pair<LayerPair, Distance>> trained_for;
  for (const AblationEntry& e : entries) {
    Manifest m = manifest;
    m.layer_pair = e.layers;
    for (const auto& s : m.samples) {
      for (std::uint32_t layer : {e.layers.j, e.layers.k}) {
        if (!s.feature_paths.contains(layer)) {
          throw DataError(s.sample_id + ": missing layer " + std::to_string(layer) +
                          " features required by the ablation grid");
        }
      }
    }
    if (!trained_for || trained_for->first != e.layers || trained_for->second != e.train_distance) {
      TrainConfig tc = base_train;
      tc.layer_pair = e.layers;
      tc.loss_distance = e.train_distance;
      if (progress) {
        *progress << "training " << e.layers.j << "->" << e.layers.k << " ("
                  << to_string(e.train_distance) << " loss)\n";
      }
      model = train(m, tc).model;
      trained_for = {e.layers, e.train_distance};
    }
    InferConfig ic = base_infer;
    ic.infer_distance = e.infer_distance;
    ic.fusion = e.fusion;
    const auto report =
        evaluate(m, to_evaluation_input(infer_all(m, *model, ic, threads)), limits, threads);
    AblationRow row;
    row.entry = e;
    row.i_auroc = report.mean.i_auroc;
    row.aupro_30 = report.mean.limits[0].aupro;
    row.aupro_5 = report.mean.limits[1].aupro;
    row.rho_30 = report.mean.limits[0].robust.rho;
    row.rho_5 = report.mean.limits[1].robust.rho;
    rows.push_back(row);
  }
  return rows;
}

std::string format_ablation_tsv(const std::vector<AblationRow>& rows) {
  std::string out =
      "layers\ttrain_distance\tinfer_distance\tfusion\ti_auroc\taupro@30\taupro@5\trho@30\trho@5\n";
  for (const auto& r : rows) {
    out += ablation_label(r.entry) + '\t' + to_string(r.entry.train_distance) + '\t' +
           to_string(r.entry.infer_distance) + '\t' + to_string(r.entry.fusion) + '\t' +
           exact(r.i_auroc) + '\t' + exact(r.aupro_30) + '\t' + exact(r.aupro_5) + '\t' +
           exact(r.rho_30) + '\t' + exact(r.rho_5) + '\n';
  }
  return out;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-14s %-8s %-8s %-13s %8s %10s %9s\n", "Layers", "Train",
                "Infer", "Fusion", "I-AUROC", "AUPRO@30%", "AUPRO@5%");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %-8s %-8s %-13s %8s %10s %9s\n",
                  ablation_label(r.entry).c_str(), to_string(r.entry.train_distance),
                  to_string(r.entry.infer_distance), to_string(r.entry.fusion),
                  fixed3(r.i_auroc).c_str(), fixed3(r.aupro_30).c_str(), fixed3(r.aupro_5).c_str());
    os << buf;
  }
  return os.str();
}

std::string plot_script(const fs::path& curves_dir, const std::vector<std::string>& curve_files) {
  std::ostringstream os;
  os << "# gnuplot script: PRO curves\n"
     << "set datafile separator '\\t'\n"
     << "set xlabel 'FPR'\nset ylabel 'PRO'\nset key bottom right\n"
     << "set yrange [0:1]\n";
  os << "plot ";
  for (std::size_t i = 0; i < curve_files.size(); ++i) {
    if (i) os << ", \\\n     ";
    os << "'" << (curves_dir / curve_files[i]).generic_string()
       << "' skip 2 using 1:2 with lines title '" << curve_files[i] << "'";
  }
  os << "\n";
  return os.str();
}

}  // namespace tsad
