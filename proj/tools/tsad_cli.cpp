// tsad: train, infer, evaluate, ablate, report.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tsad/error.hpp"
#include "tsad/pipeline.hpp"

namespace {

using namespace tsad;

tsad::LayerPair parse_pair(const std::string& text) {
  const auto sep = text.find_first_of(",:");
  if (sep == std::string::npos) throw UsageError("layer pair '" + text + "' must look like j,k");
  try {
    return {static_cast<std::uint32_t>(std::stoul(text.substr(0, sep))),
            static_cast<std::uint32_t>(std::stoul(text.substr(sep + 1)))};
  } catch (const std::exception&) {
    throw UsageError("layer pair '" + text + "' must look like j,k");
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(text);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct TrainFlags {
  std::string manifest, model, log;
  std::string layers = "8,12";
  std::uint32_t epochs = 50;
  double lr = 1e-3;
  std::string loss_distance = "cosine";
  std::string loss_reduction = "mean";
  std::uint64_t seed = 0;
  std::uint32_t hidden_units = 0;
  std::uint32_t shots = 0;
  std::uint64_t shots_seed = 0;

  TrainConfig config() const {
    TrainConfig c;
    c.layer_pair = parse_pair(layers);
    c.epochs = epochs;
    c.learning_rate = lr;
    c.loss_distance = parse_distance(loss_distance);
    c.loss_reduction = parse_loss_reduction(loss_reduction);
    c.seed = seed;
    c.hidden_units = hidden_units;
    c.validate();
    return c;
  }
};

struct InferFlags {
  std::string manifest, model, out;
  std::string distance = "l2";
  std::string fusion = "product";
  double sigma = 4.0;
  double top_fraction = 0.001;
  std::string stage_order = "crop-smooth";
  std::string score_on = "smoothed";

  InferConfig config() const {
    InferConfig c;
    c.infer_distance = parse_distance(distance);
    c.fusion = parse_fusion(fusion);
    c.smoothing_sigma = sigma;
    c.top_fraction = top_fraction;
    c.order = stage_order == "crop-smooth" ? StageOrder::kCropThenSmooth : StageOrder::kSmoothThenCrop;
    c.score_on_smoothed = score_on == "smoothed";
    c.validate();
    return c;
  }
};

void add_train_options(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--layers", f.layers, "Layer pair j,k (j < k)")->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--loss-distance", f.loss_distance, "Per-patch training loss")
      ->capture_default_str()->check(CLI::IsMember({"cosine", "l2"}));
  cmd->add_option("--loss-reduction", f.loss_reduction, "Reduction over patches")
      ->capture_default_str()->check(CLI::IsMember({"mean", "sum"}));
  cmd->add_option("--seed", f.seed, "Seed for initialisation and image order")->capture_default_str();
  cmd->add_option("--hidden-units", f.hidden_units, "Units per hidden layer (0: embedding dim)")
      ->capture_default_str();
}

void add_infer_options(CLI::App* cmd, InferFlags& f) {
  cmd->add_option("--distance", f.distance, "Per-patch discrepancy")
      ->capture_default_str()->check(CLI::IsMember({"l2", "cosine"}));
  cmd->add_option("--fusion", f.fusion, "How the two discrepancy maps are combined")
      ->capture_default_str()
      ->check(CLI::IsMember({"product", "sum", "delta_j_only", "delta_k_only"}));
  cmd->add_option("--sigma", f.sigma, "Gaussian smoothing sigma in pixels")
      ->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--top-fraction", f.top_fraction, "Fraction of pixels averaged for the global score")
      ->capture_default_str()->check(CLI::Range(1e-12, 1.0));
  cmd->add_option("--stage-order", f.stage_order, "Debug: crop before or after smoothing")
      ->capture_default_str()->check(CLI::IsMember({"crop-smooth", "smooth-crop"}));
  cmd->add_option("--score-on", f.score_on, "Debug: map used for the global score")
      ->capture_default_str()->check(CLI::IsMember({"smoothed", "unsmoothed"}));
}

void print_banner(const std::string& command, const CLI::App& app) {
  std::cout << "# tsad " << command << " effective configuration\n";
  std::istringstream cfg(app.config_to_str(true, false));
  for (std::string line; std::getline(cfg, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto dot = line.find('.');
    const bool global = dot == std::string::npos || dot > eq;
    if (global || line.compare(0, command.size() + 1, command + ".") == 0) {
      std::cout << "#   " << line << '\n';
    }
  }
}

void write_train_log(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "epoch\tforward_loss\tbackward_loss\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%u\t%.9g\t%.9g\n", e.epoch, e.forward_loss, e.backward_loss);
    out << buf;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-Student anomaly detection on exported patch embeddings"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with default flag values (flags override it)");
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--threads", threads, "Worker threads for inference/evaluation")
      ->envname("TSAD_THREADS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train both Students on the nominal train split");
  train_cmd->add_option("--manifest", tf.manifest, "Dataset manifest (JSON)")->required();
  train_cmd->add_option("--model", tf.model, "Output model file")->required();
  train_cmd->add_option("--log", tf.log, "Optional per-epoch loss log (TSV)");
  train_cmd->add_option("--shots", tf.shots, "Few-shot: train samples kept per category (0: all)")
      ->capture_default_str();
  train_cmd->add_option("--shots-seed", tf.shots_seed, "Seed for few-shot selection")->capture_default_str();
  add_train_options(train_cmd, tf);

  InferFlags inf;
  auto* infer_cmd = app.add_subcommand("infer", "Compute anomaly maps and scores for the test split");
  infer_cmd->add_option("--manifest", inf.manifest, "Dataset manifest (JSON)")->required();
  infer_cmd->add_option("--model", inf.model, "Trained model file")->required();
  infer_cmd->add_option("--out", inf.out, "Output directory")->required();
  add_infer_options(infer_cmd, inf);

  std::string eval_manifest, eval_infer_dir, eval_out, eval_limits = "0.3,0.05";
  auto* eval_cmd = app.add_subcommand("evaluate", "Compute detection and segmentation metrics");
  eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest (JSON)")->required();
  eval_cmd->add_option("--infer-dir", eval_infer_dir, "Directory written by 'infer'")->required();
  eval_cmd->add_option("--out", eval_out, "Report directory")->required();
  eval_cmd->add_option("--limits", eval_limits, "Comma-separated AUPRO integration limits")
      ->capture_default_str();

  TrainFlags at;
  InferFlags ai;
  std::string ablate_pairs = "8:12", ablate_train_d = "cosine", ablate_infer_d = "l2",
              ablate_fusions = "product", ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep layer pairs, distances and fusion modes");
  ablate_cmd->add_option("--manifest", at.manifest, "Dataset manifest (JSON)")->required();
  ablate_cmd->add_option("--pairs", ablate_pairs, "Layer pairs, e.g. 8:12,10:12")->capture_default_str();
  ablate_cmd->add_option("--train-distances", ablate_train_d, "Training losses (cosine,l2)")
      ->capture_default_str();
  ablate_cmd->add_option("--infer-distances", ablate_infer_d, "Inference distances (l2,cosine)")
      ->capture_default_str();
  ablate_cmd->add_option("--fusions", ablate_fusions,
                         "Fusion modes (product,sum,delta_k_only,delta_j_only)")
      ->capture_default_str();
  ablate_cmd->add_option("--out", ablate_out, "Optional TSV output");
  add_train_options(ablate_cmd, at);
  ablate_cmd->remove_option(ablate_cmd->get_option("--layers"));
  add_infer_options(ablate_cmd, ai);
  ablate_cmd->remove_option(ablate_cmd->get_option("--distance"));
  ablate_cmd->remove_option(ablate_cmd->get_option("--fusion"));

  std::string report_dir, report_plot;
  auto* report_cmd = app.add_subcommand("report", "Print a saved report and emit a PRO-curve plot script");
  report_cmd->add_option("--eval-dir", report_dir, "Directory written by 'evaluate'")->required();
  report_cmd->add_option("--plot", report_plot, "gnuplot script to write (default: <eval-dir>/pro_curves.gp)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code_for(ErrorKind::kUsage);
  }

  try {
    if (*train_cmd) {
      const TrainConfig config = tf.config();
      print_banner("train", app);
      Manifest manifest = load_manifest(tf.manifest);
      if (tf.shots > 0) manifest = sample_fewshot(manifest, tf.shots, tf.shots_seed);
      const auto result = train(manifest, config, [](const EpochLog& e) {
        std::printf("epoch %3u  S_F loss %.6f  S_B loss %.6f\n", e.epoch, e.forward_loss,
                    e.backward_loss);
        if (e.degenerate_patches > 0) {
          std::printf("  warning: %zu zero-norm patch vectors scored as loss 1\n",
                      e.degenerate_patches);
        }
        std::fflush(stdout);
      });
      save_model(result.model, tf.model);
      if (!tf.log.empty()) write_train_log(result.log, tf.log);
      std::cout << "model written to " << tf.model << '\n';
    } else if (*infer_cmd) {
      const InferConfig config = inf.config();
      print_banner("infer", app);
      const Manifest manifest = load_manifest(inf.manifest);
      const StudentPair model = load_model(inf.model);
      const auto summary = run_inference(manifest, model, config, inf.out, threads);
      std::printf("%zu test samples, mean %.3f ms/sample (features in memory -> map)\n",
                  summary.samples, summary.mean_ms);
    } else if (*eval_cmd) {
      std::vector<double> limits;
      for (const auto& item : split_list(eval_limits)) {
        try {
          limits.push_back(std::stod(item));
        } catch (const std::exception&) {
          throw UsageError("bad limit '" + item + "'");
        }
        if (!(limits.back() > 0 && limits.back() <= 1)) {
          throw UsageError("limits must lie in (0, 1]");
        }
      }
      if (limits.empty()) throw UsageError("--limits is empty");
      print_banner("evaluate", app);
      const Manifest manifest = load_manifest(eval_manifest);
      const auto input = load_evaluation_input(manifest, eval_infer_dir);
      const auto report = evaluate(manifest, input, limits, threads);
      write_evaluation(report, eval_out);
      std::cout << format_report_table(report);
    } else if (*ablate_cmd) {
      AblationGrid grid;
      for (const auto& p : split_list(ablate_pairs)) grid.layer_pairs.push_back(parse_pair(p));
      for (const auto& d : split_list(ablate_train_d)) grid.train_distances.push_back(parse_distance(d));
      for (const auto& d : split_list(ablate_infer_d)) grid.infer_distances.push_back(parse_distance(d));
      for (const auto& f : split_list(ablate_fusions)) grid.fusions.push_back(parse_fusion(f));
      if (grid.expand().empty()) throw UsageError("ablation grid is empty");
      for (const auto& p : grid.layer_pairs) {
        if (p.j >= p.k) throw UsageError("layer pairs require j < k");
      }
      TrainConfig tc = at.config();
      const InferConfig ic = ai.config();
      print_banner("ablate", app);
      const Manifest manifest = load_manifest(at.manifest);
      const auto rows = run_ablation(manifest, grid, tc, ic, threads, &std::cout);
      std::cout << format_ablation_table(rows);
      if (!ablate_out.empty()) {
        std::ofstream out(ablate_out);
        if (!out) throw DataError("cannot open " + ablate_out + " for writing");
        out << format_ablation_tsv(rows);
      }
    } else if (*report_cmd) {
      const fs::path dir(report_dir);
      std::ifstream in(dir / "report.tsv");
      if (!in) throw DataError("no report.tsv in " + report_dir);
      std::stringstream text;
      text << in.rdbuf();
      std::cout << format_report_table(parse_report_tsv(text.str()));
      std::vector<std::string> curves;
      if (fs::exists(dir / "curves")) {
        for (const auto& entry : fs::directory_iterator(dir / "curves")) {
          curves.push_back(entry.path().filename().string());
        }
      }
      std::sort(curves.begin(), curves.end());
      const fs::path plot = report_plot.empty() ? dir / "pro_curves.gp" : fs::path(report_plot);
      std::ofstream out(plot);
      if (!out) throw DataError("cannot open " + plot.string() + " for writing");
      out << plot_script(fs::absolute(dir / "curves"), curves);
      std::cout << "plot script written to " << plot.string() << '\n';
    }
  } catch (const tsad::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(ErrorKind::kData);
  }
  return 0;
}
