// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
// binding criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "synthetic.hpp"
#include "tsad/anomaly_map.hpp"
#include "tsad/metrics.hpp"
#include "tsad/pipeline.hpp"
#include "tsad/student.hpp"

using namespace tsad;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void info(const std::string& name, const std::string& detail) {
  std::printf("INFO  %-28s %s\n", name.c_str(), detail.c_str());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// --- gradient check ------------------------------------------------------

double fd_error(StudentNet<double> net, const Matrix<double>& x, const Matrix<double>& y,
                Distance d) {
  const auto analytic = backward(net, x, y, d);
  std::vector<double> grads;
  analytic.grad.for_each_block([&](const char*, const double* p, Eigen::Index n) {
    grads.insert(grads.end(), p, p + n);
  });
  std::vector<double*> params;
  net.params.for_each_block([&](const char*, double* p, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) params.push_back(p + i);
  });
  const double h = 1e-4;
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = backward(net, x, y, d).loss;
    *params[i] = saved - h;
    const double down = backward(net, x, y, d).loss;
    *params[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(grads[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - grads[i]) / denom);
  }
  return worst;
}

void gradient_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n01;
  const int nets = 24;
  double worst = 0;
  for (int t = 0; t < nets; ++t) {
    const auto d_in = 1 + static_cast<Eigen::Index>(rng() % 16);
    const auto units = 1 + static_cast<Eigen::Index>(rng() % 16);
    const auto d_out = 1 + static_cast<Eigen::Index>(rng() % 16);
    const auto batch = 1 + static_cast<Eigen::Index>(rng() % 8);
    auto p = MlpParams<double>::zeros(d_in, units, d_out);
    p.for_each_block([&](const char*, double* v, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) v[i] = 0.5 * n01(rng);
    });
    const auto net = StudentNet<double>::from_params(std::move(p));
    Matrix<double> x(batch, d_in), y(batch, d_out);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = n01(rng);
    const Distance d = t % 2 ? Distance::kL2 : Distance::kCosine;
    worst = std::max(worst, fd_error(net, x, y, d));
  }
  const double secs = seconds_since(t0);
  report(worst < 1e-4 && secs < 10, "gradient check",
         fmt("%d nets, max relative error %.3g (< 1e-4), %.2f s (< 10 s)", nets, worst, secs));
}

// --- metric oracles ------------------------------------------------------

void auroc_oracle() {
  std::mt19937_64 rng(1);
  double worst = 0;
  for (int set = 0; set < 100; ++set) {
    const int n = 2 + static_cast<int>(rng() % 49);
    std::vector<double> s;
    std::vector<bool> l;
    std::vector<ScoredLabel> items;
    const int levels = 1 + static_cast<int>(rng() % 10);  // few levels -> many ties
    for (int i = 0; i < n; ++i) {
      const bool a = i == 0 ? true : i == 1 ? false : (rng() % 2 == 0);
      const double v = static_cast<double>(rng() % levels) / levels;
      s.push_back(v);
      l.push_back(a);
      items.push_back({v, a});
    }
    worst = std::max(worst, std::abs(auroc(items) - oracle::pairwise_auroc(s, l)));
  }
  report(worst <= 1e-12, "AUROC oracle", fmt("100 sets, max |diff| %.3g (<= 1e-12)", worst));
}

void aupro_oracle() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<float> n01;
  double worst = 0;
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t rows = 16 + rng() % 49, cols = 16 + rng() % 49;
    std::vector<ScoreGrid> maps;
    std::vector<Mask> masks;
    const int anomalous_images = 1 + static_cast<int>(rng() % 3);
    int regions_left = 4;
    for (int img = 0; img < anomalous_images && regions_left > 0; ++img) {
      Mask m(rows, cols);
      const int regions = 1 + static_cast<int>(rng() % std::min(2, regions_left));
      regions_left -= regions;
      for (int r = 0; r < regions; ++r) {
        // separated bands so each disk stays its own component
        const double cx = (r + 0.5) * cols / regions;
        const double cy = 4 + u(rng) * (rows - 8);
        const double rad = 0.5 + u(rng) * std::min(rows, cols / regions) / 4.0;
        for (std::size_t y = 0; y < rows; ++y)
          for (std::size_t x = 0; x < cols; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad) m(y, x) = 1;
      }
      ScoreGrid g(rows, cols);
      const float signal = static_cast<float>(0.5 + 2 * u(rng));
      for (std::size_t i = 0; i < g.size(); ++i)
        g.values()[i] = n01(rng) + signal * m.values()[i];
      maps.push_back(std::move(g));
      masks.push_back(std::move(m));
    }
    ScoreGrid nominal(rows, cols);
    for (float& v : nominal.values()) v = n01(rng);
    maps.push_back(std::move(nominal));
    masks.emplace_back();
    const ProEvaluator pro(maps, masks);
    if (pro.regions().empty()) continue;
    for (double limit : {0.3, 0.05}) {
      worst = std::max(worst,
                       std::abs(pro.curve(limit).aupro - oracle::dense_aupro(maps, masks, limit)));
    }
  }
  report(worst <= 1e-3, "AUPRO oracle",
         fmt("25 instances, limits 0.3 and 0.05, max |diff| %.3g (<= 1e-3)", worst));
}

void rho_reproduction() {
  const double visa30 = robustness({0.935, 0.941, 0.946, 0.952}).rho;
  const double visa5 = robustness({0.730, 0.749, 0.768, 0.787}).rho;
  report(std::abs(visa30 - 0.926) <= 1e-3 && std::abs(visa5 - 0.702) <= 1e-3, "rho reproduction",
         fmt("(0.935,0.941,0.946,0.952) -> %.4f (0.926 +- 0.001); "
             "(0.730,0.749,0.768,0.787) -> %.4f (0.702 +- 0.001)",
             visa30, visa5));
  const double mvtec = robustness({0.958, 0.948, 0.947, 0.945}).rho;
  info("rho reference row", fmt("(0.958,0.948,0.947,0.945) -> %.4f; reference 0.986, %s", mvtec,
                                std::abs(mvtec - 0.986) <= 1e-3 ? "matches" : "DISCREPANCY"));
}

void geometry() {
  const std::size_t side = 1036, patch = 14;
  const std::size_t grid = side / patch;
  const std::size_t n = grid * grid;
  const std::size_t m = top_count(side * side, 0.001);
  ScoreGrid g(grid, grid, 1.0f);
  const ScoreGrid up = upsample_bilinear(g, grid * patch, grid * patch);
  report(grid == 74 && n == 5476 && m == 1073 && up.rows() == side,
         "geometry", fmt("grid %zux%zu, N = %zu, M = %zu", grid, grid, n, m));
}

// --- synthetic end-to-end ------------------------------------------------

struct RunResult {
  EvaluationReport report;
  std::string tsv;
  std::vector<AnomalyMap> maps;
  StudentPair model;
  double train_s = 0, infer_s = 0, eval_s = 0;
};

RunResult full_run(const Manifest& manifest, const InferConfig& infer_cfg, unsigned threads) {
  RunResult r;
  const std::vector<double> limits{0.3, 0.05};
  auto t0 = Clock::now();
  r.model = train(manifest, TrainConfig{}).model;
  r.train_s = seconds_since(t0);
  t0 = Clock::now();
  r.maps = infer_all(manifest, r.model, infer_cfg, threads);
  r.infer_s = seconds_since(t0);
  t0 = Clock::now();
  r.report = evaluate(manifest, to_evaluation_input(r.maps), limits, threads);
  r.eval_s = seconds_since(t0);
  r.tsv = format_report_tsv(r.report);
  return r;
}

void synthetic_end_to_end(const fs::path& work, unsigned threads) {
  const synthetic::Config cfg;  // 40 train, 20 + 20 test, 16x16x32 grids
  const auto t_all = Clock::now();
  const Manifest manifest = load_manifest(synthetic::generate(cfg, work / "fixture"));
  const RunResult run = full_run(manifest, InferConfig{}, threads);
  const double total = seconds_since(t_all);
  const auto& m = run.report.mean;
  const double aupro30 = m.limits[0].aupro;
  report(m.i_auroc >= 0.95 && aupro30 >= 0.90 && total < 120, "synthetic end-to-end",
         fmt("I-AUROC %.4f (>= 0.95), AUPRO@30%% %.4f (>= 0.90), %.1f s (< 120 s; train %.1f, "
             "infer %.1f, evaluate %.1f)",
             m.i_auroc, aupro30, total, run.train_s, run.infer_s, run.eval_s));
  info("synthetic details", fmt("P-AUROC %.4f, AUPRO@5%% %.4f, rho@30%% %.4f, rho@5%% %.4f",
                                m.p_auroc, m.limits[1].aupro, m.limits[0].robust.rho,
                                m.limits[1].robust.rho));

  // Fusion ordering on the same trained model.
  const std::vector<double> limits{0.3, 0.05};
  auto score_fusion = [&](Fusion f) {
    InferConfig c;
    c.fusion = f;
    return evaluate(manifest, to_evaluation_input(infer_all(manifest, run.model, c, threads)),
                    limits, threads)
        .mean;
  };
  const CategoryReport fj = score_fusion(Fusion::kDeltaJOnly);
  const CategoryReport fk = score_fusion(Fusion::kDeltaKOnly);
  const bool ordered = m.i_auroc >= fj.i_auroc && m.i_auroc >= fk.i_auroc &&
                       aupro30 >= fj.limits[0].aupro && aupro30 >= fk.limits[0].aupro;
  report(ordered, "fusion ordering",
         fmt("I-AUROC product %.4f, delta_j %.4f, delta_k %.4f; AUPRO@30%% product %.4f, "
             "delta_j %.4f, delta_k %.4f",
             m.i_auroc, fj.i_auroc, fk.i_auroc, aupro30, fj.limits[0].aupro,
             fk.limits[0].aupro));

  // Quartile invariants.
  std::vector<ScoreGrid> maps;
  std::vector<Mask> masks;
  const auto tests = manifest.select(Split::kTest);
  for (std::size_t i = 0; i < tests.size(); ++i) {
    maps.push_back(run.maps[i].map);
    masks.push_back(tests[i]->mask_path ? read_mask(*tests[i]->mask_path, tests[i]->image_dims)
                                        : Mask{});
  }
  const ProEvaluator pro(maps, masks);
  const auto sizes = pro.region_sizes();
  const auto& cat = run.report.categories.at(0);
  bool bit_equal = true, nested = true, bounded = true;
  for (const auto& l : cat.limits) {
    bit_equal = bit_equal && l.aupro_q[3] == l.aupro;
    bounded = bounded && l.robust.rho >= 0 && l.robust.rho <= 1;
  }
  std::size_t prev = 0;
  for (std::size_t q = 0; q < 4; ++q) {
    if (q > 0 && cat.quartiles[q] < cat.quartiles[q - 1]) nested = false;
    const auto count = static_cast<std::size_t>(std::count_if(
        sizes.begin(), sizes.end(), [&](std::size_t s) { return s <= cat.quartiles[q]; }));
    if (count < prev) nested = false;
    prev = count;
  }
  nested = nested && prev == sizes.size();
  report(bit_equal && nested && bounded, "quartile invariants",
         fmt("%zu regions, Q = (%.1f, %.1f, %.1f, %.0f); Q4 bit-equal %s, nested %s, rho in "
             "[0,1] %s",
             sizes.size(), cat.quartiles[0], cat.quartiles[1], cat.quartiles[2],
             cat.quartiles[3], bit_equal ? "yes" : "no", nested ? "yes" : "no",
             bounded ? "yes" : "no"));

  // Determinism: a second full run, with a different thread count.
  const unsigned other_threads = threads > 1 ? 1 : 2;
  const RunResult again = full_run(manifest, InferConfig{}, other_threads);
  report(again.tsv == run.tsv, "determinism",
         fmt("two train+infer+evaluate runs (%u and %u threads) give %s reports", threads,
             other_threads, again.tsv == run.tsv ? "bit-identical" : "DIFFERENT"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = "acceptance_work";
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--work", work, "Scratch directory")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  fs::remove_all(work);
  fs::create_directories(work);

  try {
    gradient_check();
    auroc_oracle();
    aupro_oracle();
    rho_reproduction();
    geometry();
    synthetic_end_to_end(work, threads);
  } catch (const std::exception& e) {
    std::printf("FAIL  %-28s %s\n", "unexpected error", e.what());
    ++failures;
  }
  std::printf("%s: %d binding criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
