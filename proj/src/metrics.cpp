#include "tsad/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "tsad/error.hpp"

namespace tsad {

namespace {

// Sweep over score-sorted (score, positive) pairs. Each tie group contributes
// positives * (negatives strictly below + half the negatives in the group).
template <typename Score>
double auroc_sorted(std::vector<std::pair<Score, bool>>& items) {
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double u = 0;
  double neg_below = 0;
  double n_pos = 0;
  double n_neg = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    double pos = 0;
    double neg = 0;
    while (j < items.size() && items[j].first == items[i].first) {
      (items[j].second ? pos : neg) += 1;
      ++j;
    }
    u += pos * (neg_below + 0.5 * neg);
    neg_below += neg;
    n_pos += pos;
    n_neg += neg;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("AUROC needs at least one nominal and one anomalous sample");
  }
  return u / (n_pos * n_neg);
}

}  // namespace

double auroc(std::span<const ScoredLabel> samples) {
  std::vector<std::pair<double, bool>> items;
  items.reserve(samples.size());
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw NumericError("AUROC: non-finite score");
    items.emplace_back(s.score, s.anomalous);
  }
  return auroc_sorted(items);
}

double p_auroc(std::span<const ScoreGrid> maps, std::span<const Mask> masks) {
  if (maps.size() != masks.size()) throw DataError("p_auroc: map/mask count mismatch");
  std::vector<std::pair<float, bool>> items;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const bool has_mask = !masks[i].empty();
    if (has_mask && !maps[i].same_shape(masks[i])) {
      throw DataError("p_auroc: map resolution differs from ground truth");
    }
    const auto v = maps[i].values();
    for (std::size_t p = 0; p < v.size(); ++p) {
      items.emplace_back(v[p], has_mask && masks[i].values()[p] != 0);
    }
  }
  return auroc_sorted(items);
}

std::vector<Region> connected_components(const Mask& mask, std::size_t image) {
  const auto rows = static_cast<std::ptrdiff_t>(mask.rows());
  const auto cols = static_cast<std::ptrdiff_t>(mask.cols());
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<Region> regions;
  std::deque<std::uint32_t> queue;
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      const auto start = static_cast<std::uint32_t>(r * cols + c);
      if (!mask.values()[start] || seen[start]) continue;
      Region region;
      region.image = image;
      region.component_id = regions.size();
      seen[start] = 1;
      queue.push_back(start);
      while (!queue.empty()) {
        const std::uint32_t p = queue.front();
        queue.pop_front();
        region.pixels.push_back(p);
        const std::ptrdiff_t pr = p / cols;
        const std::ptrdiff_t pc = p % cols;
        for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
          for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
            const std::ptrdiff_t nr = pr + dr;
            const std::ptrdiff_t nc = pc + dc;
            if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
            const auto q = static_cast<std::uint32_t>(nr * cols + nc);
            if (mask.values()[q] && !seen[q]) {
              seen[q] = 1;
              queue.push_back(q);
            }
          }
        }
      }
      std::sort(region.pixels.begin(), region.pixels.end());
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

double integrate_to_limit(std::span<const CurvePoint> points, double limit) {
  if (!(limit > 0 && limit <= 1)) throw UsageError("integration limit must lie in (0, 1]");
  double area = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const CurvePoint& a = points[i - 1];
    const CurvePoint& b = points[i];
    if (a.fpr >= limit) break;
    if (b.fpr <= limit) {
      area += 0.5 * (a.pro + b.pro) * (b.fpr - a.fpr);
    } else {
      const double t = (limit - a.fpr) / (b.fpr - a.fpr);
      const double pro_at_limit = a.pro + t * (b.pro - a.pro);
      area += 0.5 * (a.pro + pro_at_limit) * (limit - a.fpr);
      break;
    }
  }
  return area / limit;
}

namespace {

// Number of entries >= t in a descending array.
std::size_t count_at_least(const std::vector<float>& desc, float t) {
  return static_cast<std::size_t>(
      std::partition_point(desc.begin(), desc.end(), [t](float v) { return v >= t; }) -
      desc.begin());
}

}  // namespace

ProEvaluator::ProEvaluator(std::span<const ScoreGrid> maps, std::span<const Mask> masks) {
  if (maps.size() != masks.size()) throw DataError("PRO: map/mask count mismatch");
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto v = maps[i].values();
    if (masks[i].empty()) {
      negatives_.insert(negatives_.end(), v.begin(), v.end());
      continue;
    }
    if (!maps[i].same_shape(masks[i])) {
      throw DataError("PRO: map resolution differs from ground truth for image " +
                      std::to_string(i));
    }
    const auto m = masks[i].values();
    for (std::size_t p = 0; p < v.size(); ++p) {
      if (!m[p]) negatives_.push_back(v[p]);
    }
    for (Region& r : connected_components(masks[i], i)) {
      RegionScores rs;
      rs.desc.reserve(r.size());
      for (std::uint32_t p : r.pixels) rs.desc.push_back(v[p]);
      std::sort(rs.desc.begin(), rs.desc.end(), std::greater<>{});
      region_scores_.push_back(std::move(rs));
      regions_.push_back(std::move(r));
    }
  }
  for (float s : negatives_) {
    if (!std::isfinite(s)) throw NumericError("PRO: non-finite score");
  }
  std::sort(negatives_.begin(), negatives_.end(), std::greater<>{});
}

std::vector<std::size_t> ProEvaluator::region_sizes() const {
  std::vector<std::size_t> sizes;
  sizes.reserve(regions_.size());
  for (const auto& r : regions_) sizes.push_back(r.size());
  return sizes;
}

ProCurve ProEvaluator::curve(double limit, std::optional<double> max_region_size,
                             std::size_t levels) const {
  if (!(limit > 0 && limit <= 1)) throw UsageError("PRO limit must lie in (0, 1]");
  if (negatives_.empty()) throw DataError("PRO: no negative pixels");
  if (levels == 0) levels = 1;
  std::vector<std::size_t> included;
  for (std::size_t i = 0; i < regions_.size(); ++i) {
    if (!max_region_size || static_cast<double>(regions_[i].size()) <= *max_region_size) {
      included.push_back(i);
    }
  }
  if (included.empty()) throw DataError("PRO: no ground-truth regions after filtering");

  const auto n_neg = static_cast<double>(negatives_.size());
  std::vector<float> thresholds;
  auto add_rank = [&](double rank) {  // 1-based rank into the descending negatives
    const auto r = static_cast<std::size_t>(std::clamp(rank, 1.0, n_neg));
    const float t = negatives_[r - 1];
    thresholds.push_back(t);
    thresholds.push_back(std::nextafter(t, std::numeric_limits<float>::infinity()));
  };
  for (std::size_t m = 1; m <= levels; ++m) {
    add_rank(std::ceil(limit * static_cast<double>(m) / static_cast<double>(levels) * n_neg));
  }
  const double boundary = std::floor(limit * n_neg);
  if (boundary >= 1) add_rank(boundary);
  add_rank(boundary + 1);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>{});
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  ProCurve out;
  out.limit = limit;
  out.points.push_back({0.0, 0.0});
  const double n_regions = static_cast<double>(included.size());
  for (float t : thresholds) {
    double overlap = 0;
    for (std::size_t i : included) {
      overlap += static_cast<double>(count_at_least(region_scores_[i].desc, t)) /
                 static_cast<double>(region_scores_[i].desc.size());
    }
    out.points.push_back(
        {static_cast<double>(count_at_least(negatives_, t)) / n_neg, overlap / n_regions});
  }
  out.aupro = integrate_to_limit(out.points, limit);
  return out;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::array<double, 4> quartile_thresholds(std::span<const std::size_t> region_sizes) {
  if (region_sizes.empty()) throw DataError("quartiles: no anomalous regions");
  std::vector<double> v(region_sizes.begin(), region_sizes.end());
  return {percentile(v, 25), percentile(v, 50), percentile(v, 75),
          *std::max_element(v.begin(), v.end())};
}

Robustness robustness(const std::array<double, 4>& q) {
  Robustness r;
  r.w = 0.25 * (q[0] + q[1] + q[2] + q[3]);
  const double denom = std::max(q[0], q[3]);
  r.s = denom > 0 ? std::abs(q[3] - q[0]) / denom : 0.0;
  r.rho = r.w * (1.0 - r.s);
  return r;
}

namespace {

CategoryReport evaluate_category(const std::string& category,
                                 const std::vector<const SampleRecord*>& samples,
                                 const EvaluationInput& input, std::span<const double> limits) {
  CategoryReport rep;
  rep.category = category;
  rep.test_samples = samples.size();
  std::vector<ScoreGrid> maps;
  std::vector<Mask> masks;
  std::vector<ScoredLabel> scores;
  for (const SampleRecord* s : samples) {
    const auto map_it = input.maps.find(s->sample_id);
    const auto score_it = input.scores.find(s->sample_id);
    if (map_it == input.maps.end()) throw DataError("missing anomaly map for " + s->sample_id);
    if (score_it == input.scores.end()) throw DataError("missing score for " + s->sample_id);
    const ScoreGrid& map = map_it->second;
    if (map.rows() != s->image_dims.h || map.cols() != s->image_dims.w) {
      throw DataError(s->sample_id + ": anomaly map is " + std::to_string(map.rows()) + "x" +
                      std::to_string(map.cols()) + ", ground truth resolution is " +
                      std::to_string(s->image_dims.h) + "x" + std::to_string(s->image_dims.w));
    }
    maps.push_back(map);
    masks.push_back(s->mask_path ? read_mask(*s->mask_path, s->image_dims) : Mask{});
    const bool anomalous = s->label == Label::kAnomalous;
    rep.anomalous_samples += anomalous ? 1 : 0;
    scores.push_back({score_it->second, anomalous});
  }
  try {
    rep.i_auroc = auroc(scores);
    rep.p_auroc = p_auroc(maps, masks);
    const ProEvaluator pro(maps, masks);
    const auto sizes = pro.region_sizes();
    rep.regions = sizes.size();
    rep.quartiles = quartile_thresholds(sizes);
    for (double limit : limits) {
      LimitReport lr;
      lr.limit = limit;
      lr.curve = pro.curve(limit);
      lr.aupro = lr.curve.aupro;
      for (std::size_t q = 0; q < 4; ++q) {
        lr.aupro_q[q] = pro.curve(limit, rep.quartiles[q]).aupro;
      }
      lr.robust = robustness(lr.aupro_q);
      rep.limits.push_back(std::move(lr));
    }
  } catch (const DataError& e) {
    throw DataError("category '" + category + "': " + e.what());
  }
  return rep;
}

}  // namespace

EvaluationReport evaluate(const Manifest& manifest, const EvaluationInput& input,
                          std::span<const double> limits, unsigned threads) {
  if (limits.empty()) throw UsageError("at least one AUPRO limit is required");
  for (double l : limits) {
    if (!(l > 0 && l <= 1)) throw UsageError("AUPRO limits must lie in (0, 1]");
  }
  EvaluationReport report;
  report.limits.assign(limits.begin(), limits.end());
  const auto cats = manifest.categories();
  std::vector<std::vector<const SampleRecord*>> by_cat(cats.size());
  for (const SampleRecord* s : manifest.select(Split::kTest)) {
    const auto idx = std::lower_bound(cats.begin(), cats.end(), s->category) - cats.begin();
    by_cat[static_cast<std::size_t>(idx)].push_back(s);
  }
  std::vector<std::size_t> active;
  for (std::size_t c = 0; c < cats.size(); ++c) {
    if (!by_cat[c].empty()) active.push_back(c);
  }
  if (active.empty()) throw DataError("manifest has no test samples");

  report.categories.resize(active.size());
  std::vector<std::exception_ptr> errors(active.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < active.size();) {
      try {
        report.categories[i] = evaluate_category(cats[active[i]], by_cat[active[i]], input, limits);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(active.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  CategoryReport& mean = report.mean;
  mean.category = "mean";
  mean.limits.resize(limits.size());
  const double n = static_cast<double>(report.categories.size());
  for (const auto& c : report.categories) {
    mean.test_samples += c.test_samples;
    mean.anomalous_samples += c.anomalous_samples;
    mean.regions += c.regions;
    mean.i_auroc += c.i_auroc / n;
    mean.p_auroc += c.p_auroc / n;
    for (std::size_t q = 0; q < 4; ++q) mean.quartiles[q] += c.quartiles[q] / n;
    for (std::size_t l = 0; l < limits.size(); ++l) {
      LimitReport& m = mean.limits[l];
      const LimitReport& x = c.limits[l];
      m.limit = x.limit;
      m.aupro += x.aupro / n;
      for (std::size_t q = 0; q < 4; ++q) m.aupro_q[q] += x.aupro_q[q] / n;
      m.robust.w += x.robust.w / n;
      m.robust.s += x.robust.s / n;
      m.robust.rho += x.robust.rho / n;
    }
  }
  return report;
}

namespace {

std::string limit_tag(double limit) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", limit * 100.0);
  return buf;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> tsv_header(const std::vector<double>& limits) {
  std::vector<std::string> cols = {"category", "test_samples", "anomalous_samples", "regions",
                                   "i_auroc",  "p_auroc",      "q1_size",           "q2_size",
                                   "q3_size",  "q4_size"};
  for (double l : limits) {
    const std::string t = "@" + limit_tag(l);
    for (const char* name : {"aupro", "aupro_q1", "aupro_q2", "aupro_q3", "aupro_q4", "w", "s", "rho"}) {
      cols.push_back(name + t);
    }
  }
  return cols;
}

std::vector<std::string> tsv_row(const CategoryReport& c) {
  std::vector<std::string> row = {c.category,
                                  std::to_string(c.test_samples),
                                  std::to_string(c.anomalous_samples),
                                  std::to_string(c.regions),
                                  num(c.i_auroc),
                                  num(c.p_auroc)};
  for (double q : c.quartiles) row.push_back(num(q));
  for (const auto& l : c.limits) {
    row.push_back(num(l.aupro));
    for (double q : l.aupro_q) row.push_back(num(q));
    row.push_back(num(l.robust.w));
    row.push_back(num(l.robust.s));
    row.push_back(num(l.robust.rho));
  }
  return row;
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

}  // namespace

std::string format_report_tsv(const EvaluationReport& report) {
  std::string out = join(tsv_header(report.limits), '\t') + '\n';
  for (const auto& c : report.categories) out += join(tsv_row(c), '\t') + '\n';
  out += join(tsv_row(report.mean), '\t') + '\n';
  return out;
}

std::string format_report_table(const EvaluationReport& report) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %8s %8s", "category", "I-AUROC", "P-AUROC");
  os << buf;
  for (double l : report.limits) {
    const std::string t = limit_tag(l);
    std::snprintf(buf, sizeof buf, " | %9s %7s %7s %7s %7s %8s", ("AUPRO@" + t).c_str(), "Q1",
                  "Q2", "Q3", "Q4", ("rho@" + t).c_str());
    os << buf;
  }
  os << '\n';
  auto row = [&](const CategoryReport& c) {
    std::snprintf(buf, sizeof buf, "%-20s %8.3f %8.3f", c.category.c_str(), c.i_auroc, c.p_auroc);
    os << buf;
    for (const auto& l : c.limits) {
      std::snprintf(buf, sizeof buf, " | %9.3f %7.3f %7.3f %7.3f %7.3f %8.3f", l.aupro,
                    l.aupro_q[0], l.aupro_q[1], l.aupro_q[2], l.aupro_q[3], l.robust.rho);
      os << buf;
    }
    os << '\n';
  };
  for (const auto& c : report.categories) row(c);
  row(report.mean);
  return os.str();
}

EvaluationReport parse_report_tsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty report");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, '\t')) out.push_back(cell);
    return out;
  };
  const auto header = split(line);
  if (header.size() < 10 || (header.size() - 10) % 8 != 0 || header[0] != "category") {
    throw DataError("report header is not in the expected layout");
  }
  EvaluationReport report;
  const std::size_t n_limits = (header.size() - 10) / 8;
  for (std::size_t l = 0; l < n_limits; ++l) {
    const std::string& h = header[10 + 8 * l];
    report.limits.push_back(std::stod(h.substr(h.find('@') + 1)) / 100.0);
  }
  std::vector<CategoryReport> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw DataError("report row has the wrong column count");
    CategoryReport c;
    c.category = cells[0];
    c.test_samples = std::stoul(cells[1]);
    c.anomalous_samples = std::stoul(cells[2]);
    c.regions = std::stoul(cells[3]);
    c.i_auroc = std::stod(cells[4]);
    c.p_auroc = std::stod(cells[5]);
    for (std::size_t q = 0; q < 4; ++q) c.quartiles[q] = std::stod(cells[6 + q]);
    for (std::size_t l = 0; l < n_limits; ++l) {
      const std::size_t base = 10 + 8 * l;
      LimitReport lr;
      lr.limit = report.limits[l];
      lr.aupro = std::stod(cells[base]);
      for (std::size_t q = 0; q < 4; ++q) lr.aupro_q[q] = std::stod(cells[base + 1 + q]);
      lr.robust = {std::stod(cells[base + 5]), std::stod(cells[base + 6]),
                   std::stod(cells[base + 7])};
      c.limits.push_back(lr);
    }
    rows.push_back(std::move(c));
  }
  if (rows.empty() || rows.back().category != "mean") {
    throw DataError("report has no trailing mean row");
  }
  report.mean = std::move(rows.back());
  rows.pop_back();
  report.categories = std::move(rows);
  return report;
}

}  // namespace tsad
