#include "tsad/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tsad/error.hpp"

namespace tsad {

namespace {

using nlohmann::json;

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
         (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void check_geometry(const FeatureGrid& g, const std::string& where) {
  if (g.patch_size == 0) throw FormatError("invalid geometry", where + ": patch_size is 0");
  if (g.grid_h == 0 || g.grid_w == 0 || g.dim == 0) {
    throw FormatError("invalid geometry", where + ": empty grid");
  }
  const auto ph = std::uint64_t{g.orig_h} + g.pad.top + g.pad.bottom;
  const auto pw = std::uint64_t{g.orig_w} + g.pad.left + g.pad.right;
  if (ph % g.patch_size != 0 || pw % g.patch_size != 0) {
    std::ostringstream os;
    os << where << ": padded size " << ph << "x" << pw
       << " is not a multiple of patch size " << g.patch_size;
    throw FormatError("invalid geometry", os.str());
  }
  if (ph / g.patch_size != g.grid_h || pw / g.patch_size != g.grid_w) {
    std::ostringstream os;
    os << where << ": grid " << g.grid_h << "x" << g.grid_w
       << " does not match padded size " << ph << "x" << pw << " / "
       << g.patch_size;
    throw FormatError("invalid geometry", os.str());
  }
}

void check_finite(std::span<const float> values, const std::string& where) {
  const auto it = std::find_if(values.begin(), values.end(),
                               [](float v) { return !std::isfinite(v); });
  if (it != values.end()) {
    std::ostringstream os;
    os << where << ": element " << (it - values.begin()) << " is " << *it;
    throw FormatError("non-finite values", os.str());
  }
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

FeatureGrid parse_header(const unsigned char* p, std::size_t size,
                         const std::string& where) {
  if (size < 4 || std::memcmp(p, kFeatureMagic, 4) != 0) {
    throw FormatError("bad magic", where);
  }
  if (size < kFeatureHeaderBytes) throw FormatError("truncated header", where);
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFeatureFormatVersion) {
    throw FormatError("unsupported version",
                      where + ": version " + std::to_string(version));
  }
  FeatureGrid g;
  g.layer_index = get_u32(p + 8);
  g.grid_h = get_u32(p + 12);
  g.grid_w = get_u32(p + 16);
  g.dim = get_u32(p + 20);
  g.patch_size = get_u32(p + 24);
  g.orig_h = get_u32(p + 28);
  g.orig_w = get_u32(p + 32);
  g.pad.top = get_u32(p + 36);
  g.pad.left = get_u32(p + 40);
  g.pad.bottom = get_u32(p + 44);
  g.pad.right = get_u32(p + 48);
  check_geometry(g, where);
  return g;
}

}  // namespace

void validate_feature_grid(const FeatureGrid& grid) {
  check_geometry(grid, "feature grid");
  const std::size_t expected = grid.num_patches() * grid.dim;
  if (grid.data.size() != expected) {
    throw FormatError("invalid geometry",
                      "payload has " + std::to_string(grid.data.size()) +
                          " values, expected " + std::to_string(expected));
  }
  check_finite(grid.data, "feature grid");
}

void write_feature_grid(const FeatureGrid& grid, const fs::path& path) {
  validate_feature_grid(grid);
  std::vector<char> bytes;
  bytes.reserve(kFeatureHeaderBytes + grid.data.size() * 4);
  bytes.insert(bytes.end(), std::begin(kFeatureMagic), std::end(kFeatureMagic));
  for (std::uint32_t v :
       {kFeatureFormatVersion, grid.layer_index, grid.grid_h, grid.grid_w,
        grid.dim, grid.patch_size, grid.orig_h, grid.orig_w, grid.pad.top,
        grid.pad.left, grid.pad.bottom, grid.pad.right}) {
    put_u32(bytes, v);
  }
  for (float f : grid.data) put_u32(bytes, std::bit_cast<std::uint32_t>(f));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

FeatureGrid read_feature_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  unsigned char header[kFeatureHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kFeatureHeaderBytes);
  return parse_header(header, static_cast<std::size_t>(in.gcount()), path.string());
}

FeatureGrid read_feature_grid(const fs::path& path) {
  const auto bytes = slurp(path);
  FeatureGrid g = parse_header(bytes.data(), bytes.size(), path.string());
  const std::size_t count = g.num_patches() * g.dim;
  const std::size_t payload = bytes.size() - kFeatureHeaderBytes;
  if (payload < count * 4) {
    throw FormatError("truncated payload",
                      path.string() + ": " + std::to_string(payload) + " of " +
                          std::to_string(count * 4) + " bytes");
  }
  if (payload > count * 4) {
    throw FormatError("trailing bytes", path.string());
  }
  g.data.resize(count);
  const unsigned char* p = bytes.data() + kFeatureHeaderBytes;
  for (std::size_t i = 0; i < count; ++i) {
    g.data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  }
  check_finite(g.data, path.string());
  return g;
}

void write_score_map(const ScoreGrid& map, const fs::path& path) {
  FeatureGrid g;
  g.grid_h = static_cast<std::uint32_t>(map.rows());
  g.grid_w = static_cast<std::uint32_t>(map.cols());
  g.dim = 1;
  g.patch_size = 1;
  g.orig_h = g.grid_h;
  g.orig_w = g.grid_w;
  g.data = map.storage();
  write_feature_grid(g, path);
}

ScoreGrid read_score_map(const fs::path& path) {
  FeatureGrid g = read_feature_grid(path);
  if (g.dim != 1) {
    throw FormatError("invalid geometry", path.string() + ": score map must have dim 1");
  }
  return ScoreGrid(g.grid_h, g.grid_w, std::move(g.data));
}

const char* to_string(Split split) {
  return split == Split::kTrain ? "train" : "test";
}

const char* to_string(Label label) {
  return label == Label::kNominal ? "nominal" : "anomalous";
}

std::vector<const SampleRecord*> Manifest::select(Split split) const {
  std::vector<const SampleRecord*> out;
  for (const auto& s : samples) {
    if (s.split == split) out.push_back(&s);
  }
  return out;
}

std::vector<std::string> Manifest::categories() const {
  std::set<std::string> cats;
  for (const auto& s : samples) cats.insert(s.category);
  return {cats.begin(), cats.end()};
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + " does not parse: " + e.what());
  }

  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };

  Manifest m;
  std::vector<std::string> problems;
  try {
    m.dataset_name = doc.value("dataset_name", std::string{});
    const auto& pair = doc.at("layer_pair");
    m.layer_pair = {pair.at(0).get<std::uint32_t>(), pair.at(1).get<std::uint32_t>()};
    for (const auto& rec : doc.at("samples")) {
      SampleRecord s;
      s.sample_id = rec.at("sample_id").get<std::string>();
      s.category = rec.value("category", std::string{"default"});
      const auto split = rec.at("split").get<std::string>();
      const auto label = rec.at("label").get<std::string>();
      if (split == "train") {
        s.split = Split::kTrain;
      } else if (split == "test") {
        s.split = Split::kTest;
      } else {
        problems.push_back(s.sample_id + ": unknown split '" + split + "'");
      }
      if (label == "nominal") {
        s.label = Label::kNominal;
      } else if (label == "anomalous") {
        s.label = Label::kAnomalous;
      } else {
        problems.push_back(s.sample_id + ": unknown label '" + label + "'");
      }
      for (const auto& [layer, file] : rec.at("features").items()) {
        s.feature_paths[static_cast<std::uint32_t>(std::stoul(layer))] =
            resolve(file.get<std::string>());
      }
      if (rec.contains("mask") && !rec.at("mask").is_null()) {
        s.mask_path = resolve(rec.at("mask").get<std::string>());
      }
      const auto& dims = rec.at("image_dims");
      s.image_dims = {dims.at(0).get<std::uint32_t>(), dims.at(1).get<std::uint32_t>()};
      m.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + " is malformed: " + e.what());
  } catch (const std::invalid_argument&) {
    throw DataError("manifest " + path.string() + ": feature layer keys must be integers");
  }

  if (m.layer_pair.j >= m.layer_pair.k) {
    problems.push_back("layer_pair must satisfy j < k");
  }
  std::set<std::string> ids;
  for (const auto& s : m.samples) {
    const std::string& id = s.sample_id;
    if (!ids.insert(id).second) problems.push_back(id + ": duplicate sample_id");
    if (s.split == Split::kTrain && s.label == Label::kAnomalous) {
      problems.push_back(id + ": train split contains an anomalous sample");
    }
    if (s.label == Label::kAnomalous && !s.mask_path) {
      problems.push_back(id + ": anomalous sample without mask");
    }
    for (std::uint32_t layer : {m.layer_pair.j, m.layer_pair.k}) {
      if (!s.feature_paths.contains(layer)) {
        problems.push_back(id + ": no features for layer " + std::to_string(layer));
      }
    }
    for (const auto& [layer, file] : s.feature_paths) {
      if (!fs::exists(file)) {
        problems.push_back(id + ": missing file " + file.string());
        continue;
      }
      try {
        const FeatureGrid h = read_feature_header(file);
        if (h.layer_index != layer) {
          problems.push_back(id + ": " + file.string() + " holds layer " +
                             std::to_string(h.layer_index) + ", manifest says " +
                             std::to_string(layer));
        }
        if (h.orig_h != s.image_dims.h || h.orig_w != s.image_dims.w) {
          problems.push_back(id + ": " + file.string() +
                             " geometry disagrees with image_dims");
        }
      } catch (const Error& e) {
        problems.push_back(id + ": " + e.what());
      }
    }
    if (s.mask_path) {
      if (!fs::exists(*s.mask_path)) {
        problems.push_back(id + ": missing file " + s.mask_path->string());
      } else {
        try {
          if (read_mask_dims(*s.mask_path) != s.image_dims) {
            problems.push_back(id + ": mask dimensions differ from image_dims");
          }
        } catch (const Error& e) {
          problems.push_back(id + ": " + e.what());
        }
      }
    }
  }

  if (!problems.empty()) {
    std::ostringstream os;
    os << "manifest " << path.string() << " has " << problems.size()
       << " problem(s):";
    for (const auto& p : problems) os << "\n  " << p;
    throw DataError(os.str());
  }
  return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  auto rel = [&](const fs::path& p) {
    const fs::path abs = fs::absolute(p);
    const fs::path r = abs.lexically_relative(base);
    if (!r.empty() && *r.begin() != "..") return r.generic_string();
    return abs.generic_string();
  };
  json doc;
  doc["dataset_name"] = manifest.dataset_name;
  doc["layer_pair"] = {manifest.layer_pair.j, manifest.layer_pair.k};
  doc["samples"] = json::array();
  for (const auto& s : manifest.samples) {
    json rec;
    rec["sample_id"] = s.sample_id;
    rec["category"] = s.category;
    rec["split"] = to_string(s.split);
    rec["label"] = to_string(s.label);
    json feats = json::object();
    for (const auto& [layer, file] : s.feature_paths) feats[std::to_string(layer)] = rel(file);
    rec["features"] = feats;
    rec["mask"] = s.mask_path ? json(rel(*s.mask_path)) : json(nullptr);
    rec["image_dims"] = {s.image_dims.h, s.image_dims.w};
    doc["samples"].push_back(std::move(rec));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << '\n';
}

Manifest sample_fewshot(const Manifest& manifest, std::uint32_t shots,
                        std::uint64_t seed) {
  if (shots == 0) throw UsageError("shots must be >= 1");
  std::map<std::string, std::vector<std::size_t>> train_by_cat;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    auto& bucket = train_by_cat[s.category];
    if (s.split == Split::kTrain) bucket.push_back(i);
  }
  std::vector<bool> keep(manifest.samples.size(), false);
  std::mt19937_64 rng(seed);
  for (auto& [cat, idx] : train_by_cat) {
    if (idx.size() < shots) {
      throw DataError("category '" + cat + "' has " + std::to_string(idx.size()) +
                      " train samples, fewer than " + std::to_string(shots) + " shots");
    }
    // Partial Fisher-Yates: the first `shots` entries are a uniform sample.
    for (std::uint32_t i = 0; i < shots; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
      keep[idx[i]] = true;
    }
  }
  Manifest out;
  out.dataset_name = manifest.dataset_name;
  out.layer_pair = manifest.layer_pair;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    if (s.split == Split::kTest || keep[i]) out.samples.push_back(s);
  }
  return out;
}

}  // namespace tsad
