#include "synthetic.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

namespace tsad::synthetic {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Teacher {
  Mat embed;                 // dim x latent
  std::vector<Mat> weights;  // one per deeper layer
  std::vector<Vec> biases;
  Mat off_manifold;          // dim x dim projector onto complement of embed
};

Teacher make_teacher(const Config& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Teacher t;
  t.embed = Mat(cfg.dim, cfg.latent_dim);
  for (Eigen::Index i = 0; i < t.embed.size(); ++i) {
    t.embed.data()[i] = n01(rng) / std::sqrt(static_cast<double>(cfg.latent_dim)) * 2.0;
  }
  for (std::size_t l = 1; l < cfg.layers.size(); ++l) {
    Mat w(cfg.dim, cfg.dim);
    Vec b(cfg.dim);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w.data()[i] = n01(rng) / std::sqrt(static_cast<double>(cfg.dim)) * 1.5;
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.3 * n01(rng);
    t.weights.push_back(std::move(w));
    t.biases.push_back(std::move(b));
  }
  const Eigen::HouseholderQR<Mat> qr(t.embed);
  const Mat q = qr.householderQ() * Mat::Identity(cfg.dim, cfg.latent_dim);
  t.off_manifold = Mat::Identity(cfg.dim, cfg.dim) - q * q.transpose();
  return t;
}

// Tokens of a normalised Transformer layer have roughly constant length.
void fix_row_norms(Mat& m) {
  const double target = std::sqrt(static_cast<double>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) *= target / m.row(i).norm();
}

struct Disk {
  double cy, cx, radius;  // padded pixel coordinates
};

struct ImageFeatures {
  std::vector<Mat> layers;  // N x dim each
  std::vector<Disk> disks;
};

ImageFeatures make_image(const Config& cfg, const Teacher& t, bool anomalous,
                         std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::uint32_t g = cfg.grid;
  const double side = static_cast<double>(g * cfg.patch_size);
  const Eigen::Index n = static_cast<Eigen::Index>(g) * g;

  // Smooth latent field: a few plane waves with per-image phases.
  std::vector<double> phase(cfg.latent_dim), fy(cfg.latent_dim), fx(cfg.latent_dim);
  for (std::uint32_t l = 0; l < cfg.latent_dim; ++l) {
    phase[l] = 2 * std::numbers::pi * u01(rng);
    fy[l] = 0.5 + 1.5 * u01(rng);
    fx[l] = 0.5 + 1.5 * u01(rng);
  }
  Mat fj(n, cfg.dim);
  for (std::uint32_t r = 0; r < g; ++r) {
    for (std::uint32_t c = 0; c < g; ++c) {
      Vec z(cfg.latent_dim);
      for (std::uint32_t l = 0; l < cfg.latent_dim; ++l) {
        const double y = (r + 0.5) / g;
        const double x = (c + 0.5) / g;
        z[l] = std::sin(2 * std::numbers::pi * (fy[l] * y + fx[l] * x) + phase[l]);
      }
      Vec f = t.embed * z;
      for (Eigen::Index d = 0; d < f.size(); ++d) f[d] += 0.02 * n01(rng);
      fj.row(r * g + c) = f.transpose();
    }
  }

  fix_row_norms(fj);

  ImageFeatures out;
  if (anomalous) {
    const int blobs = u01(rng) < 0.3 ? 2 : 1;
    for (int b = 0; b < blobs; ++b) {
      // Log-uniform radius gives a wide spread of region sizes.
      const double radius = cfg.min_radius *
                            std::pow(cfg.max_radius / cfg.min_radius, u01(rng));
      const double margin = radius + cfg.pad + 1.0;
      const Disk d{margin + (side - 2 * margin) * u01(rng), margin + (side - 2 * margin) * u01(rng),
                   radius};
      Vec dir(cfg.dim);
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = n01(rng);
      dir = t.off_manifold * dir;
      dir.normalize();
      for (std::uint32_t r = 0; r < g; ++r) {
        for (std::uint32_t c = 0; c < g; ++c) {
          // Fraction of the patch covered by the disk, on a 4x4 subsample.
          int inside = 0;
          for (int sy = 0; sy < 4; ++sy) {
            for (int sx = 0; sx < 4; ++sx) {
              const double py = r * cfg.patch_size + (sy + 0.5) * cfg.patch_size / 4.0;
              const double px = c * cfg.patch_size + (sx + 0.5) * cfg.patch_size / 4.0;
              inside += (py - d.cy) * (py - d.cy) + (px - d.cx) * (px - d.cx) <= d.radius * d.radius;
            }
          }
          if (inside == 0) continue;
          // Saturates once a quarter of the patch is covered: a small defect
          // still dominates its token.
          const double cover = std::min(1.0, inside / 4.0);
          fj.row(r * g + c) += (cfg.anomaly_strength * std::sqrt(cover) * dir).transpose();
        }
      }
      out.disks.push_back(d);
    }
  }

  out.layers.push_back(fj);
  for (std::size_t l = 0; l < t.weights.size(); ++l) {
    Mat next = ((fj * t.weights[l].transpose()).rowwise() + t.biases[l].transpose())
                   .unaryExpr([](double v) { return 2.0 * std::tanh(v); });
    fix_row_norms(next);
    out.layers.push_back(std::move(next));
  }
  for (Mat& layer : out.layers) {
    for (std::uint32_t b = 0; b < cfg.nuisance_blobs; ++b) {
      const double cy = g * u01(rng), cx = g * u01(rng);
      const double width = 1.0 + 2.0 * u01(rng);  // in patches
      Vec dir(cfg.dim);
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = n01(rng);
      dir *= cfg.nuisance_strength / dir.norm();
      for (std::uint32_t r = 0; r < g; ++r) {
        for (std::uint32_t c = 0; c < g; ++c) {
          const double d2 = (r + 0.5 - cy) * (r + 0.5 - cy) + (c + 0.5 - cx) * (c + 0.5 - cx);
          layer.row(r * g + c) += (std::exp(-d2 / (2 * width * width)) * dir).transpose();
        }
      }
    }
  }
  return out;
}

}  // namespace

fs::path generate(const Config& cfg, const fs::path& root) {
  fs::create_directories(root / "features");
  fs::create_directories(root / "masks");
  std::mt19937_64 rng(cfg.seed);
  const Teacher teacher = make_teacher(cfg, rng);

  const std::uint32_t padded = cfg.grid * cfg.patch_size;
  const std::uint32_t orig = padded - 2 * cfg.pad;
  Manifest manifest;
  manifest.dataset_name = "synthetic";
  manifest.layer_pair = {cfg.layers.front(), cfg.layers.back()};

  auto emit = [&](const std::string& category, const std::string& name, Split split,
                  bool anomalous) {
    const ImageFeatures img = make_image(cfg, teacher, anomalous, rng);
    SampleRecord rec;
    rec.sample_id = category + "/" + name;
    rec.category = category;
    rec.split = split;
    rec.label = anomalous ? Label::kAnomalous : Label::kNominal;
    rec.image_dims = {orig, orig};
    for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
      FeatureGrid fg;
      fg.layer_index = cfg.layers[l];
      fg.grid_h = fg.grid_w = cfg.grid;
      fg.dim = cfg.dim;
      fg.patch_size = cfg.patch_size;
      fg.orig_h = fg.orig_w = orig;
      fg.pad = {cfg.pad, cfg.pad, cfg.pad, cfg.pad};
      const Mat& m = img.layers[l];
      fg.data.resize(static_cast<std::size_t>(m.size()));
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index d = 0; d < m.cols(); ++d) {
          fg.data[static_cast<std::size_t>(i * m.cols() + d)] = static_cast<float>(m(i, d));
        }
      }
      const fs::path file = root / "features" /
                            (category + "_" + name + "_L" + std::to_string(cfg.layers[l]) + ".pefg");
      write_feature_grid(fg, file);
      rec.feature_paths[cfg.layers[l]] = file;
    }
    if (anomalous) {
      Mask mask(orig, orig);
      for (std::uint32_t y = 0; y < orig; ++y) {
        for (std::uint32_t x = 0; x < orig; ++x) {
          const double py = y + cfg.pad + 0.5;
          const double px = x + cfg.pad + 0.5;
          for (const Disk& d : img.disks) {
            if ((py - d.cy) * (py - d.cy) + (px - d.cx) * (px - d.cx) <= d.radius * d.radius) {
              mask(y, x) = 1;
            }
          }
        }
      }
      const fs::path file = root / "masks" / (category + "_" + name + ".png");
      write_mask(mask, file);
      rec.mask_path = file;
    }
    manifest.samples.push_back(std::move(rec));
  };

  for (const auto& cat : cfg.categories) {
    char name[32];
    for (std::uint32_t i = 0; i < cfg.train_per_category; ++i) {
      std::snprintf(name, sizeof name, "train_%03u", i);
      emit(cat, name, Split::kTrain, false);
    }
    for (std::uint32_t i = 0; i < cfg.test_nominal_per_category; ++i) {
      std::snprintf(name, sizeof name, "good_%03u", i);
      emit(cat, name, Split::kTest, false);
    }
    for (std::uint32_t i = 0; i < cfg.test_anomalous_per_category; ++i) {
      std::snprintf(name, sizeof name, "defect_%03u", i);
      emit(cat, name, Split::kTest, true);
    }
  }
  const fs::path manifest_path = root / "manifest.json";
  save_manifest(manifest, manifest_path);
  return manifest_path;
}

}  // namespace tsad::synthetic
