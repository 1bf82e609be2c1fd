#include "tsad/student.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numbers>
#include <optional>
#include <random>

#include "tsad/error.hpp"

namespace tsad {

const char* to_string(Distance d) { return d == Distance::kCosine ? "cosine" : "l2"; }

Distance parse_distance(const std::string& s) {
  if (s == "cosine") return Distance::kCosine;
  if (s == "l2") return Distance::kL2;
  throw UsageError("unknown distance '" + s + "' (expected cosine|l2)");
}

const char* to_string(LossReduction r) { return r == LossReduction::kMean ? "mean" : "sum"; }

LossReduction parse_loss_reduction(const std::string& s) {
  if (s == "mean") return LossReduction::kMean;
  if (s == "sum") return LossReduction::kSum;
  throw UsageError("unknown loss reduction '" + s + "' (expected mean|sum)");
}

template <typename T>
T gelu(T x) {
  return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <typename T>
MlpParams<T> MlpParams<T>::zeros(Eigen::Index d_in, Eigen::Index units, Eigen::Index d_out) {
  MlpParams p;
  p.w1 = Matrix<T>::Zero(d_in, units);
  p.w2 = Matrix<T>::Zero(units, units);
  p.w3 = Matrix<T>::Zero(units, d_out);
  p.b1 = RowVector<T>::Zero(units);
  p.b2 = RowVector<T>::Zero(units);
  p.b3 = RowVector<T>::Zero(d_out);
  return p;
}

template <typename T>
StudentNet<T> StudentNet<T>::from_params(MlpParams<T> params) {
  StudentNet net;
  net.adam.m = MlpParams<T>::zeros(params.d_in(), params.units(), params.d_out());
  net.adam.v = net.adam.m;
  net.params = std::move(params);
  return net;
}

template <typename T>
StudentNet<T> StudentNet<T>::glorot(Eigen::Index d_in, Eigen::Index units,
                                    Eigen::Index d_out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&](Matrix<T>& w) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
  };
  MlpParams<T> p = MlpParams<T>::zeros(d_in, units, d_out);
  fill(p.w1);
  fill(p.w2);
  fill(p.w3);
  return from_params(std::move(p));
}

namespace {

template <typename T>
struct Activations {
  Matrix<T> z1, a1, z2, a2, out;
};

template <typename T>
Activations<T> run_forward(const MlpParams<T>& p, const MatrixRef<T>& x) {
  if (x.cols() != p.d_in()) {
    throw DataError("student input has dimension " + std::to_string(x.cols()) +
                    ", network expects " + std::to_string(p.d_in()));
  }
  Activations<T> a;
  a.z1 = (x * p.w1).rowwise() + p.b1;
  a.a1 = a.z1.unaryExpr([](T v) { return gelu(v); });
  a.z2 = (a.a1 * p.w2).rowwise() + p.b2;
  a.a2 = a.z2.unaryExpr([](T v) { return gelu(v); });
  a.out = (a.a2 * p.w3).rowwise() + p.b3;
  return a;
}

}  // namespace

template <typename T>
Matrix<T> forward(const StudentNet<T>& net, const MatrixRef<T>& batch) {
  return run_forward(net.params, batch).out;
}

template <typename T>
T per_patch_loss(std::span<const T> pred, std::span<const T> target, Distance distance) {
  if (pred.size() != target.size()) {
    throw DataError("per_patch_loss: dimension mismatch");
  }
  using Vec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  const Vec p(pred.data(), static_cast<Eigen::Index>(pred.size()));
  const Vec t(target.data(), static_cast<Eigen::Index>(target.size()));
  if (distance == Distance::kL2) return (p - t).norm();
  const T np = p.norm();
  const T nt = t.norm();
  if (np == T(0) || nt == T(0)) return T(1);
  return T(1) - p.dot(t) / (np * nt);
}

template <typename T>
LossGradient<T> backward(const StudentNet<T>& net, const MatrixRef<T>& batch,
                         const MatrixRef<T>& targets, Distance distance,
                         LossReduction reduction) {
  const MlpParams<T>& p = net.params;
  if (targets.rows() != batch.rows() || targets.cols() != p.d_out()) {
    throw DataError("student targets have shape " + std::to_string(targets.rows()) + "x" +
                    std::to_string(targets.cols()) + ", expected " +
                    std::to_string(batch.rows()) + "x" + std::to_string(p.d_out()));
  }
  const Activations<T> a = run_forward(p, batch);
  const Eigen::Index n = batch.rows();
  const T scale = reduction == LossReduction::kMean ? T(1) / static_cast<T>(n) : T(1);

  LossGradient<T> result;
  Matrix<T> d_out(n, p.d_out());
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto pred = a.out.row(i);
    const auto tgt = targets.row(i);
    if (distance == Distance::kCosine) {
      const T np = pred.norm();
      const T nt = tgt.norm();
      if (np == T(0) || nt == T(0)) {
        total += T(1);
        d_out.row(i).setZero();
        ++result.degenerate_patches;
        continue;
      }
      const T cos = pred.dot(tgt) / (np * nt);
      total += T(1) - cos;
      d_out.row(i) = -scale * (tgt / (np * nt) - cos * pred / (np * np));
    } else {
      const auto diff = (pred - tgt).eval();
      const T nd = diff.norm();
      total += nd;
      if (nd == T(0)) {
        d_out.row(i).setZero();
      } else {
        d_out.row(i) = scale * diff / nd;
      }
    }
  }
  result.loss = total * scale;

  MlpParams<T>& g = result.grad;
  g.w3 = a.a2.transpose() * d_out;
  g.b3 = d_out.colwise().sum();
  const Matrix<T> d_z2 =
      (d_out * p.w3.transpose()).cwiseProduct(a.z2.unaryExpr([](T v) { return gelu_grad(v); }));
  g.w2 = a.a1.transpose() * d_z2;
  g.b2 = d_z2.colwise().sum();
  const Matrix<T> d_z1 =
      (d_z2 * p.w2.transpose()).cwiseProduct(a.z1.unaryExpr([](T v) { return gelu_grad(v); }));
  g.w1 = batch.transpose() * d_z1;
  g.b1 = d_z1.colwise().sum();

  g.for_each_block([](const char* name, const T* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) {
      if (!std::isfinite(data[i])) {
        throw NumericError(std::string("non-finite gradient in parameter block ") + name);
      }
    }
  });
  return result;
}

template <typename T>
void adam_step(StudentNet<T>& net, const MlpParams<T>& grad, const AdamConfig& cfg) {
  auto& st = net.adam;
  ++st.step;
  const double t = static_cast<double>(st.step);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.eps);

  // Parameter, gradient and moment blocks are visited in the same order.
  std::vector<T*> params, m, v;
  std::vector<const T*> g;
  std::vector<Eigen::Index> sizes;
  net.params.for_each_block([&](const char*, T* d, Eigen::Index n) {
    params.push_back(d);
    sizes.push_back(n);
  });
  st.m.for_each_block([&](const char*, T* d, Eigen::Index) { m.push_back(d); });
  st.v.for_each_block([&](const char*, T* d, Eigen::Index) { v.push_back(d); });
  grad.for_each_block([&](const char* name, const T* d, Eigen::Index n) {
    if (n != sizes[g.size()]) {
      throw DataError(std::string("gradient block ") + name + " has the wrong size");
    }
    g.push_back(d);
  });

  for (std::size_t b = 0; b < params.size(); ++b) {
    for (Eigen::Index i = 0; i < sizes[b]; ++i) {
      const T gi = g[b][i];
      if (!std::isfinite(gi)) throw NumericError("adam_step: non-finite gradient");
      m[b][i] = b1 * m[b][i] + (T(1) - b1) * gi;
      v[b][i] = b2 * v[b][i] + (T(1) - b2) * gi * gi;
      const T m_hat = m[b][i] / correction1;
      const T v_hat = v[b][i] / correction2;
      params[b][i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

void TrainConfig::validate() const {
  if (layer_pair.j >= layer_pair.k) throw UsageError("layer pair requires j < k");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (!(learning_rate > 0)) throw UsageError("learning rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
    throw UsageError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw UsageError("Adam eps must be > 0");
}

namespace {

struct ImagePair {
  FeatureGrid layer_j;
  FeatureGrid layer_k;
};

ImagePair load_pair(const SampleRecord& s, const LayerPair& pair) {
  ImagePair p{read_feature_grid(s.feature_paths.at(pair.j)),
              read_feature_grid(s.feature_paths.at(pair.k))};
  if (p.layer_j.num_patches() != p.layer_k.num_patches()) {
    throw DataError(s.sample_id + ": layers " + std::to_string(pair.j) + " and " +
                    std::to_string(pair.k) + " have different patch counts");
  }
  return p;
}

}  // namespace

TrainResult train(const Manifest& manifest, const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (manifest.layer_pair != config.layer_pair) {
    throw UsageError("manifest layer pair (" + std::to_string(manifest.layer_pair.j) + "," +
                     std::to_string(manifest.layer_pair.k) + ") differs from training config");
  }
  const auto train_set = manifest.select(Split::kTrain);
  if (train_set.empty()) throw DataError("manifest has no training samples");
  for (const auto* s : train_set) {
    if (s->label != Label::kNominal) {
      throw DataError(s->sample_id + ": anomalous sample in the training split");
    }
  }

  const FeatureGrid head_j = read_feature_header(train_set.front()->feature_paths.at(config.layer_pair.j));
  const FeatureGrid head_k = read_feature_header(train_set.front()->feature_paths.at(config.layer_pair.k));
  const Eigen::Index dim_j = head_j.dim;
  const Eigen::Index dim_k = head_k.dim;
  const Eigen::Index units = config.hidden_units ? config.hidden_units : dim_j;

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  result.model.config = config;
  result.model.forward_net = StudentF::glorot(dim_j, units, dim_k, rng());
  result.model.backward_net = StudentF::glorot(dim_k, units, dim_j, rng());
  StudentF& sf = result.model.forward_net;
  StudentF& sb = result.model.backward_net;
  const AdamConfig adam = config.adam();

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    // Features of the next image load while the current one trains.
    std::future<ImagePair> next =
        std::async(std::launch::async, load_pair, std::cref(*train_set[order[0]]),
                   std::cref(config.layer_pair));
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const SampleRecord& sample = *train_set[order[pos]];
      ImagePair cur = next.get();
      if (pos + 1 < order.size()) {
        next = std::async(std::launch::async, load_pair, std::cref(*train_set[order[pos + 1]]),
                          std::cref(config.layer_pair));
      }
      if (cur.layer_j.dim != dim_j || cur.layer_k.dim != dim_k) {
        throw DataError(sample.sample_id + ": embedding dimension differs from first sample");
      }
      const auto fj = as_matrix(cur.layer_j);
      const auto fk = as_matrix(cur.layer_k);
      auto context = [&](const char* net) {
        return std::string(net) + " diverged at epoch " + std::to_string(epoch) +
               ", image " + sample.sample_id;
      };
      LossGradient<float> lf;
      LossGradient<float> lb;
      try {
        lf = backward(sf, fj, fk, config.loss_distance, config.loss_reduction);
        lb = backward(sb, fk, fj, config.loss_distance, config.loss_reduction);
      } catch (const NumericError& e) {
        throw NumericError(context("student") + ": " + e.what());
      }
      if (!std::isfinite(lf.loss)) throw NumericError(context("S_F") + " (loss is NaN/Inf)");
      if (!std::isfinite(lb.loss)) throw NumericError(context("S_B") + " (loss is NaN/Inf)");
      adam_step(sf, lf.grad, adam);
      adam_step(sb, lb.grad, adam);
      log.forward_loss += lf.loss;
      log.backward_loss += lb.loss;
      log.degenerate_patches += lf.degenerate_patches + lb.degenerate_patches;
    }
    log.forward_loss /= static_cast<double>(order.size());
    log.backward_loss /= static_cast<double>(order.size());
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

#define TSAD_INSTANTIATE(T)                                                              \
  template T gelu<T>(T);                                                                 \
  template T gelu_grad<T>(T);                                                            \
  template struct MlpParams<T>;                                                          \
  template struct StudentNet<T>;                                                         \
  template Matrix<T> forward<T>(const StudentNet<T>&, const MatrixRef<T>&); \
  template T per_patch_loss<T>(std::span<const T>, std::span<const T>, Distance);        \
  template LossGradient<T> backward<T>(const StudentNet<T>&,                             \
                                       const MatrixRef<T>&,               \
                                       const MatrixRef<T>&, Distance,     \
                                       LossReduction);                                   \
  template void adam_step<T>(StudentNet<T>&, const MlpParams<T>&, const AdamConfig&);

TSAD_INSTANTIATE(float)
TSAD_INSTANTIATE(double)

#undef TSAD_INSTANTIATE

}  // namespace tsad
