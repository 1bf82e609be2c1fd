#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "tsad/feature_store.hpp"

namespace tsad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
/// Batch argument; T is deduced from the network, not from the batch.
template <typename T>
using MatrixRef = Eigen::Ref<const Matrix<std::type_identity_t<T>>>;

enum class Distance { kCosine, kL2 };
enum class LossReduction { kMean, kSum };

const char* to_string(Distance d);
Distance parse_distance(const std::string& s);
const char* to_string(LossReduction r);
LossReduction parse_loss_reduction(const std::string& s);

/// x * Phi(x) with the exact erf-based normal CDF.
template <typename T>
T gelu(T x);
/// d/dx gelu(x) = Phi(x) + x * phi(x).
template <typename T>
T gelu_grad(T x);

/// Weights and biases of the three linear layers. Rows of a batch are patch
/// vectors: out = gelu(gelu(x W1 + b1) W2 + b2) W3 + b3.
template <typename T>
struct MlpParams {
  Matrix<T> w1, w2, w3;
  RowVector<T> b1, b2, b3;

  static MlpParams zeros(Eigen::Index d_in, Eigen::Index units, Eigen::Index d_out);
  Eigen::Index d_in() const { return w1.rows(); }
  Eigen::Index units() const { return w1.cols(); }
  Eigen::Index d_out() const { return w3.cols(); }
  Eigen::Index parameter_count() const {
    return w1.size() + w2.size() + w3.size() + b1.size() + b2.size() + b3.size();
  }
  /// Visits (name, block) for every parameter block in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    f("W1", w1.data(), w1.size());
    f("b1", b1.data(), b1.size());
    f("W2", w2.data(), w2.size());
    f("b2", b2.data(), b2.size());
    f("W3", w3.data(), w3.size());
    f("b3", b3.data(), b3.size());
  }
  template <typename F>
  void for_each_block(F&& f) const {
    const_cast<MlpParams*>(this)->for_each_block(
        [&](const char* name, T* data, Eigen::Index n) {
          f(name, static_cast<const T*>(data), n);
        });
  }
};

template <typename T>
struct AdamState {
  MlpParams<T> m;
  MlpParams<T> v;
  std::uint64_t step = 0;
};

/// One Student: a 3-layer MLP shared across patches plus its optimizer state.
template <typename T>
struct StudentNet {
  MlpParams<T> params;
  AdamState<T> adam;

  /// Glorot-uniform weights, zero biases.
  static StudentNet glorot(Eigen::Index d_in, Eigen::Index units, Eigen::Index d_out,
                           std::uint64_t seed);
  static StudentNet from_params(MlpParams<T> params);
};

template <typename T>
Matrix<T> forward(const StudentNet<T>& net, const MatrixRef<T>& batch);

/// Cosine: 1 - cos(pred, target), or 1 when either vector has zero norm.
/// L2: Euclidean norm of the difference.
template <typename T>
T per_patch_loss(std::span<const T> pred, std::span<const T> target, Distance distance);

template <typename T>
struct LossGradient {
  T loss = 0;                      // reduced over the batch
  MlpParams<T> grad;
  std::size_t degenerate_patches = 0;  // zero-norm cosine operands
};

/// Analytic gradient of the reduced per-patch loss. Throws NumericError naming
/// the first parameter block with a non-finite gradient.
template <typename T>
LossGradient<T> backward(const StudentNet<T>& net, const MatrixRef<T>& batch,
                         const MatrixRef<T>& targets, Distance distance,
                         LossReduction reduction = LossReduction::kMean);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
void adam_step(StudentNet<T>& net, const MlpParams<T>& grad, const AdamConfig& cfg);

struct TrainConfig {
  LayerPair layer_pair{8, 12};
  std::uint32_t epochs = 50;
  double learning_rate = 1e-3;
  Distance loss_distance = Distance::kCosine;
  LossReduction loss_reduction = LossReduction::kMean;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint32_t hidden_units = 0;  // 0: same as the input embedding dimension

  void validate() const;
  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }
};

struct EpochLog {
  std::uint32_t epoch = 0;
  double forward_loss = 0;   // S_F, mean over images
  double backward_loss = 0;  // S_B, mean over images
  std::size_t degenerate_patches = 0;
};

using StudentF = StudentNet<float>;

struct StudentPair {
  StudentF forward_net;   // layer j -> layer k
  StudentF backward_net;  // layer k -> layer j
  TrainConfig config;
};

struct TrainResult {
  StudentPair model;
  std::vector<EpochLog> log;
};

/// Joint training of both Students on the train split: every image is one
/// batch of all its patches and yields one Adam step per network.
/// The returned networks are those after the final epoch.
TrainResult train(const Manifest& manifest, const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

inline constexpr char kModelMagic[4] = {'T', 'S', 'S', 'M'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(const StudentPair& model, const fs::path& path);
StudentPair load_model(const fs::path& path);

/// Row-major N x D view of a grid's payload.
inline Eigen::Map<const Matrix<float>> as_matrix(const FeatureGrid& g) {
  return {g.data.data(), static_cast<Eigen::Index>(g.num_patches()),
          static_cast<Eigen::Index>(g.dim)};
}

}  // namespace tsad
