#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mededge/network.hpp"

namespace mededge {

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 0;  // 0 trains full-batch
  double lr0 = 0.001;
  double lr_decay = 1.0;
  int epochs_per_decay = 1;
  double weight_decay = 0.0;
  std::uint64_t seed = 42;

  /// Symptom DNN: 1000 epochs at a constant 0.001.
  static TrainConfig dnn_preset();
  /// Skin CNN: 500 epochs, batch 256, 0.0007 decayed by 0.7 every 2 epochs,
  /// weight decay 4e-5.
  static TrainConfig cnn_preset();
  /// Desk-scale symptom DNN: 60 epochs of batch 32 at 0.001, decayed by 0.7
  /// every 8 epochs.
  static TrainConfig dnn_desk();
  /// Desk-scale skin CNN: 20 epochs of batch 32 at 0.003, decayed by 0.7
  /// every 5 epochs, weight decay 4e-5.
  static TrainConfig cnn_desk();

  /// Stable digest of every field except `epochs`, so a run may be extended.
  std::uint64_t hash() const;
};

/// Step size for `epoch`: lr0 * lr_decay^floor(epoch / epochs_per_decay),
/// accumulated by repeated multiplication.
double lr_at_epoch(const TrainConfig& config, int epoch);

/// -ln(probs[target]) with the probability clamped at 1e-12.
double cross_entropy_loss(std::span<const float> probs, std::span<const float> target);

struct AdamState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected ADAM on one flat buffer, with decoupled decay:
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
/// `step` is the 1-based step count after incrementing.
template <typename S>
void adam_update(std::span<S> param, std::span<const S> grad, std::span<S> m, std::span<S> v,
                 std::int64_t step, double lr, double weight_decay, double beta1, double beta2,
                 double epsilon) {
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = beta1 * m[i] + (1.0 - beta1) * g;
    const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
    m[i] = static_cast<S>(mi);
    v[i] = static_cast<S>(vi);
    const double update = (mi / c1) / (std::sqrt(vi / c2) + epsilon) + weight_decay * param[i];
    param[i] = static_cast<S>(param[i] - lr * update);
  }
}

/// One optimizer step over a name -> tensor map. Missing gradients count as
/// zero; `decays` selects which parameters receive weight decay (all when
/// empty). Throws TrainingError on non-finite gradients.
void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, double weight_decay,
               const std::function<bool(const std::string&)>& decays = {});

/// Graph form: decays only dense/conv weights and bumps graph.version.
void adam_step(NetworkGraph& graph, const GradMap<float>& grads, AdamState& state, double lr,
               double weight_decay);

struct Dataset {
  MatrixX<float> features;
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  MatrixX<float> one_hot(std::span<const std::size_t> rows) const;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct Checkpoint {
  NetworkGraph graph;
  AdamState optimizer;
  int epoch = 0;  // epochs completed
  std::uint64_t config_hash = 0;
  std::vector<EpochLog> history;
};

struct TrainControl {
  const Checkpoint* resume = nullptr;
  int stop_after_epoch = -1;  // stop once this many epochs are complete
  std::function<void(const EpochLog&)> on_epoch;
};

/// Mini-batch cross-entropy training with ADAM. Batches come from a per-epoch
/// Fisher-Yates shuffle seeded from (seed, epoch), so a resumed run follows
/// the same trajectory as an uninterrupted one.
Checkpoint train_classifier(NetworkGraph graph, const Dataset& data, const TrainConfig& config,
                            const TrainControl& control = {});

}  // namespace mededge
