#include "mededge/train.hpp"

#include <cmath>
#include <numeric>

#include "mededge/random.hpp"

namespace mededge {

namespace {

std::uint64_t fnv_mix(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <typename T>
std::uint64_t fnv_mix(std::uint64_t h, const T& value) {
  return fnv_mix(h, &value, sizeof(T));
}

void update_running_stats(NetworkGraph& g, const ActivationTrace& trace) {
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (l.kind != LayerKind::batch_norm || trace.bn_mean[i].size() == 0) continue;
    auto& count = g.buffers.at(l.bn_count_name()).values()[0];
    // Cumulative average until it would move slower than the configured decay.
    const double alpha = std::max(1.0 - l.bn_decay, 1.0 / (static_cast<double>(count) + 1.0));
    auto mean = g.buffers.at(l.running_mean_name()).matrix();
    auto var = g.buffers.at(l.running_var_name()).matrix();
    const auto a = static_cast<float>(alpha);
    mean = (1.0f - a) * mean + a * trace.bn_mean[i];
    var = (1.0f - a) * var + a * trace.bn_var[i];
    count += 1.0f;
  }
}

}  // namespace

TrainConfig TrainConfig::dnn_preset() {
  return {.epochs = 1000, .batch_size = 0, .lr0 = 0.001, .lr_decay = 1.0, .epochs_per_decay = 1,
          .weight_decay = 0.0, .seed = 42};
}

TrainConfig TrainConfig::cnn_preset() {
  return {.epochs = 500, .batch_size = 256, .lr0 = 0.0007, .lr_decay = 0.7,
          .epochs_per_decay = 2, .weight_decay = 0.00004, .seed = 42};
}

TrainConfig TrainConfig::dnn_desk() {
  return {.epochs = 60, .batch_size = 32, .lr0 = 0.001, .lr_decay = 0.7, .epochs_per_decay = 8,
          .weight_decay = 0.0, .seed = 42};
}

TrainConfig TrainConfig::cnn_desk() {
  return {.epochs = 20, .batch_size = 32, .lr0 = 0.003, .lr_decay = 0.7, .epochs_per_decay = 5,
          .weight_decay = 0.00004, .seed = 42};
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv_mix(h, batch_size);
  h = fnv_mix(h, lr0);
  h = fnv_mix(h, lr_decay);
  h = fnv_mix(h, epochs_per_decay);
  h = fnv_mix(h, weight_decay);
  h = fnv_mix(h, seed);
  return h;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw InputError("epoch must be non-negative");
  const int periods = epoch / std::max(1, config.epochs_per_decay);
  double lr = config.lr0;
  for (int i = 0; i < periods; ++i) lr *= config.lr_decay;
  return lr;
}

double cross_entropy_loss(std::span<const float> probs, std::span<const float> target) {
  if (probs.size() != target.size() || probs.empty()) {
    throw InputError("probabilities and target must have the same non-zero length");
  }
  double total = 0.0;
  for (float p : probs) total += p;
  if (std::abs(total - 1.0) > 1e-5) throw InputError("probabilities do not sum to 1");
  std::size_t hot = target.size();
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 1.0f) {
      if (hot != target.size()) throw InputError("target is not one-hot: several indices set");
      hot = i;
    } else if (target[i] != 0.0f) {
      throw InputError("target is not one-hot: entries must be 0 or 1");
    }
  }
  if (hot == target.size()) throw InputError("target is not one-hot: no index set");
  return -std::log(std::max(static_cast<double>(probs[hot]), 1e-12));
}

void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, double weight_decay,
               const std::function<bool(const std::string&)>& decays) {
  for (const auto& [name, g] : grads) {
    const auto p = params.find(name);
    if (p == params.end() || p->second.size() != g.size()) {
      throw TrainingError("gradient for unknown or mis-shaped parameter " + name);
    }
    const auto v = g.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) {
        throw TrainingError("non-finite gradient in " + name + " at element " + std::to_string(i) +
                            " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }
  ++state.step;
  for (auto& [name, p] : params) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.shape() != p.shape()) m = Tensor::zeros(p.shape());
    if (v.shape() != p.shape()) v = Tensor::zeros(p.shape());
    std::vector<float> zero;
    std::span<const float> g;
    if (auto it = grads.find(name); it != grads.end()) {
      g = it->second.values();
    } else {
      zero.assign(p.size(), 0.0f);
      g = zero;
    }
    const double wd = (!decays || decays(name)) ? weight_decay : 0.0;
    adam_update<float>(p.values(), g, m.values(), v.values(), state.step, lr, wd, state.beta1,
                       state.beta2, state.epsilon);
  }
}

void adam_step(NetworkGraph& graph, const GradMap<float>& grads, AdamState& state, double lr,
               double weight_decay) {
  std::map<std::string, Tensor> g;
  for (const auto& [name, m] : grads) g[name] = Tensor::from_matrix(m, graph.params.at(name).shape());
  std::map<std::string, bool> decayed;
  for (const auto& l : graph.layers) {
    if (l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) decayed[l.weight_name()] = true;
  }
  adam_step(graph.params, g, state, lr, weight_decay,
            [&](const std::string& name) { return decayed.contains(name); });
  ++graph.version;
}

MatrixX<float> Dataset::one_hot(std::span<const std::size_t> rows) const {
  MatrixX<float> t = MatrixX<float>::Zero(static_cast<Eigen::Index>(rows.size()), classes);
  for (std::size_t r = 0; r < rows.size(); ++r) t(static_cast<Eigen::Index>(r), labels[rows[r]]) = 1.0f;
  return t;
}

Checkpoint train_classifier(NetworkGraph graph, const Dataset& data, const TrainConfig& config,
                            const TrainControl& control) {
  if (data.size() == 0) throw InputError("cannot train on an empty dataset");
  if (data.features.rows() != static_cast<Eigen::Index>(data.size())) {
    throw InputError("dataset features and labels disagree in length");
  }
  if (data.features.cols() != graph.input_dim() || data.classes != graph.output_dim) {
    throw InputError("dataset dimensions do not match the network (" +
                     std::to_string(data.features.cols()) + " -> " +
                     std::to_string(data.classes) + " vs " + std::to_string(graph.input_dim()) +
                     " -> " + std::to_string(graph.output_dim) + ")");
  }
  if (config.epochs <= 0) throw InputError("epochs must be positive");
  validate(graph);

  Checkpoint ckpt;
  ckpt.config_hash = config.hash();
  if (control.resume) {
    if (control.resume->config_hash != ckpt.config_hash) {
      throw InputError("checkpoint was produced with a different training configuration");
    }
    ckpt = *control.resume;
    graph = ckpt.graph;
  }
  graph.mode = Mode::training;

  const std::size_t n = data.size();
  const std::size_t batch =
      config.batch_size <= 0 ? n : std::min(n, static_cast<std::size_t>(config.batch_size));
  std::vector<std::size_t> order(n);
  MatrixX<float> x;

  for (int epoch = ckpt.epoch; epoch < config.epochs; ++epoch) {
    if (control.stop_after_epoch >= 0 && epoch >= control.stop_after_epoch) break;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    const double lr = lr_at_epoch(config, epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, b = 0; start < n; start += batch, ++b) {
      const std::size_t count = std::min(batch, n - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      x.resize(static_cast<Eigen::Index>(count), data.features.cols());
      for (std::size_t r = 0; r < count; ++r) x.row(static_cast<Eigen::Index>(r)) = data.features.row(static_cast<Eigen::Index>(rows[r]));
      const MatrixX<float> targets = data.one_hot(rows);
      const GraphParams<float> params(graph);
      const std::uint64_t batch_seed =
          mix_seed(config.seed ^ 0xD1B54A32D192ED03ULL, (static_cast<std::uint64_t>(epoch) << 32) | b);
      const auto trace = forward_batch<float>(graph, params, x, batch_seed);
      const auto& probs = trace.probabilities();
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const int label = data.labels[rows[static_cast<std::size_t>(r)]];
        loss_sum += -std::log(std::max(static_cast<double>(probs(r, label)), 1e-12));
        Eigen::Index best = 0;
        probs.row(r).maxCoeff(&best);
        if (best == label) ++correct;
      }
      const auto grads = backward_batch<float>(graph, params, trace, targets, Reduction::mean);
      update_running_stats(graph, trace);
      adam_step(graph, grads, ckpt.optimizer, lr, config.weight_decay);
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(n),
                 static_cast<double>(correct) / static_cast<double>(n)};
    if (!std::isfinite(log.loss)) throw TrainingError("training loss diverged at epoch " + std::to_string(epoch));
    ckpt.history.push_back(log);
    ckpt.epoch = epoch + 1;
    if (control.on_epoch) control.on_epoch(log);
  }
  ckpt.graph = std::move(graph);
  return ckpt;
}

}  // namespace mededge
