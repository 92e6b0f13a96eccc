#include <cmath>

#include "doctest.h"
#include "mededge/modelpack.hpp"
#include "mededge/random.hpp"
#include "mededge/train.hpp"
#include "oracles.hpp"

using namespace mededge;

namespace {

Dataset separable(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.classes = 2;
  d.features.resize(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double sign = label ? 1.0 : -1.0;
    const auto r = static_cast<Eigen::Index>(i);
    d.features(r, 0) = static_cast<float>(sign * rng.uniform(0.5, 2.0));
    d.features(r, 1) = static_cast<float>(rng.uniform(-1.0, 1.0));
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

TEST_CASE("cross_entropy_loss") {
  const std::vector<float> hit{0, 1, 0};
  CHECK(cross_entropy_loss(std::vector<float>{0, 1, 0}, hit) == 0.0);
  std::vector<float> uniform(1537, 1.0f / 1537.0f), target(1537, 0.0f);
  target[17] = 1.0f;
  CHECK(cross_entropy_loss(uniform, target) == doctest::Approx(std::log(1537.0)).epsilon(1e-6));
  CHECK(cross_entropy_loss(uniform, target) == doctest::Approx(7.3376).epsilon(1e-4));
  CHECK(cross_entropy_loss(std::vector<float>{1, 0}, std::vector<float>{0, 1}) ==
        doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(cross_entropy_loss(std::vector<float>{0.5, 0.5}, std::vector<float>{1, 1}), InputError);
  CHECK_THROWS_AS(cross_entropy_loss(std::vector<float>{0.5, 0.5}, std::vector<float>{0, 0}), InputError);
  CHECK_THROWS_AS(cross_entropy_loss(std::vector<float>{0.5, 0.5}, std::vector<float>{1, 0, 0}), InputError);
}

TEST_CASE("presets carry the published hyperparameters") {
  const auto dnn = TrainConfig::dnn_preset();
  CHECK(dnn.epochs == 1000);
  CHECK(dnn.lr0 == 0.001);
  CHECK(dnn.lr_decay == 1.0);
  const auto cnn = TrainConfig::cnn_preset();
  CHECK(cnn.epochs == 500);
  CHECK(cnn.batch_size == 256);
  CHECK(cnn.lr0 == 0.0007);
  CHECK(cnn.lr_decay == 0.7);
  CHECK(cnn.epochs_per_decay == 2);
  CHECK(cnn.weight_decay == 0.00004);
}

TEST_CASE("lr_at_epoch") {
  const auto cnn = TrainConfig::cnn_preset();
  CHECK(lr_at_epoch(cnn, 0) == 0.0007);
  CHECK(lr_at_epoch(cnn, 1) == 0.0007);
  CHECK(lr_at_epoch(cnn, 2) == 0.00049);
  CHECK(lr_at_epoch(cnn, 5) == 0.000343);
  for (int e = 1; e < cnn.epochs; ++e) CHECK(lr_at_epoch(cnn, e) <= lr_at_epoch(cnn, e - 1));
  const auto dnn = TrainConfig::dnn_preset();
  CHECK(lr_at_epoch(dnn, 999) == 0.001);
}

TEST_CASE("adam: zero gradient and zero decay leaves parameters unchanged") {
  std::map<std::string, Tensor> params{{"w", Tensor::from_values({3}, {1.5f, -2.0f, 0.25f})}};
  const auto before = params;
  AdamState state;
  adam_step(params, {{"w", Tensor::zeros({3})}}, state, 0.01, 0.0);
  CHECK(params == before);
  CHECK(state.step == 1);
}

TEST_CASE("adam: first step moves by lr against the gradient sign") {
  for (double g : {0.3, -4.0, 1e-3}) {
    std::map<std::string, Tensor> params{{"w", Tensor::from_values({1}, {2.0f})}};
    AdamState state;
    adam_step(params, {{"w", Tensor::from_values({1}, {static_cast<float>(g)})}}, state, 0.01, 0.0);
    const double delta = params.at("w").values()[0] - 2.0;
    CHECK(delta == doctest::Approx(-0.01 * (g > 0 ? 1 : -1)).epsilon(1e-5));
  }
}

TEST_CASE("adam: two steps match a hand-unrolled trace") {
  std::map<std::string, Tensor> params{{"w", Tensor::from_values({2}, {1.0f, -1.0f})}};
  AdamState state;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g1[2] = {0.5, -0.2}, g2[2] = {0.1, 0.4};
  adam_step(params, {{"w", Tensor::from_values({2}, {0.5f, -0.2f})}}, state, lr, 0.0);
  adam_step(params, {{"w", Tensor::from_values({2}, {0.1f, 0.4f})}}, state, lr, 0.0);
  const double init[2] = {1.0, -1.0};
  for (int i = 0; i < 2; ++i) {
    const double ga = static_cast<float>(g1[i]), gb = static_cast<float>(g2[i]);
    double m = (1 - b1) * ga, v = (1 - b2) * ga * ga;
    double p = init[i] - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
    m = b1 * m + (1 - b1) * gb;
    v = b2 * v + (1 - b2) * gb * gb;
    p -= lr * (m / (1 - b1 * b1)) / (std::sqrt(v / (1 - b2 * b2)) + eps);
    CHECK(params.at("w").values()[static_cast<std::size_t>(i)] == doctest::Approx(p).epsilon(1e-6));
  }
}

TEST_CASE("adam: weight decay is an additive lr*wd*param term") {
  std::map<std::string, Tensor> params{{"w", Tensor::from_values({1}, {2.0f})}};
  AdamState state;
  adam_step(params, {{"w", Tensor::zeros({1})}}, state, 0.1, 0.5);
  CHECK(params.at("w").values()[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("adam: graph form decays weights only") {
  auto g = make_mlp({2, 2}, 1);
  g.params["dense1.bias"] = Tensor::from_values({2}, {1.0f, 1.0f});
  const auto w0 = g.params.at("dense1.weight");
  GradMap<float> zero{{"dense1.weight", MatrixX<float>::Zero(2, 2)}, {"dense1.bias", MatrixX<float>::Zero(1, 2)}};
  AdamState state;
  const auto v0 = g.version;
  adam_step(g, zero, state, 0.1, 0.5);
  CHECK(g.params.at("dense1.bias").values()[0] == 1.0f);
  CHECK(g.params.at("dense1.weight").values()[0] == doctest::Approx(w0.values()[0] * 0.95));
  CHECK(g.version == v0 + 1);
}

TEST_CASE("adam: NaN gradient aborts") {
  std::map<std::string, Tensor> params{{"w", Tensor::from_values({2}, {1.0f, 1.0f})}};
  AdamState state;
  CHECK_THROWS_AS(adam_step(params, {{"w", Tensor::from_values({2}, {0.0f, NAN})}}, state, 0.1, 0.0),
                  TrainingError);
}

TEST_CASE("train_classifier fits a separable toy set and is deterministic") {
  const auto data = separable(64, 3);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 0;
  cfg.lr0 = 0.05;
  const auto a = train_classifier(make_mlp({2, 2}, 1), data, cfg);
  CHECK(a.history.size() == 50);
  CHECK(a.history.back().accuracy == 1.0);
  int decreasing = 0;
  for (int e = 1; e <= 10; ++e) decreasing += a.history[static_cast<std::size_t>(e)].loss < a.history[static_cast<std::size_t>(e - 1)].loss;
  CHECK(decreasing >= 8);

  const auto b = train_classifier(make_mlp({2, 2}, 1), data, cfg);
  CHECK(a.history.back().loss == b.history.back().loss);
  CHECK(a.graph.params == b.graph.params);
}

TEST_CASE("train_classifier rejects empty or mismatched data") {
  Dataset empty;
  empty.classes = 2;
  empty.features.resize(0, 2);
  CHECK_THROWS_AS(train_classifier(make_mlp({2, 2}, 1), empty, {}), InputError);
  auto data = separable(8, 1);
  CHECK_THROWS_AS(train_classifier(make_mlp({3, 2}, 1), data, {}), InputError);
}

TEST_CASE("checkpoint save, load and resume reproduce uninterrupted training") {
  oracle::TempDir dir;
  const auto data = separable(96, 5);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 16;
  cfg.lr0 = 0.01;
  cfg.lr_decay = 0.7;
  cfg.epochs_per_decay = 2;
  const auto graph = make_dnn({2, 8, 2, 2, 0.15}, 4);
  const auto full = train_classifier(graph, data, cfg);

  TrainControl stop;
  stop.stop_after_epoch = 3;
  const auto half = train_classifier(graph, data, cfg, stop);
  CHECK(half.epoch == 3);
  save_checkpoint(half, dir / "half.ckpt");
  const auto loaded = load_checkpoint(dir / "half.ckpt");
  CHECK(loaded.graph.params == half.graph.params);
  CHECK(loaded.optimizer.step == half.optimizer.step);
  CHECK(loaded.history == half.history);

  TrainControl resume;
  resume.resume = &loaded;
  const auto rest = train_classifier(graph, data, cfg, resume);
  CHECK(rest.epoch == 6);
  CHECK(rest.graph.params == full.graph.params);
  CHECK(rest.history == full.history);

  TrainConfig other = cfg;
  other.lr0 = 0.02;
  CHECK_THROWS_AS(train_classifier(graph, data, other, resume), InputError);
}
