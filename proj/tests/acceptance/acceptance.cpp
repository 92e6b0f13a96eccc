// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "mededge/cli.hpp"
#include "mededge/evalviz.hpp"
#include "mededge/infer.hpp"
#include "mededge/modelpack.hpp"
#include "mededge/random.hpp"
#include "mededge/records.hpp"
#include "mededge/tsne.hpp"
#include "oracles.hpp"

using namespace mededge;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

FrozenGraph full_scale_graph() {
  FrozenGraph fg{make_dnn(DnnSpec::full_scale(), 1), "acceptance"};
  fg.graph.mode = Mode::inference;
  return prune_for_inference(fg);
}

// Independent top-k over a probability matrix, lower id wins ties.
double topk(const Eigen::MatrixXd& P, const std::vector<int>& labels, int k) {
  int hits = 0;
  for (Eigen::Index r = 0; r < P.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(P.cols()));
    for (Eigen::Index c = 0; c < P.cols(); ++c) row[static_cast<std::size_t>(c)] = P(r, c);
    hits += oracle::rank_of(row, labels[static_cast<std::size_t>(r)]) <= k;
  }
  return static_cast<double>(hits) / static_cast<double>(P.rows());
}

Outcome criterion1(const oracle::TempDir& dir) {
  const auto t0 = Clock::now();
  const auto fg = full_scale_graph();
  const auto params = count_parameters(fg.graph);
  const auto f32 = pack_bundle(fg, false, dir / "full.f32.emed");
  const auto q8 = pack_bundle(fg, true, dir / "full.q8.emed");
  const double blob_ratio = static_cast<double>(q8.layout.blob_size) / static_cast<double>(f32.layout.blob_size);
  const double file_ratio = static_cast<double>(q8.file_bytes) / static_cast<double>(f32.file_bytes);
  const double secs = seconds_since(t0);
  return {params >= 1000000 && blob_ratio >= 0.25 && blob_ratio <= 0.27 && file_ratio <= 0.30 && secs < 60.0,
          fmt("params %zu blob_ratio %.4f file_ratio %.4f time %.1fs", params, blob_ratio, file_ratio, secs)};
}

Outcome criterion2(const std::filesystem::path& smoke_dir, double pipeline_secs) {
  const auto t0 = Clock::now();
  const auto world = load_world(smoke_dir / "world.json");
  const auto test = to_dataset(sample_dataset(world, 10000, mix_seed(42, 77)), world.n_diseases());
  const auto f32 = load_bundle(smoke_dir / "dnn.f32.emed");
  const auto q8 = load_bundle(smoke_dir / "dnn.emed");
  const double a = topk(f32->predict(test.features).cast<double>(), test.labels, 5);
  const double b = topk(q8->predict(test.features).cast<double>(), test.labels, 5);
  const double secs = pipeline_secs + seconds_since(t0);
  return {test.size() == 10000 && std::abs(a - b) <= 0.02 && secs < 300.0,
          fmt("n %zu top5 f32 %.4f q8 %.4f delta %.4f time incl. training %.1fs", test.size(), a, b, std::abs(a - b), secs)};
}

Outcome criterion3(const std::filesystem::path& smoke_dir, const json& report, double pipeline_secs) {
  const auto t0 = Clock::now();
  const auto world = load_world(smoke_dir / "world.json");
  const auto set = read_records(smoke_dir / "test.rec");
  Eigen::MatrixXd post(static_cast<Eigen::Index>(set.samples.size()), world.n_diseases());
  std::vector<int> labels;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const auto p = oracle::posterior(world, std::get<SymptomVector>(set.samples[i].input));
    for (std::size_t d = 0; d < p.size(); ++d) post(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = p[d];
    labels.push_back(set.samples[i].label);
  }
  const double o1 = topk(post, labels, 1);
  const double o5 = topk(post, labels, 5);
  const auto model = load_bundle(smoke_dir / "dnn.f32.emed");
  const auto data = to_dataset(set.samples, world.n_diseases());
  const auto probs = model->predict(data.features).cast<double>().eval();
  const double m1 = topk(probs, labels, 1);
  const double m5 = topk(probs, labels, 5);
  const bool sizes = world.n_symptoms() == 50 && world.n_diseases() == 100 && labels.size() == 2000 &&
                     report["train"]["final_accuracy"].is_number();
  const double secs = pipeline_secs + seconds_since(t0);
  return {sizes && m5 >= o5 - 0.05 && m1 >= o1 - 0.08 && secs < 300.0,
          fmt("model top1 %.4f top5 %.4f oracle top1 %.4f top5 %.4f (need >= %.4f, %.4f) time %.1fs", m1, m5, o1, o5,
              o1 - 0.08, o5 - 0.05, secs)};
}

NetworkGraph random_net(Rng& rng, std::uint64_t seed) {
  for (;;) {
    NetworkGraph g;
    switch (rng.below(3)) {
      case 0: {
        std::vector<int> widths{static_cast<int>(2 + rng.below(30))};
        const auto depth = 1 + rng.below(4);
        for (std::uint64_t i = 0; i < depth; ++i) widths.push_back(static_cast<int>(2 + rng.below(40)));
        g = make_mlp(widths, seed);
        break;
      }
      case 1:
        g = make_dnn({static_cast<int>(3 + rng.below(20)), static_cast<int>(4 + rng.below(30)),
                      static_cast<int>(1 + rng.below(4)), static_cast<int>(2 + rng.below(20)), 0.15},
                     seed);
        break;
      default: {
        CnnSpec spec;
        const int side = 4 + 2 * static_cast<int>(rng.below(3));
        spec.input = {side, side, static_cast<int>(1 + rng.below(3))};
        spec.channels = static_cast<int>(2 + rng.below(3));
        spec.hidden_width = static_cast<int>(4 + rng.below(12));
        spec.classes = static_cast<int>(2 + rng.below(8));
        g = make_skin_cnn(spec, seed);
        break;
      }
    }
    if (count_parameters(g) <= 10000) return g;
  }
}

Outcome criterion4() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0, reduced = 0;
  for (int net = 0; net < 100; ++net) {
    auto g = random_net(rng, static_cast<std::uint64_t>(net) + 1);
    for (auto& [name, t] : g.params) {
      if (!name.ends_with(".bias")) continue;
      for (auto& x : t.values()) x = static_cast<float>(0.1 * rng.normal());
    }
    const Eigen::Index batch = 4;
    MatrixX<double> X(batch, g.input_dim());
    for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(g.output_dim))));
    const auto r = oracle::gradient_check(g, X, labels, static_cast<std::uint64_t>(net) + 100);
    checked += r.checked;
    reduced += r.step_reductions;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = "net " + std::to_string(net) + " " + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-3 && secs < 60.0,
          fmt("100 nets, %zu parameters checked (%zu with h reduced near a kink), max rel error %.3g (%s), time %.1fs",
              checked, reduced, worst, where.c_str(), secs)};
}

Outcome criterion5(const oracle::TempDir& dir) {
  const auto t0 = Clock::now();
  FrozenGraph fg{make_dnn({20, 24, 2, 8, 0.15}, 5), "fuzz"};
  fg.graph.mode = Mode::inference;
  const auto pruned = prune_for_inference(fg);
  std::size_t false_alarms = 0, missed = 0, misattributed = 0;
  Rng rng(555);
  const auto path = dir / "fuzz.emed";
  for (int i = 0; i < 1000; ++i) {
    const auto clean = encode_frozen(pruned, i % 2 == 1);
    const auto layout = parse_bundle(clean).layout;
    write_file(path, clean);
    if (!verify_bundle(path).empty()) ++false_alarms;

    std::uint64_t total = 0;
    for (const auto& t : layout.tensors) total += t.byte_length;
    auto pick = rng.below(total);
    const TensorEntry* victim = nullptr;
    for (const auto& t : layout.tensors) {
      if (pick < t.byte_length) {
        victim = &t;
        break;
      }
      pick -= t.byte_length;
    }
    auto bytes = clean;
    bytes[layout.blob_offset + victim->offset + pick] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    write_file(path, bytes);
    const auto found = verify_bundle(path);
    if (found.empty()) {
      ++missed;
    } else if (found.size() != 1 || found[0].tensor != victim->name) {
      ++misattributed;
    }
  }
  const double secs = seconds_since(t0);
  return {false_alarms == 0 && missed == 0 && misattributed == 0 && secs < 60.0,
          fmt("1000 weight-byte flips: %zu missed, %zu misattributed, %zu false alarms, time %.1fs", missed,
              misattributed, false_alarms, secs)};
}

Outcome criterion6(const oracle::TempDir& dir) {
  const auto t0 = Clock::now();
  const auto path = dir / "full.f32.emed";
  const MatrixX<float> x = MatrixX<float>::Zero(1, DnnSpec::full_scale().input_dim);
  const std::int64_t before = private_resident_bytes();
  const auto h = load_bundle(path, CachePolicy::none, LoadStrategy::mapped);
  const std::int64_t after = private_resident_bytes();
  const double blob = static_cast<double>(h->blob_bytes());
  const double growth = static_cast<double>(after - before);
  const double mapped = cold_start_ms(path, LoadStrategy::mapped, x, 7);
  const double eager = cold_start_ms(path, LoadStrategy::eager, x, 7);
  const double secs = seconds_since(t0);
  return {before >= 0 && blob >= 20e6 && growth < 0.10 * blob && mapped < eager && secs < 60.0,
          fmt("blob %.1f MB, RssAnon growth %.2f MB (%.2f%%), cold start mapped %.1f ms eager %.1f ms, time %.1fs",
              blob / 1e6, growth / 1e6, 100.0 * growth / blob, mapped, eager, secs)};
}

Outcome criterion7() {
  const auto cfg = TrainConfig::cnn_preset();
  const double a = lr_at_epoch(cfg, 0), b = lr_at_epoch(cfg, 2), c = lr_at_epoch(cfg, 5);
  return {a == 0.0007 && b == 0.00049 && c == 0.000343, fmt("epochs 0/2/5: %.17g %.17g %.17g", a, b, c)};
}

Outcome criterion8() {
  const auto t0 = Clock::now();
  Rng rng(8);
  Eigen::MatrixXd X(200, 10);
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < 200; ++i) {
    labels.push_back(i >= 100);
    for (Eigen::Index j = 0; j < 10; ++j) X(i, j) = rng.normal() + (i >= 100 && j == 0 ? 12.0 : 0.0);
  }
  TsneConfig cfg;
  const auto a = tsne_embed(X, cfg);
  const auto b = tsne_embed(X, cfg);
  const double secs = seconds_since(t0) / 2.0;
  const double entropy = a.calibration.entropy_error.maxCoeff();
  const double sil = oracle::silhouette(a.coords, labels);
  const bool same = a.coords == b.coords;
  return {entropy <= 1e-5 && a.calibration.flagged.empty() && sil > 0.5 && same && secs < 120.0,
          fmt("max entropy error %.2g, silhouette %.3f, deterministic %s, time per run %.1fs", entropy, sil,
              same ? "yes" : "no", secs)};
}

Outcome criterion9() {
  double worst = 0.0;
  for (int c : {2, 26, 1537}) {
    const MatrixX<double> u = MatrixX<double>::Constant(3, c, 1.0 / c);
    const double ce = mean_cross_entropy(u, std::vector<int>{0, c / 2, c - 1});
    worst = std::max(worst, std::abs(ce - std::log(static_cast<double>(c))));
  }
  Rng rng(9);
  MatrixX<double> p(500, 40);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < 500; ++i) {
    for (Eigen::Index j = 0; j < 40; ++j) p(i, j) = rng.uniform();
    p.row(i) /= p.row(i).sum();
    y.push_back(static_cast<int>(rng.below(40)));
  }
  bool monotone = true;
  double prev = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double acc = topk_accuracy(p, y, k);
    monotone = monotone && acc >= prev;
    prev = acc;
  }
  return {worst <= 1e-9 && monotone && prev == 1.0,
          fmt("max |CE - ln C| %.3g, top-k monotone %s", worst, monotone ? "yes" : "no")};
}

Outcome criterion10(const std::string& first, double first_secs, const std::string& second, double second_secs) {
  return {first == second && first_secs < 600.0 && second_secs < 600.0,
          fmt("runs %.1fs and %.1fs, reports %s", first_secs, second_secs, first == second ? "identical" : "differ")};
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main() {
  oracle::TempDir dir;
  std::vector<Outcome> results(10);

  // The pipeline runs feed criteria 2, 3 and 10.
  std::ostringstream log;
  std::string report_a, report_b;
  double secs_a = 0.0, secs_b = 0.0;
  bool pipeline_ok = true;
  std::string pipeline_error;
  try {
    auto t0 = Clock::now();
    report_a = pipeline_smoke(42, dir / "smoke_a", log);
    secs_a = seconds_since(t0);
    t0 = Clock::now();
    report_b = pipeline_smoke(42, dir / "smoke_b", log);
    secs_b = seconds_since(t0);
  } catch (const std::exception& e) {
    pipeline_ok = false;
    pipeline_error = std::string("pipeline failed: ") + e.what();
  }

  results[0] = guarded([&] { return criterion1(dir); });
  results[5] = guarded([&] { return criterion6(dir); });
  if (pipeline_ok) {
    results[1] = guarded([&] { return criterion2(dir / "smoke_a", secs_a); });
    results[2] = guarded([&] { return criterion3(dir / "smoke_a", json::parse(report_a), secs_a); });
    results[9] = guarded([&] { return criterion10(report_a, secs_a, report_b, secs_b); });
  } else {
    results[1] = results[2] = results[9] = {false, pipeline_error};
  }
  results[3] = guarded(criterion4);
  results[4] = guarded([&] { return criterion5(dir); });
  results[6] = guarded(criterion7);
  results[7] = guarded(criterion8);
  results[8] = guarded(criterion9);

  int failed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    std::cout << "criterion " << i + 1 << ": " << (results[i].pass ? "PASS" : "FAIL") << "  " << results[i].detail
              << "\n";
    failed += !results[i].pass;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << "\n";
  return failed ? 1 : 0;
}
