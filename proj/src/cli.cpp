#include "mededge/cli.hpp"

#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mededge/evalviz.hpp"
#include "mededge/infer.hpp"
#include "mededge/meddata.hpp"
#include "mededge/modelpack.hpp"
#include "mededge/random.hpp"
#include "mededge/records.hpp"
#include "mededge/service.hpp"
#include "mededge/train.hpp"
#include "mededge/tsne.hpp"

namespace mededge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::uint64_t seed = 42;
  std::string format = "text";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
  sub->add_option("--format", c.format, "Output format")
      ->check(CLI::IsMember({"text", "json"}))
      ->capture_default_str();
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v.get<double>());
    return buf;
  }
  return v.dump();
}

void emit(std::ostream& out, const Common& c, const json& result) {
  if (c.format == "json") {
    out << result.dump(2) << "\n";
    return;
  }
  for (const auto& [k, v] : result.items()) {
    if (v.is_structured()) {
      out << k << ": " << v.dump() << "\n";
    } else {
      out << k << ": " << scalar_text(v) << "\n";
    }
  }
}

void write_string(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_string(const fs::path& path) {
  const auto b = read_file(path);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

Dataset load_records(const fs::path& path, int classes) {
  auto set = read_records(path, OnCorrupt::fail);
  if (set.samples.empty()) throw InputError(path.string() + " holds no records");
  return to_dataset(set.samples, classes);
}

MatrixX<double> oracle_predictions(const SyntheticWorld& world, const Dataset& data) {
  MatrixX<double> out(static_cast<Eigen::Index>(data.size()), world.n_diseases());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    std::span<const float> x(data.features.row(r).data(), static_cast<std::size_t>(data.features.cols()));
    out.row(r) = bayes_posterior(world, x).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the result object that `emit` prints.

json cmd_gen_world(const fs::path& dir, int n_symptoms, int n_diseases, double noise, std::size_t n_train,
                   std::size_t n_test, std::uint64_t seed) {
  fs::create_directories(dir);
  const auto splits = make_symptom_splits(n_symptoms, n_diseases, n_train, n_test, seed, noise);
  save_world(splits.world, dir / "world.json");
  SymptomVocabulary::generated(n_symptoms).save(dir / "vocab.txt");
  DiseaseCatalog::generated(n_diseases, seed).save(dir / "diseases.txt", dir / "treatments.tsv");
  write_records(splits.train, dir / "train.rec");
  write_records(splits.test, dir / "test.rec");
  json r = {{"dir", dir.string()}, {"symptoms", n_symptoms}, {"diseases", n_diseases}, {"noise", noise},
            {"train", n_train}, {"test", n_test}};
  if (n_test > 0) {
    const auto test = to_dataset(splits.test, n_diseases);
    const auto oracle = oracle_predictions(splits.world, test);
    r["oracle_top1"] = topk_accuracy(oracle, test.labels, 1);
    r["oracle_top5"] = topk_accuracy(oracle, test.labels, std::min(5, n_diseases));
  }
  return r;
}

json cmd_gen_skin(const fs::path& dir, int per_class, int test_per_class, int size, bool augment,
                  std::uint64_t seed, const fs::path& ppm_dir) {
  fs::create_directories(dir);
  const auto train = generate_skin_dataset(per_class, seed, size, augment);
  const auto test = generate_skin_dataset(test_per_class, mix_seed(seed, 2), size, false);
  write_records(train, dir / "skin_train.rec");
  write_records(test, dir / "skin_test.rec");
  std::string classes;
  for (const auto& n : skin_class_names()) classes += n + "\n";
  write_string(dir / "skin_classes.txt", classes);
  if (!ppm_dir.empty()) {
    fs::create_directories(ppm_dir);
    for (int c = 0; c < kSkinClasses; ++c) {
      write_string(ppm_dir / (skin_class_names()[static_cast<std::size_t>(c)] + ".ppm"),
                   encode_ppm(render_skin_image(c, mix_seed(seed, 3), size)));
    }
  }
  return {{"dir", dir.string()}, {"classes", kSkinClasses}, {"train", train.size()}, {"test", test.size()},
          {"size", size}};
}

struct TrainOptions {
  fs::path data;
  fs::path out;
  fs::path resume;
  int epochs = 0;
  int batch = -1;
  double lr = 0.0;
  int hidden = 64;
  int layers = 4;
  int channels = 8;
  std::string preset = "desk";
};

json finish_training(const Checkpoint& ckpt, const fs::path& out) {
  save_checkpoint(ckpt, out);
  const auto& last = ckpt.history.back();
  return {{"checkpoint", out.string()},        {"epochs", ckpt.epoch},
          {"final_loss", last.loss},           {"final_accuracy", last.accuracy},
          {"parameters", count_parameters(ckpt.graph)}};
}

void apply_overrides(TrainConfig& cfg, const TrainOptions& o, std::uint64_t seed) {
  if (o.epochs > 0) cfg.epochs = o.epochs;
  if (o.batch >= 0) cfg.batch_size = o.batch;
  if (o.lr > 0) cfg.lr0 = o.lr;
  cfg.seed = seed;
}

TrainControl progress(std::ostream& log, const TrainConfig& cfg, std::optional<Checkpoint>& resume) {
  TrainControl ctl;
  ctl.resume = resume ? &*resume : nullptr;
  ctl.on_epoch = [&log, total = cfg.epochs](const EpochLog& e) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "epoch %d/%d loss %.4f accuracy %.4f\n", e.epoch + 1, total, e.loss, e.accuracy);
    log << buf << std::flush;
  };
  return ctl;
}

json cmd_train_dnn(const TrainOptions& o, std::uint64_t seed, std::ostream& log) {
  const auto vocab = SymptomVocabulary::load(o.data / "vocab.txt");
  const auto catalog = DiseaseCatalog::load(o.data / "diseases.txt");
  const auto data = load_records(o.data / "train.rec", static_cast<int>(catalog.size()));
  DnnSpec spec{static_cast<int>(vocab.size()), o.hidden, o.layers, static_cast<int>(catalog.size()), 0.15};
  TrainConfig cfg = TrainConfig::dnn_desk();
  if (o.preset == "full") {
    cfg = TrainConfig::dnn_preset();
    spec.hidden_width = DnnSpec::full_scale().hidden_width;
    spec.n_hidden = DnnSpec::full_scale().n_hidden;
  }
  apply_overrides(cfg, o, seed);
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checkpoint(o.resume);
  auto ckpt = train_classifier(make_dnn(spec, seed), data, cfg, progress(log, cfg, resume));
  return finish_training(ckpt, o.out);
}

json cmd_train_cnn(const TrainOptions& o, std::uint64_t seed, std::ostream& log) {
  const auto data = load_records(o.data / "skin_train.rec", kSkinClasses);
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(data.features.cols()) / 3.0)));
  if (side * side * 3 != data.features.cols()) throw InputError("skin records are not square RGB images");
  CnnSpec spec;
  spec.input = {side, side, 3};
  spec.channels = o.channels;
  TrainConfig cfg = o.preset == "full" ? TrainConfig::cnn_preset() : TrainConfig::cnn_desk();
  apply_overrides(cfg, o, seed);
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checkpoint(o.resume);
  auto ckpt = train_classifier(make_skin_cnn(spec, seed), data, cfg, progress(log, cfg, resume));
  return finish_training(ckpt, o.out);
}

json summary_json(const BundleSummary& s, const fs::path& path) {
  const std::uint64_t f32_file = s.file_bytes - s.layout.blob_size + s.f32_blob_bytes;
  return {{"bundle", path.string()},
          {"fingerprint", s.fingerprint},
          {"tensors", s.layout.tensors.size()},
          {"quantized", (s.layout.flags & kQuantized) != 0},
          {"blob_bytes", s.layout.blob_size},
          {"f32_blob_bytes", s.f32_blob_bytes},
          {"file_bytes", s.file_bytes},
          {"blob_ratio", s.blob_ratio()},
          {"file_ratio", static_cast<double>(s.file_bytes) / static_cast<double>(f32_file)}};
}

json cmd_freeze(const fs::path& in, const fs::path& out) {
  const auto frozen = freeze(in);
  auto r = summary_json(pack_bundle(frozen, false, out), out);
  r["layers"] = frozen.graph.layers.size();
  r["provenance"] = frozen.provenance;
  return r;
}

json cmd_prune(const fs::path& in, const fs::path& out) {
  const auto frozen = load_frozen(in);
  const auto pruned = prune_for_inference(frozen);
  auto r = summary_json(pack_bundle(pruned, false, out), out);
  r["layers_before"] = frozen.graph.layers.size();
  r["layers_after"] = pruned.graph.layers.size();
  return r;
}

json cmd_quantize(const fs::path& in, const fs::path& out) {
  return summary_json(pack_bundle(load_frozen(in), true, out), out);
}

json cmd_pack(const fs::path& ckpt, const fs::path& out, bool quantize, bool no_prune) {
  auto frozen = freeze(ckpt);
  if (!no_prune) frozen = prune_for_inference(frozen);
  return summary_json(pack_bundle(frozen, quantize, out), out);
}

json cmd_eval(const fs::path& bundle, const fs::path& data_path, const fs::path& world_path, bool confusion) {
  const auto handle = load_bundle(bundle);
  const auto data = load_records(data_path, handle->output_dim());
  const auto probs = handle->predict(data.features);
  const auto rep = evaluate(probs, data.labels);
  json r = {{"bundle", bundle.string()}, {"fingerprint", handle->fingerprint()}, {"n", rep.n},
            {"top1", rep.top1}, {"top5", rep.top5}, {"cross_entropy", rep.mean_cross_entropy}};
  if (!world_path.empty()) {
    const auto world = load_world(world_path);
    const auto oracle = oracle_predictions(world, data);
    r["oracle_top1"] = topk_accuracy(oracle, data.labels, 1);
    r["oracle_top5"] = topk_accuracy(oracle, data.labels, std::min(5, world.n_diseases()));
  }
  if (confusion) r["confusion"] = rep.confusion;
  return r;
}

json cmd_embed(const fs::path& bundle, const fs::path& data_path, const fs::path& out, std::size_t limit) {
  const auto handle = load_bundle(bundle);
  auto data = load_records(data_path, handle->output_dim());
  if (limit > 0 && data.size() > limit) {
    data.features.conservativeResize(static_cast<Eigen::Index>(limit), Eigen::NoChange);
    data.labels.resize(limit);
  }
  const auto set = extract_embeddings(*handle, data.features, data.labels);
  write_string(out, points_csv(set.vectors, set.labels));
  return {{"out", out.string()}, {"rows", set.vectors.rows()}, {"dims", set.vectors.cols()},
          {"fingerprint", set.fingerprint}};
}

std::pair<Eigen::MatrixXd, std::vector<int>> read_points_csv(const fs::path& path, std::size_t limit) {
  std::istringstream in(read_string(path));
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line) && (limit == 0 || rows.size() < limit)) {
    ++ln;
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    try {
      while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw InputError(path.string() + ":" + std::to_string(ln) + ": not a number");
    }
    if (vals.size() < 2) throw InputError(path.string() + ":" + std::to_string(ln) + ": need values and a label");
    labels.push_back(static_cast<int>(vals.back()));
    vals.pop_back();
    if (!rows.empty() && vals.size() != rows[0].size()) {
      throw InputError(path.string() + ":" + std::to_string(ln) + ": ragged row");
    }
    rows.push_back(std::move(vals));
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return {std::move(X), std::move(labels)};
}

json cmd_tsne(const fs::path& in, const fs::path& out, const TsneConfig& cfg, std::size_t limit) {
  auto [X, labels] = read_points_csv(in, limit);
  const auto res = tsne_embed(X, cfg);
  write_string(out, points_csv<double>(res.coords, labels));
  return {{"out", out.string()},
          {"points", X.rows()},
          {"dims", cfg.out_dims},
          {"final_kl", res.kl_trace.back()},
          {"max_entropy_error", res.calibration.entropy_error.maxCoeff()},
          {"uncalibrated_points", res.calibration.flagged.size()},
          {"silhouette", silhouette_score(res.coords, labels)}};
}

json cmd_bench(const fs::path& bundle, int runs, int cold_repeats, const fs::path& data_path, std::uint64_t seed) {
  MatrixX<float> input;
  if (!data_path.empty()) {
    auto set = read_records(data_path, OnCorrupt::fail);
    if (set.samples.empty()) throw InputError(data_path.string() + " holds no records");
    std::vector<LabeledSample> first{set.samples.front()};
    first.front().label = 0;
    input = to_dataset(first, 1).features;
  } else {
    const auto h = load_bundle(bundle);
    Rng rng(seed);
    input.resize(1, h->input_dim());
    for (Eigen::Index j = 0; j < input.cols(); ++j) input(0, j) = static_cast<float>(rng.uniform());
  }
  const auto s = bench_bundle(bundle, input, runs, cold_repeats);
  return {{"bundle", bundle.string()},
          {"runs", s.n_runs},
          {"mean_ms", s.mean_ms},
          {"p50_ms", s.p50_ms},
          {"p95_ms", s.p95_ms},
          {"cold_start_mapped_ms", s.cold_start_ms},
          {"cold_start_eager_ms", s.eager_cold_start_ms},
          {"mapped_speedup", s.mapped_speedup()},
          {"load_resident_delta_bytes", s.load_resident_delta}};
}

struct VocabPaths {
  fs::path vocab, diseases, treatments;
  void fill_defaults(const fs::path& bundle) {
    const auto dir = bundle.parent_path();
    if (vocab.empty()) vocab = dir / "vocab.txt";
    if (diseases.empty()) diseases = dir / "diseases.txt";
    if (treatments.empty() && fs::exists(dir / "treatments.tsv")) treatments = dir / "treatments.tsv";
  }
};

json report_json(const DiagnosisReport& rep) {
  json results = json::array();
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    const auto& e = rep.entries[i];
    results.push_back({{"rank", i + 1}, {"disease_id", e.disease_id}, {"name", e.name},
                       {"probability", format_probability(e.probability)}, {"treatment", e.treatment}});
  }
  return {{"fingerprint", rep.fingerprint}, {"symptoms", rep.symptoms}, {"results", std::move(results)}};
}

void print_report(std::ostream& out, const DiagnosisReport& rep) {
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    const auto& e = rep.entries[i];
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu. %-28s %s  ", i + 1, e.name.c_str(), format_probability(e.probability).c_str());
    out << buf << (e.treatment.empty() ? "(no treatment on record)" : e.treatment) << "\n";
  }
}

DiagnosisReport run_diagnose(const fs::path& bundle, VocabPaths paths, const std::vector<std::string>& symptoms,
                             int k, bool allow_empty) {
  paths.fill_defaults(bundle);
  const auto handle = load_bundle(bundle);
  const auto vocab = SymptomVocabulary::load(paths.vocab);
  const auto catalog = DiseaseCatalog::load(paths.diseases, paths.treatments);
  return diagnose(*handle, symptoms, vocab, catalog, {k, allow_empty});
}

}  // namespace

// ---------------------------------------------------------------------------

std::string pipeline_smoke(std::uint64_t seed, const fs::path& dir, std::ostream& log) {
  fs::create_directories(dir);
  json report;
  report["seed"] = seed;
  std::vector<std::string> stages;
  auto stage = [&](const std::string& name) {
    stages.push_back(name);
    log << "[pipeline] " << name << "\n" << std::flush;
  };

  stage("gen-world");
  const auto world = cmd_gen_world(dir, 50, 100, 0.02, 20000, 2000, seed);
  report["oracle_top1"] = world["oracle_top1"];
  report["oracle_top5"] = world["oracle_top5"];

  stage("train-dnn");
  TrainOptions topt;
  topt.data = dir;
  topt.out = dir / "dnn.ckpt";
  std::ostringstream quiet;
  const auto trained = cmd_train_dnn(topt, seed, quiet);
  report["train"] = {{"epochs", trained["epochs"]}, {"final_loss", trained["final_loss"]},
                     {"final_accuracy", trained["final_accuracy"]}, {"parameters", trained["parameters"]}};

  stage("freeze");
  const auto frozen = cmd_freeze(dir / "dnn.ckpt", dir / "dnn.frozen.emed");
  stage("prune");
  const auto pruned = cmd_prune(dir / "dnn.frozen.emed", dir / "dnn.pruned.emed");
  report["layers_frozen"] = pruned["layers_before"];
  report["layers_pruned"] = pruned["layers_after"];
  stage("quantize");
  cmd_quantize(dir / "dnn.pruned.emed", dir / "dnn.q8.emed");
  stage("pack");
  const auto f32 = cmd_pack(dir / "dnn.ckpt", dir / "dnn.f32.emed", false, false);
  const auto q8 = cmd_pack(dir / "dnn.ckpt", dir / "dnn.emed", true, false);
  report["file_bytes_f32"] = f32["file_bytes"];
  report["file_bytes_q8"] = q8["file_bytes"];
  report["blob_ratio"] = q8["blob_ratio"];
  report["fingerprint_f32"] = f32["fingerprint"];
  report["fingerprint_q8"] = q8["fingerprint"];
  if (read_file(dir / "dnn.q8.emed") != read_file(dir / "dnn.emed")) {
    throw IntegrityError({{0, "", "quantize and pack disagree on the packed bytes"}});
  }

  stage("eval");
  const auto ef = cmd_eval(dir / "dnn.f32.emed", dir / "test.rec", {}, false);
  const auto eq = cmd_eval(dir / "dnn.emed", dir / "test.rec", {}, false);
  report["n_test"] = ef["n"];
  report["top1_f32"] = ef["top1"];
  report["top5_f32"] = ef["top5"];
  report["cross_entropy_f32"] = ef["cross_entropy"];
  report["top1_q8"] = eq["top1"];
  report["top5_q8"] = eq["top5"];
  report["cross_entropy_q8"] = eq["cross_entropy"];
  report["top5_delta"] = eq["top5"].get<double>() - ef["top5"].get<double>();

  stage("diagnose");
  const auto rep = run_diagnose(dir / "dnn.emed", {}, {"fever", "cough"}, 5, false);
  report["diagnosis"] = report_json(rep);
  report["stages"] = stages;

  const std::string text = report.dump(2) + "\n";
  write_string(dir / "report.json", text);
  return text;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mededge: offline symptom and skin-image diagnosis toolkit"};
  app.require_subcommand(1);
  Common c;

  // gen-world
  fs::path gw_dir = ".";
  int gw_symptoms = 50, gw_diseases = 100;
  double gw_noise = 0.02;
  std::size_t gw_train = 20000, gw_test = 2000;
  auto* gen_world = app.add_subcommand("gen-world", "Generate a synthetic world, vocabularies and record files");
  gen_world->add_option("--out", gw_dir, "Output directory")->capture_default_str();
  gen_world->add_option("--symptoms", gw_symptoms, "Number of symptoms (>= 10)")->capture_default_str();
  gen_world->add_option("--diseases", gw_diseases, "Number of diseases (>= 2)")->capture_default_str();
  gen_world->add_option("--noise", gw_noise, "Symptom flip probability")->capture_default_str();
  gen_world->add_option("--train", gw_train, "Training samples")->capture_default_str();
  gen_world->add_option("--test", gw_test, "Test samples")->capture_default_str();
  add_common(gen_world, c);

  // gen-skin
  fs::path gs_dir = ".", gs_ppm;
  int gs_per_class = 40, gs_test_per_class = 10, gs_size = 32;
  bool gs_no_augment = false;
  auto* gen_skin = app.add_subcommand("gen-skin", "Generate synthetic skin-texture images as record files");
  gen_skin->add_option("--out", gs_dir, "Output directory")->capture_default_str();
  gen_skin->add_option("--per-class", gs_per_class, "Base training images per class")->capture_default_str();
  gen_skin->add_option("--test-per-class", gs_test_per_class, "Test images per class")->capture_default_str();
  gen_skin->add_option("--size", gs_size, "Image side in pixels")->capture_default_str();
  gen_skin->add_flag("--no-augment", gs_no_augment, "Skip the augmented copy of each training image");
  gen_skin->add_option("--ppm-dir", gs_ppm, "Also write one P6 sample image per class here");
  add_common(gen_skin, c);

  // train-dnn / train-cnn
  TrainOptions topt;
  auto add_train = [&](CLI::App* sub, const std::string& data_help) {
    sub->add_option("--data", topt.data, data_help)->required();
    sub->add_option("--out", topt.out, "Checkpoint to write")->required();
    sub->add_option("--epochs", topt.epochs, "Epochs (default from preset)");
    sub->add_option("--batch", topt.batch, "Batch size, 0 for full batch (default from preset)");
    sub->add_option("--lr", topt.lr, "Initial learning rate (default from preset)");
    sub->add_option("--preset", topt.preset, "Hyperparameter preset")
        ->check(CLI::IsMember({"desk", "full"}))
        ->capture_default_str();
    sub->add_option("--resume", topt.resume, "Continue from this checkpoint");
    add_common(sub, c);
  };
  auto* train_dnn = app.add_subcommand("train-dnn", "Train the symptom classifier");
  add_train(train_dnn, "Directory with train.rec, vocab.txt and diseases.txt");
  train_dnn->add_option("--hidden", topt.hidden, "Hidden layer width")->capture_default_str();
  train_dnn->add_option("--layers", topt.layers, "Number of hidden layers")->capture_default_str();
  auto* train_cnn = app.add_subcommand("train-cnn", "Train the residual skin-image classifier");
  add_train(train_cnn, "Directory with skin_train.rec");
  train_cnn->add_option("--channels", topt.channels, "Convolution channels")->capture_default_str();

  // freeze / prune / quantize / pack / verify
  fs::path in_path, out_path;
  auto* freeze_cmd = app.add_subcommand("freeze", "Checkpoint -> frozen f32 bundle");
  auto* prune_cmd = app.add_subcommand("prune", "Drop dropout and fold batch norm in a frozen bundle");
  auto* quantize_cmd = app.add_subcommand("quantize", "Frozen bundle -> 8-bit bundle");
  for (auto* sub : {freeze_cmd, prune_cmd, quantize_cmd}) {
    sub->add_option("input", in_path, "Input file")->required();
    sub->add_option("output", out_path, "Output bundle")->required();
    add_common(sub, c);
  }
  bool pack_quantize = false, pack_no_prune = false;
  auto* pack_cmd = app.add_subcommand("pack", "Checkpoint -> frozen, pruned (optionally 8-bit) bundle");
  pack_cmd->add_option("checkpoint", in_path, "Training checkpoint")->required();
  pack_cmd->add_option("output", out_path, "Output bundle")->required();
  pack_cmd->add_flag("--quantize", pack_quantize, "Store weights as 8-bit");
  pack_cmd->add_flag("--no-prune", pack_no_prune, "Keep dropout and batch-norm layers");
  add_common(pack_cmd, c);

  auto* verify_cmd = app.add_subcommand("verify", "Check a bundle's structure and checksums");
  verify_cmd->add_option("bundle", in_path, "Bundle or checkpoint")->required();
  add_common(verify_cmd, c);

  // eval / embed / tsne / bench
  fs::path bundle_path, data_path, world_path;
  bool eval_confusion = false;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1/top-5 accuracy and cross-entropy on a record file");
  eval_cmd->add_option("--bundle", bundle_path, "Model bundle")->required();
  eval_cmd->add_option("--data", data_path, "Record file")->required();
  eval_cmd->add_option("--world", world_path, "world.json, adds Bayes-oracle metrics");
  eval_cmd->add_flag("--confusion", eval_confusion, "Include the confusion matrix");
  add_common(eval_cmd, c);

  std::size_t limit = 0;
  auto* embed_cmd = app.add_subcommand("embed", "Export final hidden-layer activations as CSV");
  embed_cmd->add_option("--bundle", bundle_path, "Model bundle")->required();
  embed_cmd->add_option("--data", data_path, "Record file")->required();
  embed_cmd->add_option("--out", out_path, "CSV to write (label in last column)")->required();
  embed_cmd->add_option("--limit", limit, "Use at most this many records (0 = all)")->capture_default_str();
  add_common(embed_cmd, c);

  TsneConfig tcfg;
  std::size_t tsne_limit = 1000;
  auto* tsne_cmd = app.add_subcommand("tsne", "Project an embedding CSV with exact t-SNE");
  tsne_cmd->add_option("--in", in_path, "Embedding CSV")->required();
  tsne_cmd->add_option("--out", out_path, "Coordinate CSV to write")->required();
  tsne_cmd->add_option("--dims", tcfg.out_dims, "Output dimensions")->check(CLI::IsMember({2, 3}))->capture_default_str();
  tsne_cmd->add_option("--perplexity", tcfg.perplexity, "Perplexity")->capture_default_str();
  tsne_cmd->add_option("--iterations", tcfg.iterations, "Gradient steps")->capture_default_str();
  tsne_cmd->add_option("--limit", tsne_limit, "Use at most this many rows (0 = all)")->capture_default_str();
  add_common(tsne_cmd, c);

  int bench_runs = 100, bench_cold = 5;
  auto* bench_cmd = app.add_subcommand("bench", "Latency, cold start and load residency of a bundle");
  bench_cmd->add_option("bundle", bundle_path, "Model bundle")->required();
  bench_cmd->add_option("--runs", bench_runs, "Warm inference runs (>= 10)")->capture_default_str();
  bench_cmd->add_option("--cold-repeats", bench_cold, "Cold starts per loader")->capture_default_str();
  bench_cmd->add_option("--data", data_path, "Record file supplying the input (default: random input)");
  add_common(bench_cmd, c);

  // diagnose
  VocabPaths vpaths;
  std::vector<std::string> symptoms;
  int k = 5;
  bool allow_empty = false;
  auto* diag_cmd = app.add_subcommand("diagnose", "Top-k diagnoses for a set of symptoms");
  diag_cmd->add_option("--bundle", bundle_path, "Symptom model bundle")->required();
  diag_cmd->add_option("--symptoms", symptoms, "Comma-separated symptom names")->delimiter(',');
  diag_cmd->add_option("-k,--top", k, "Number of diagnoses")->capture_default_str();
  diag_cmd->add_flag("--allow-empty", allow_empty, "Accept an empty symptom set");
  diag_cmd->add_option("--vocab", vpaths.vocab, "Symptom vocabulary (default: vocab.txt beside the bundle)");
  diag_cmd->add_option("--diseases", vpaths.diseases, "Disease names (default: diseases.txt beside the bundle)");
  diag_cmd->add_option("--treatments", vpaths.treatments, "Treatment table (default: treatments.tsv beside the bundle)");
  add_common(diag_cmd, c);

  // serve
  std::optional<fs::path> config_path;
  ServiceConfig scfg;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP API for the diagnosis UI");
  serve_cmd->add_option("--config", config_path, "JSON config (default: $MEDEDGE_CONFIG, then mededge.json)");
  serve_cmd->add_option("--bundle", scfg.symptom_model, "Symptom model bundle (instead of a config file)");
  serve_cmd->add_option("--skin-bundle", scfg.skin_model, "Skin model bundle");
  serve_cmd->add_option("--vocab", scfg.vocabulary, "Symptom vocabulary");
  serve_cmd->add_option("--diseases", scfg.diseases, "Disease names");
  serve_cmd->add_option("--treatments", scfg.treatments, "Treatment table");
  serve_cmd->add_option("--log", scfg.log, "Diagnosis log (JSON lines)")->capture_default_str();
  serve_cmd->add_option("--static", scfg.static_dir, "Directory of web UI assets served at /");
  serve_cmd->add_option("--host", scfg.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", scfg.port, "Port (0 = ephemeral)")->capture_default_str();
  add_common(serve_cmd, c);

  // pipeline-smoke
  fs::path smoke_dir;
  auto* smoke_cmd = app.add_subcommand("pipeline-smoke", "Run the whole desk pipeline and report metrics as JSON");
  smoke_cmd->alias("pipeline_smoke");
  smoke_cmd->add_option("--dir", smoke_dir, "Working directory (default: a fresh temporary directory)");
  add_common(smoke_cmd, c);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("mededge");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_world) {
      emit(out, c, cmd_gen_world(gw_dir, gw_symptoms, gw_diseases, gw_noise, gw_train, gw_test, c.seed));
    } else if (*gen_skin) {
      emit(out, c, cmd_gen_skin(gs_dir, gs_per_class, gs_test_per_class, gs_size, !gs_no_augment, c.seed, gs_ppm));
    } else if (*train_dnn) {
      emit(out, c, cmd_train_dnn(topt, c.seed, err));
    } else if (*train_cnn) {
      emit(out, c, cmd_train_cnn(topt, c.seed, err));
    } else if (*freeze_cmd) {
      emit(out, c, cmd_freeze(in_path, out_path));
    } else if (*prune_cmd) {
      emit(out, c, cmd_prune(in_path, out_path));
    } else if (*quantize_cmd) {
      emit(out, c, cmd_quantize(in_path, out_path));
    } else if (*pack_cmd) {
      emit(out, c, cmd_pack(in_path, out_path, pack_quantize, pack_no_prune));
    } else if (*verify_cmd) {
      const auto violations = verify_bundle(in_path);
      if (!violations.empty()) {
        if (c.format == "json") {
          json list = json::array();
          for (const auto& v : violations) list.push_back({{"offset", v.offset}, {"tensor", v.tensor}, {"message", v.message}});
          out << json{{"ok", false}, {"violations", list}}.dump(2) << "\n";
        } else {
          out << "FAILED\n" << describe(violations) << "\n";
        }
        return kExitIntegrity;
      }
      const auto bytes = read_file(in_path);
      auto r = summary_json(summarize_bundle(bytes), in_path);
      if (c.format == "json") {
        r["ok"] = true;
        out << r.dump(2) << "\n";
      } else {
        out << "ok\n";
        emit(out, c, r);
      }
    } else if (*eval_cmd) {
      emit(out, c, cmd_eval(bundle_path, data_path, world_path, eval_confusion));
    } else if (*embed_cmd) {
      emit(out, c, cmd_embed(bundle_path, data_path, out_path, limit));
    } else if (*tsne_cmd) {
      tcfg.seed = c.seed;
      emit(out, c, cmd_tsne(in_path, out_path, tcfg, tsne_limit));
    } else if (*bench_cmd) {
      emit(out, c, cmd_bench(bundle_path, bench_runs, bench_cold, data_path, c.seed));
    } else if (*diag_cmd) {
      const auto rep = run_diagnose(bundle_path, vpaths, symptoms, k, allow_empty);
      if (c.format == "json") {
        out << report_json(rep).dump(2) << "\n";
      } else {
        print_report(out, rep);
      }
    } else if (*serve_cmd) {
      if (scfg.symptom_model.empty()) {
        scfg = load_service_config(resolve_config_path(config_path));
      } else {
        VocabPaths p{scfg.vocabulary, scfg.diseases, scfg.treatments};
        p.fill_defaults(scfg.symptom_model);
        scfg.vocabulary = p.vocab;
        scfg.diseases = p.diseases;
        scfg.treatments = p.treatments;
      }
      const auto service = DiagnosisService::from_config(scfg);
      HttpServer server(*service, scfg.static_dir);
      server.run(scfg.host, scfg.port, [&](int port) {
        err << "listening on http://" << scfg.host << ":" << port << "\n" << std::flush;
      });
    } else if (*smoke_cmd) {
      if (smoke_dir.empty()) {
        smoke_dir = fs::temp_directory_path() /
                    ("mededge-smoke-" + std::to_string(c.seed) + "-" + std::to_string(::getpid()));
      }
      err << "[pipeline] artifacts in " << smoke_dir.string() << "\n";
      out << pipeline_smoke(c.seed, smoke_dir, err);
    }
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace mededge
