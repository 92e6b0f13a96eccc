#include "mededge/infer.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "mededge/modelpack.hpp"

namespace mededge {

static_assert(std::endian::native == std::endian::little,
              "bundle tensors are read in place and stored little-endian");

class ModelHandle::Source final : public ParamSource<float> {
 public:
  explicit Source(const ModelHandle& h) : h_(h) {}

  ConstMatrixMap<float> fetch(const std::string& name, MatrixX<float>& scratch) const override {
    if (auto c = h_.cache_store_.find(name); c != h_.cache_store_.end()) {
      return ConstMatrixMap<float>(c->second.data(), c->second.rows(), c->second.cols());
    }
    auto it = h_.index_.find(name);
    if (it == h_.index_.end()) throw GraphError("bundle has no tensor " + name);
    const TensorEntry& e = *it->second;
    const Eigen::Index cols = e.shape.back();
    const Eigen::Index rows = static_cast<Eigen::Index>(element_count(e.shape)) / cols;
    const std::uint8_t* p = h_.file_.data() + h_.layout_.blob_offset + e.offset;
    if (e.dtype == DType::f32) {
      return ConstMatrixMap<float>(reinterpret_cast<const float*>(p), rows, cols);
    }
    scratch.resize(rows, cols);
    float* dst = scratch.data();
    for (Eigen::Index i = 0; i < rows * cols; ++i) {
      dst[i] = e.scale * static_cast<float>(static_cast<int>(p[i]) - e.zero_point);
    }
    return ConstMatrixMap<float>(scratch.data(), rows, cols);
  }

 private:
  const ModelHandle& h_;
};

ModelHandle::~ModelHandle() {
  if (map_ != nullptr) ::munmap(map_, map_len_);
}

const ParamSource<float>& ModelHandle::params() const { return *source_; }

MatrixX<float> ModelHandle::predict(const MatrixX<float>& inputs) const {
  constexpr Eigen::Index kChunk = 256;
  MatrixX<float> out(inputs.rows(), graph_.output_dim);
  for (Eigen::Index start = 0; start < inputs.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, inputs.rows() - start);
    const MatrixX<float> chunk = inputs.middleRows(start, n);
    out.middleRows(start, n) = forward_batch<float>(graph_, *source_, chunk, 0, Mode::inference).outputs.back();
  }
  return out;
}

MatrixX<float> ModelHandle::embed(const MatrixX<float>& inputs) const {
  const std::size_t layer = embedding_layer(graph_);
  constexpr Eigen::Index kChunk = 256;
  MatrixX<float> out;
  for (Eigen::Index start = 0; start < inputs.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, inputs.rows() - start);
    const MatrixX<float> chunk = inputs.middleRows(start, n);
    auto trace = forward_batch<float>(graph_, *source_, chunk, 0, Mode::inference);
    const auto& h = trace.outputs[layer - 1];
    if (out.size() == 0) out.resize(inputs.rows(), h.cols());
    out.middleRows(start, n) = h;
  }
  return out;
}

std::unique_ptr<ModelHandle> load_bundle(const std::filesystem::path& path, CachePolicy cache,
                                         LoadStrategy strategy) {
  std::unique_ptr<ModelHandle> h(new ModelHandle());
  h->cache_ = cache;
  h->strategy_ = strategy;
  if (strategy == LoadStrategy::mapped) {
    const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw IoError("cannot stat " + path.string());
    }
    h->map_len_ = static_cast<std::size_t>(st.st_size);
    if (h->map_len_ == 0) {
      ::close(fd);
      throw IntegrityError({{0, "", "empty file"}});
    }
    void* p = ::mmap(nullptr, h->map_len_, PROT_READ, MAP_SHARED, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) throw IoError("cannot map " + path.string() + ": " + std::strerror(errno));
    h->map_ = p;
    ::madvise(p, h->map_len_, MADV_WILLNEED);
    h->file_ = std::span(static_cast<const std::uint8_t*>(p), h->map_len_);
  } else {
    h->owned_ = read_file(path);
    h->file_ = h->owned_;
  }

  auto parsed = parse_bundle(h->file_, true);
  if (!parsed.ok()) throw IntegrityError(parsed.violations);
  h->layout_ = std::move(parsed.layout);
  if (h->layout_.flags & kTrainingArtifacts) {
    throw InputError(path.string() + " is a training checkpoint; freeze and pack it first");
  }
  auto info = decode_manifest(h->layout_.manifest);
  h->graph_ = std::move(info.graph);
  h->graph_.mode = Mode::inference;
  h->provenance_ = info.provenance;
  h->fingerprint_ = fingerprint_of(h->layout_.manifest);
  for (const auto& e : h->layout_.tensors) h->index_.emplace(e.name, &e);

  std::vector<Violation> missing;
  try {
    layer_shapes(h->graph_);
  } catch (const GraphError& err) {
    throw IntegrityError({{0, "", err.what()}});
  }
  for (const auto& l : h->graph_.layers) {
    if (!l.has_params()) continue;
    std::vector<std::string> names{l.weight_name(), l.bias_name()};
    if (l.kind == LayerKind::batch_norm) {
      names.push_back(l.running_mean_name());
      names.push_back(l.running_var_name());
    }
    for (const auto& n : names) {
      if (!h->index_.contains(n)) missing.push_back({0, n, "tensor required by layer " + l.name + " is missing"});
    }
  }
  if (!missing.empty()) throw IntegrityError(missing);

  h->source_ = std::make_unique<ModelHandle::Source>(*h);
  if (cache == CachePolicy::per_layer) {
    for (const auto& e : h->layout_.tensors) {
      if (e.dtype != DType::q8) continue;
      MatrixX<float> m;
      h->source_->fetch(e.name, m);
      h->cache_store_.emplace(e.name, std::move(m));
    }
  }
  return h;
}

std::vector<int> rank_classes(std::span<const float> probs) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  return order;
}

DiagnosisReport diagnose(const ModelHandle& handle, std::span<const std::string> symptoms,
                         const SymptomVocabulary& vocab, const DiseaseCatalog& catalog,
                         const DiagnoseOptions& options) {
  if (static_cast<int>(vocab.size()) != handle.input_dim()) {
    throw DimensionError("vocabulary has " + std::to_string(vocab.size()) + " symptoms, model expects " +
                         std::to_string(handle.input_dim()));
  }
  if (static_cast<int>(catalog.size()) != handle.output_dim()) {
    throw DimensionError("catalog has " + std::to_string(catalog.size()) + " diseases, model predicts " +
                         std::to_string(handle.output_dim()));
  }
  if (options.k < 1) throw InputError("k must be at least 1");
  const auto x = encode_symptoms(symptoms, vocab);
  if (symptoms.empty() && !options.allow_empty) throw InputError(kEmptySymptomsMessage);

  DiagnosisReport report;
  report.fingerprint = handle.fingerprint();
  std::set<std::string> seen;
  for (const auto& s : symptoms) {
    auto norm = normalize_name(s);
    if (seen.insert(norm).second) report.symptoms.push_back(std::move(norm));
  }
  const MatrixX<float> input = Eigen::Map<const RowVectorX<float>>(x.data(), static_cast<Eigen::Index>(x.size()));
  const MatrixX<float> probs = handle.predict(input);
  const std::span<const float> row(probs.data(), static_cast<std::size_t>(probs.cols()));
  const auto order = rank_classes(row);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(options.k), order.size());
  for (std::size_t i = 0; i < k; ++i) {
    const int d = order[i];
    report.entries.push_back({d, catalog.name(static_cast<std::size_t>(d)), row[static_cast<std::size_t>(d)],
                              catalog.treatment(static_cast<std::size_t>(d))});
  }
  return report;
}

std::vector<ClassScore> classify_image(const ModelHandle& handle, const Image& image) {
  const auto& in = handle.graph().input_shape;
  if (image.height != in.height || image.width != in.width || image.channels != in.channels) {
    throw InputError("expected a " + std::to_string(in.height) + "x" + std::to_string(in.width) + "x" +
                     std::to_string(in.channels) + " image, got " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + "x" + std::to_string(image.channels));
  }
  const auto f = image_features(image);
  const MatrixX<float> input = Eigen::Map<const RowVectorX<float>>(f.data(), static_cast<Eigen::Index>(f.size()));
  const MatrixX<float> probs = handle.predict(input);
  const std::span<const float> row(probs.data(), static_cast<std::size_t>(probs.cols()));
  const auto& names = skin_class_names();
  std::vector<ClassScore> out;
  for (int c : rank_classes(row)) {
    const bool named = handle.output_dim() == kSkinClasses;
    out.push_back({c, named ? names[static_cast<std::size_t>(c)] : "class_" + std::to_string(c),
                   row[static_cast<std::size_t>(c)]});
  }
  return out;
}

std::int64_t private_resident_bytes() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("RssAnon:", 0) == 0) {
      return std::stoll(line.substr(8)) * 1024;
    }
  }
  return -1;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double nearest_rank(const std::vector<double>& sorted, double q) {
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

double one_cold_start(const std::filesystem::path& path, LoadStrategy strategy, const MatrixX<float>& input) {
  const auto t0 = Clock::now();
  auto h = load_bundle(path, CachePolicy::none, strategy);
  const MatrixX<float> probs = h->predict(input.topRows(1));
  const double ms = ms_since(t0);
  if (!probs.allFinite()) throw NumericError("non-finite output during cold start");
  return ms;
}

}  // namespace

LatencyStats bench(const ModelHandle& handle, const MatrixX<float>& input, int n_runs) {
  if (n_runs < 10) throw InputError("bench needs at least 10 runs");
  if (input.rows() < 1) throw InputError("bench needs an input row");
  const MatrixX<float> row = input.topRows(1);
  handle.predict(row);
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    const auto t0 = Clock::now();
    const MatrixX<float> p = handle.predict(row);
    times.push_back(ms_since(t0));
  }
  LatencyStats s;
  s.n_runs = n_runs;
  s.mean_ms = std::accumulate(times.begin(), times.end(), 0.0) / n_runs;
  std::sort(times.begin(), times.end());
  s.p50_ms = nearest_rank(times, 0.50);
  s.p95_ms = nearest_rank(times, 0.95);
  return s;
}

double cold_start_ms(const std::filesystem::path& path, LoadStrategy strategy, const MatrixX<float>& input,
                     int repeats) {
  std::vector<double> t;
  for (int i = 0; i < std::max(1, repeats); ++i) t.push_back(one_cold_start(path, strategy, input));
  return median(t);
}

LatencyStats bench_bundle(const std::filesystem::path& path, const MatrixX<float>& input, int n_runs,
                          int cold_repeats) {
  std::vector<double> mapped, eager;
  for (int i = 0; i < std::max(1, cold_repeats); ++i) {
    mapped.push_back(one_cold_start(path, LoadStrategy::mapped, input));
    eager.push_back(one_cold_start(path, LoadStrategy::eager, input));
  }
  const auto before = private_resident_bytes();
  auto handle = load_bundle(path, CachePolicy::none, LoadStrategy::mapped);
  const auto after = private_resident_bytes();
  LatencyStats s = bench(*handle, input, n_runs);
  s.load_resident_delta = after - before;
  s.cold_start_ms = median(mapped);
  s.eager_cold_start_ms = median(eager);
  return s;
}

}  // namespace mededge
