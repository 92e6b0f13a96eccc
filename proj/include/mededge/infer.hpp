#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mededge/bundle.hpp"
#include "mededge/image.hpp"
#include "mededge/meddata.hpp"
#include "mededge/network.hpp"

namespace mededge {

enum class CachePolicy {
  none,       // q8 weights dequantised on every use; nothing copied at load
  per_layer,  // q8 weights dequantised once at load
};

enum class LoadStrategy {
  mapped,  // read-only shared file mapping
  eager,   // whole file read into an owned buffer
};

/// Verified, immutable view over a model bundle. f32 weights are read in
/// place from the file image; safe for concurrent inference.
class ModelHandle {
 public:
  ~ModelHandle();
  ModelHandle(const ModelHandle&) = delete;
  ModelHandle& operator=(const ModelHandle&) = delete;

  const BundleLayout& layout() const noexcept { return layout_; }
  const NetworkGraph& graph() const noexcept { return graph_; }
  const std::string& fingerprint() const noexcept { return fingerprint_; }
  const std::string& provenance() const noexcept { return provenance_; }
  CachePolicy cache_policy() const noexcept { return cache_; }
  LoadStrategy strategy() const noexcept { return strategy_; }
  int input_dim() const noexcept { return graph_.input_dim(); }
  int output_dim() const noexcept { return graph_.output_dim; }
  std::uint64_t blob_bytes() const noexcept { return layout_.blob_size; }

  /// Parameter source reading straight from the file image.
  const ParamSource<float>& params() const;

  /// Class probabilities, one row per input row.
  MatrixX<float> predict(const MatrixX<float>& inputs) const;
  /// Activations entering the final dense layer, one row per input row.
  MatrixX<float> embed(const MatrixX<float>& inputs) const;

 private:
  friend std::unique_ptr<ModelHandle> load_bundle(const std::filesystem::path&, CachePolicy,
                                                  LoadStrategy);
  class Source;
  ModelHandle() = default;

  std::span<const std::uint8_t> file_;
  void* map_ = nullptr;
  std::size_t map_len_ = 0;
  Bytes owned_;
  BundleLayout layout_;
  std::map<std::string, const TensorEntry*, std::less<>> index_;
  std::map<std::string, MatrixX<float>, std::less<>> cache_store_;
  NetworkGraph graph_;
  std::string fingerprint_;
  std::string provenance_;
  CachePolicy cache_ = CachePolicy::none;
  LoadStrategy strategy_ = LoadStrategy::mapped;
  std::unique_ptr<Source> source_;
};

/// Opens and fully verifies a bundle; throws IntegrityError (naming each
/// failing tensor) instead of returning a handle to a damaged file.
std::unique_ptr<ModelHandle> load_bundle(const std::filesystem::path& path,
                                         CachePolicy cache = CachePolicy::none,
                                         LoadStrategy strategy = LoadStrategy::mapped);

/// Class indices by descending probability; equal probabilities keep
/// ascending class id.
std::vector<int> rank_classes(std::span<const float> probs);

struct DiagnosisEntry {
  int disease_id = 0;
  std::string name;
  double probability = 0.0;
  std::string treatment;
};

struct DiagnosisReport {
  std::vector<DiagnosisEntry> entries;  // best first, raw softmax values
  std::vector<std::string> symptoms;    // normalised input echo
  std::string fingerprint;
};

struct DiagnoseOptions {
  int k = 5;                 // clamped to the class count
  bool allow_empty = false;  // empty symptom set returns prior-like output
};

/// Throws InputError listing unknown symptoms, or with guidance text when the
/// set is empty and allow_empty is off.
DiagnosisReport diagnose(const ModelHandle& handle, std::span<const std::string> symptoms,
                         const SymptomVocabulary& vocab, const DiseaseCatalog& catalog,
                         const DiagnoseOptions& options = {});

inline constexpr const char* kEmptySymptomsMessage =
    "select at least one symptom; pass allow_empty to get the model's prior";

struct ClassScore {
  int class_id = 0;
  std::string name;
  double probability = 0.0;
};

/// Every class, ranked. Throws InputError with the expected dimensions when
/// the image does not match the model input.
std::vector<ClassScore> classify_image(const ModelHandle& handle, const Image& image);

/// Anonymous resident memory of this process in bytes (RssAnon), or -1 when
/// the platform does not expose it.
std::int64_t private_resident_bytes();

struct LatencyStats {
  int n_runs = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::int64_t load_resident_delta = 0;  // bytes, during load_bundle
  double cold_start_ms = 0.0;            // mapped load + first inference
  double eager_cold_start_ms = 0.0;      // full-read load + first inference
  double mapped_speedup() const {
    return eager_cold_start_ms > 0 ? 1.0 - cold_start_ms / eager_cold_start_ms : 0.0;
  }
};

/// Warm-run latency of single-row inference on `input`; n_runs >= 10.
LatencyStats bench(const ModelHandle& handle, const MatrixX<float>& input, int n_runs);

/// Wall time of load_bundle plus one inference, median over `repeats`.
double cold_start_ms(const std::filesystem::path& path, LoadStrategy strategy,
                     const MatrixX<float>& input, int repeats = 5);

/// Full benchmark: cold starts for both strategies (interleaved), resident
/// growth during a mapped load, then warm runs.
LatencyStats bench_bundle(const std::filesystem::path& path, const MatrixX<float>& input,
                          int n_runs, int cold_repeats = 5);

}  // namespace mededge
