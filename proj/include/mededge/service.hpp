#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "mededge/infer.hpp"
#include "mededge/meddata.hpp"

namespace mededge {

enum class FsyncPolicy {
  every_entry,  // fsync after each appended line
  never,        // leave flushing to the OS
};

struct ServiceConfig {
  std::filesystem::path symptom_model;
  std::filesystem::path skin_model;  // optional
  std::filesystem::path vocabulary;
  std::filesystem::path diseases;
  std::filesystem::path treatments;  // optional
  std::filesystem::path log = "diagnoses.jsonl";
  std::filesystem::path static_dir;  // optional web UI assets
  std::string host = "127.0.0.1";
  int port = 8080;
  FsyncPolicy fsync = FsyncPolicy::every_entry;
};

inline constexpr const char* kConfigEnv = "MEDEDGE_CONFIG";

/// Explicit path if given, else $MEDEDGE_CONFIG, else `fallback`.
std::filesystem::path resolve_config_path(const std::optional<std::filesystem::path>& explicit_path,
                                          const std::filesystem::path& fallback = "mededge.json");

/// JSON config; relative paths resolve against the config file's directory.
ServiceConfig load_service_config(const std::filesystem::path& path);

/// Append-only JSON-lines file. Each entry goes out in one write(2) on an
/// O_APPEND descriptor, serialised by a mutex.
class DiagnosisLog {
 public:
  DiagnosisLog(const std::filesystem::path& path, FsyncPolicy policy);
  ~DiagnosisLog();
  DiagnosisLog(const DiagnosisLog&) = delete;
  DiagnosisLog& operator=(const DiagnosisLog&) = delete;

  /// Writes `line` plus a newline; returns the byte offset it starts at.
  /// Throws IoError.
  std::uint64_t append(std::string_view line);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  FsyncPolicy policy_;
  int fd_ = -1;
  std::mutex mu_;
};

/// RFC 3339 UTC timestamp with millisecond precision.
std::string utc_timestamp();

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

inline constexpr const char* kFingerprintHeader = "X-Model-Fingerprint";

/// Request handlers, independent of the HTTP transport. All methods are safe
/// to call concurrently.
class DiagnosisService {
 public:
  DiagnosisService(std::unique_ptr<ModelHandle> symptom_model, std::unique_ptr<ModelHandle> skin_model,
                   SymptomVocabulary vocab, DiseaseCatalog catalog, std::shared_ptr<DiagnosisLog> log);

  static std::unique_ptr<DiagnosisService> from_config(const ServiceConfig& config);

  ApiResponse list_symptoms() const;
  ApiResponse list_diseases() const;
  ApiResponse diagnose(std::string_view json_body) const;
  ApiResponse classify_skin(std::string_view body, std::string_view content_type) const;
  ApiResponse health() const;
  ApiResponse not_found(std::string_view path) const;

  const ModelHandle& symptom_model() const { return *symptom_; }
  const SymptomVocabulary& vocabulary() const { return vocab_; }
  const DiseaseCatalog& catalog() const { return catalog_; }

 private:
  ApiResponse finish(ApiResponse r, const ModelHandle* model) const;

  std::unique_ptr<ModelHandle> symptom_;
  std::unique_ptr<ModelHandle> skin_;
  SymptomVocabulary vocab_;
  DiseaseCatalog catalog_;
  std::shared_ptr<DiagnosisLog> log_;
};

/// Body of an ApiError response.
std::string api_error_json(std::string_view code, std::string_view message,
                           const std::vector<std::string>& fields = {});

/// Probability as a fixed 6-decimal string.
std::string format_probability(double p);

/// Serves the API (and `static_dir` at / when set) until stop() is called
/// from another thread. `on_ready` receives the bound port.
class HttpServer {
 public:
  explicit HttpServer(const DiagnosisService& service, std::filesystem::path static_dir = {});
  ~HttpServer();
  /// Blocks. Port 0 binds an ephemeral port.
  void run(const std::string& host, int port, const std::function<void(int)>& on_ready = {});
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mededge
