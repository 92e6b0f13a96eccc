#include "mededge/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>

#include "httplib.h"
#include "json.hpp"

namespace mededge {

using nlohmann::json;

std::filesystem::path resolve_config_path(const std::optional<std::filesystem::path>& explicit_path,
                                          const std::filesystem::path& fallback) {
  if (explicit_path && !explicit_path->empty()) return *explicit_path;
  if (const char* env = std::getenv(kConfigEnv); env != nullptr && *env != '\0') return env;
  return fallback;
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  ServiceConfig cfg;
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  try {
    const json j = json::parse(in);
    cfg.symptom_model = resolve(j.at("symptom_model").get<std::string>());
    cfg.vocabulary = resolve(j.at("vocabulary").get<std::string>());
    cfg.diseases = resolve(j.at("diseases").get<std::string>());
    cfg.skin_model = resolve(j.value("skin_model", std::string()));
    cfg.treatments = resolve(j.value("treatments", std::string()));
    cfg.log = resolve(j.value("log", std::string("diagnoses.jsonl")));
    cfg.static_dir = resolve(j.value("static_dir", std::string()));
    cfg.host = j.value("host", cfg.host);
    cfg.port = j.value("port", cfg.port);
    const auto fs = j.value("fsync", std::string("every_entry"));
    if (fs == "every_entry") {
      cfg.fsync = FsyncPolicy::every_entry;
    } else if (fs == "never") {
      cfg.fsync = FsyncPolicy::never;
    } else {
      throw InputError("config: fsync must be \"every_entry\" or \"never\", got \"" + fs + "\"");
    }
  } catch (const json::exception& e) {
    throw InputError("config " + path.string() + ": " + e.what());
  }
  if (cfg.port < 0 || cfg.port > 65535) throw InputError("config: port out of range");
  return cfg;
}

DiagnosisLog::DiagnosisLog(const std::filesystem::path& path, FsyncPolicy policy) : path_(path), policy_(policy) {
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open log " + path.string() + ": " + std::strerror(errno));
}

DiagnosisLog::~DiagnosisLog() {
  if (fd_ >= 0) ::close(fd_);
}

std::uint64_t DiagnosisLog::append(std::string_view line) {
  std::string buf(line);
  buf.push_back('\n');
  std::lock_guard lock(mu_);
  const off_t start = ::lseek(fd_, 0, SEEK_END);
  if (start < 0) throw IoError("log seek failed: " + std::string(std::strerror(errno)));
  std::size_t done = 0;
  while (done < buf.size()) {
    const auto n = ::write(fd_, buf.data() + done, buf.size() - done);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      // Cut a partial line back off so the file stays line-aligned.
      if (done > 0 && ::ftruncate(fd_, start) != 0) {
        throw IoError("log write failed and could not be rolled back");
      }
      throw IoError("log write failed: " + std::string(std::strerror(errno)));
    }
    done += static_cast<std::size_t>(n);
  }
  if (policy_ == FsyncPolicy::every_entry && ::fsync(fd_) != 0) {
    throw IoError("log fsync failed: " + std::string(std::strerror(errno)));
  }
  return static_cast<std::uint64_t>(start);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

std::string api_error_json(std::string_view code, std::string_view message, const std::vector<std::string>& fields) {
  json j;
  j["error"] = {{"code", code}, {"message", message}, {"fields", fields}};
  return j.dump();
}

std::string format_probability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", p);
  return buf;
}

namespace {

ApiResponse error(int status, std::string_view code, std::string_view message,
                  const std::vector<std::string>& fields = {}) {
  return {status, "application/json", api_error_json(code, message, fields), {}};
}

ApiResponse ok(const json& body) { return {200, "application/json", body.dump(), {}}; }

}  // namespace

DiagnosisService::DiagnosisService(std::unique_ptr<ModelHandle> symptom_model,
                                   std::unique_ptr<ModelHandle> skin_model, SymptomVocabulary vocab,
                                   DiseaseCatalog catalog, std::shared_ptr<DiagnosisLog> log)
    : symptom_(std::move(symptom_model)),
      skin_(std::move(skin_model)),
      vocab_(std::move(vocab)),
      catalog_(std::move(catalog)),
      log_(std::move(log)) {
  if (!symptom_) throw InputError("a symptom model is required");
  if (static_cast<int>(vocab_.size()) != symptom_->input_dim()) {
    throw DimensionError("vocabulary has " + std::to_string(vocab_.size()) + " symptoms, model expects " +
                         std::to_string(symptom_->input_dim()));
  }
  if (static_cast<int>(catalog_.size()) != symptom_->output_dim()) {
    throw DimensionError("catalog has " + std::to_string(catalog_.size()) + " diseases, model predicts " +
                         std::to_string(symptom_->output_dim()));
  }
}

std::unique_ptr<DiagnosisService> DiagnosisService::from_config(const ServiceConfig& cfg) {
  auto symptom = load_bundle(cfg.symptom_model);
  std::unique_ptr<ModelHandle> skin;
  if (!cfg.skin_model.empty()) skin = load_bundle(cfg.skin_model);
  auto vocab = SymptomVocabulary::load(cfg.vocabulary);
  auto catalog = DiseaseCatalog::load(cfg.diseases, cfg.treatments);
  auto log = std::make_shared<DiagnosisLog>(cfg.log, cfg.fsync);
  return std::make_unique<DiagnosisService>(std::move(symptom), std::move(skin), std::move(vocab),
                                            std::move(catalog), std::move(log));
}

ApiResponse DiagnosisService::finish(ApiResponse r, const ModelHandle* model) const {
  r.headers[kFingerprintHeader] = (model ? model : symptom_.get())->fingerprint();
  return r;
}

ApiResponse DiagnosisService::list_symptoms() const {
  return finish(ok({{"symptoms", vocab_.names()}}), nullptr);
}

ApiResponse DiagnosisService::list_diseases() const {
  json list = json::array();
  for (std::size_t i = 0; i < catalog_.size(); ++i) {
    list.push_back({{"id", i}, {"name", catalog_.name(i)}, {"has_treatment", !catalog_.treatment(i).empty()}});
  }
  return finish(ok({{"diseases", std::move(list)}}), nullptr);
}

ApiResponse DiagnosisService::diagnose(std::string_view body) const {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return finish(error(400, "invalid_json", "request body is not valid JSON"), nullptr);
  }
  if (!req.is_object() || !req.contains("symptoms") || !req["symptoms"].is_array()) {
    return finish(error(422, "invalid_request", "expected {\"symptoms\": [names], \"k\": optional integer}",
                        {"symptoms"}),
                  nullptr);
  }
  std::vector<std::string> symptoms;
  for (const auto& s : req["symptoms"]) {
    if (!s.is_string()) {
      return finish(error(422, "invalid_request", "symptoms must be strings", {"symptoms"}), nullptr);
    }
    symptoms.push_back(s.get<std::string>());
  }
  int k = 5;
  if (req.contains("k")) {
    if (!req["k"].is_number_integer() || req["k"].get<long long>() < 1 || req["k"].get<long long>() > 20) {
      return finish(error(422, "invalid_k", "k must be an integer between 1 and 20", {"k"}), nullptr);
    }
    k = req["k"].get<int>();
  }
  if (symptoms.empty()) {
    return finish(error(422, "empty_symptoms", kEmptySymptomsMessage, {"symptoms"}), nullptr);
  }
  if (symptoms.size() > vocab_.size()) {
    return finish(error(422, "too_many_symptoms",
                        "at most " + std::to_string(vocab_.size()) + " symptoms may be given", {"symptoms"}),
                  nullptr);
  }

  DiagnosisReport report;
  try {
    report = mededge::diagnose(*symptom_, symptoms, vocab_, catalog_, {k, false});
  } catch (const InputError& e) {
    if (!e.offenders().empty()) return finish(error(422, "unknown_symptom", e.what(), e.offenders()), nullptr);
    return finish(error(422, "invalid_request", e.what()), nullptr);
  }

  json results = json::array();
  json logged = json::array();
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    const auto prob = format_probability(e.probability);
    results.push_back({{"rank", i + 1}, {"disease_id", e.disease_id}, {"name", e.name}, {"probability", prob},
                       {"treatment", e.treatment}});
    logged.push_back({{"disease_id", e.disease_id}, {"name", e.name}, {"probability", prob}});
  }
  json out = {{"fingerprint", report.fingerprint}, {"symptoms", report.symptoms}, {"k", k},
              {"results", std::move(results)}};

  if (log_) {
    json entry = {{"timestamp", utc_timestamp()},
                  {"request", {{"symptoms", report.symptoms}, {"k", k}}},
                  {"results", std::move(logged)},
                  {"fingerprint", report.fingerprint}};
    try {
      log_->append(entry.dump());
    } catch (const IoError& e) {
      return finish(error(500, "log_write_failed", e.what()), nullptr);
    }
  }
  return finish(ok(out), nullptr);
}

ApiResponse DiagnosisService::classify_skin(std::string_view body, std::string_view content_type) const {
  if (!skin_) return finish(error(503, "model_unavailable", "no skin model is loaded"), nullptr);
  const auto& in = skin_->graph().input_shape;
  const std::string expected = "expected a binary PPM (P6) image, " + std::to_string(in.width) + "x" +
                               std::to_string(in.height) + " pixels, maxval 255, sent as application/octet-stream";
  if (!content_type.empty() && content_type != "application/octet-stream") {
    return finish(error(415, "unsupported_media_type", expected, {"content_type"}), skin_.get());
  }
  std::vector<ClassScore> scores;
  try {
    const Image img = decode_ppm(std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
    scores = classify_image(*skin_, img);
  } catch (const InputError&) {
    return finish(error(415, "unsupported_media_type", expected, {"image"}), skin_.get());
  }
  json results = json::array();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    results.push_back({{"rank", i + 1}, {"class_id", scores[i].class_id}, {"name", scores[i].name},
                       {"probability", format_probability(scores[i].probability)}});
  }
  return finish(ok({{"fingerprint", skin_->fingerprint()}, {"results", std::move(results)}}), skin_.get());
}

ApiResponse DiagnosisService::health() const {
  json models = {{"symptom", symptom_->fingerprint()}};
  models["skin"] = skin_ ? json(skin_->fingerprint()) : json(nullptr);
  return finish(ok({{"status", "ok"}, {"models", std::move(models)}}), nullptr);
}

ApiResponse DiagnosisService::not_found(std::string_view path) const {
  return finish(error(404, "not_found", "no such endpoint: " + std::string(path)), nullptr);
}

struct HttpServer::Impl {
  const DiagnosisService& service;
  std::filesystem::path static_dir;
  httplib::Server server;
};

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(const DiagnosisService& service, std::filesystem::path static_dir)
    : impl_(new Impl{service, std::move(static_dir), {}}) {
  auto& svr = impl_->server;
  const DiagnosisService& s = service;
  svr.Get("/api/symptoms", [&s](const httplib::Request&, httplib::Response& res) { send(res, s.list_symptoms()); });
  svr.Get("/api/diseases", [&s](const httplib::Request&, httplib::Response& res) { send(res, s.list_diseases()); });
  svr.Get("/api/health", [&s](const httplib::Request&, httplib::Response& res) { send(res, s.health()); });
  svr.Post("/api/diagnose", [&s](const httplib::Request& req, httplib::Response& res) {
    send(res, s.diagnose(req.body));
  });
  svr.Post("/api/skin", [&s](const httplib::Request& req, httplib::Response& res) {
    send(res, s.classify_skin(req.body, req.get_header_value("Content-Type")));
  });
  if (!impl_->static_dir.empty()) svr.set_mount_point("/", impl_->static_dir.string());
  svr.set_error_handler([&s](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) send(res, s.not_found(req.path));
  });
  svr.set_exception_handler([&s](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    ApiResponse r{500, "application/json", api_error_json("internal", what), {}};
    r.headers[kFingerprintHeader] = s.symptom_model().fingerprint();
    send(res, r);
  });
}

HttpServer::~HttpServer() = default;

void HttpServer::run(const std::string& host, int port, const std::function<void(int)>& on_ready) {
  auto& svr = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = svr.bind_to_any_port(host);
  } else if (!svr.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  if (on_ready) on_ready(bound);
  svr.listen_after_bind();
}

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace mededge
