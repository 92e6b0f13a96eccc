#include <cstdlib>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "json.hpp"
#include "mededge/cli.hpp"
#include "mededge/service.hpp"
#include "oracles.hpp"
#include "httplib.h"

using namespace mededge;
using nlohmann::json;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mededge");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Small world, model and packed bundles produced through the CLI itself.
struct Artifacts {
  oracle::TempDir dir;
  Artifacts() {
    const auto d = dir.path().string();
    REQUIRE(cli({"gen-world", "--out", d, "--symptoms", "20", "--diseases", "8", "--train", "2000", "--test", "200"}).code == 0);
    REQUIRE(cli({"train-dnn", "--data", d, "--out", d + "/m.ckpt", "--epochs", "4", "--hidden", "32", "--layers", "2"}).code == 0);
    REQUIRE(cli({"pack", d + "/m.ckpt", d + "/m.f32.emed"}).code == 0);
    REQUIRE(cli({"pack", d + "/m.ckpt", d + "/m.emed", "--quantize"}).code == 0);
    const auto skin = train_skin();
    skin_ok = skin;
  }
  bool train_skin() {
    const auto d = dir.path().string();
    return cli({"gen-skin", "--out", d, "--per-class", "2", "--test-per-class", "1", "--size", "16", "--no-augment"}).code == 0 &&
           cli({"train-cnn", "--data", d, "--out", d + "/skin.ckpt", "--epochs", "1", "--channels", "4"}).code == 0 &&
           cli({"pack", d + "/skin.ckpt", d + "/skin.emed", "--quantize"}).code == 0;
  }
  std::filesystem::path operator/(const std::string& name) const { return dir / name; }
  bool skin_ok = false;
};

const Artifacts& artifacts() {
  static Artifacts a;
  return a;
}

std::unique_ptr<DiagnosisService> make_service(bool with_skin, const std::filesystem::path& log_path) {
  const auto& a = artifacts();
  return std::make_unique<DiagnosisService>(
      load_bundle(a / "m.emed"), with_skin ? load_bundle(a / "skin.emed") : nullptr,
      SymptomVocabulary::load(a / "vocab.txt"), DiseaseCatalog::load(a / "diseases.txt", a / "treatments.tsv"),
      std::make_shared<DiagnosisLog>(log_path, FsyncPolicy::every_entry));
}

std::string ppm(int w, int h, std::uint8_t fill) {
  Image img(h, w, 3, fill);
  return encode_ppm(img);
}

}  // namespace

TEST_CASE("diagnose endpoint contract") {
  oracle::TempDir tmp;
  const auto svc = make_service(false, tmp / "log.jsonl");
  const auto& names = svc->vocabulary().names();
  const std::string body = json{{"symptoms", {names[0], names[4]}}}.dump();

  const auto r = svc->diagnose(body);
  REQUIRE(r.status == 200);
  CHECK(r.headers.at(kFingerprintHeader) == svc->symptom_model().fingerprint());
  const auto j = json::parse(r.body);
  REQUIRE(j["results"].size() == 5);
  double prev = 2.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& e = j["results"][i];
    CHECK(e["rank"] == i + 1);
    const double p = std::stod(e["probability"].get<std::string>());
    CHECK(p <= prev);
    prev = p;
    CHECK(e["name"] == svc->catalog().name(e["disease_id"].get<std::size_t>()));
  }

  const auto again = svc->diagnose(body);
  CHECK(again.body == r.body);
  std::ifstream in(tmp / "log.jsonl");
  std::vector<json> entries;
  for (std::string line; std::getline(in, line);) entries.push_back(json::parse(line));
  REQUIRE(entries.size() == 2);
  CHECK(entries[0]["results"] == entries[1]["results"]);
  CHECK(entries[0]["fingerprint"] == svc->symptom_model().fingerprint());
  CHECK(entries[0]["request"]["symptoms"] == json{names[0], names[4]});

  const auto bad = svc->diagnose(json{{"symptoms", {"fevr"}}}.dump());
  CHECK(bad.status == 422);
  const auto err = json::parse(bad.body)["error"];
  CHECK(err["code"] == "unknown_symptom");
  CHECK(err["fields"] == json{"fevr"});

  CHECK(svc->diagnose("{not json").status == 400);
  CHECK(svc->diagnose(R"({"symptoms": []})").status == 422);
  CHECK(svc->diagnose(json{{"symptoms", {names[0]}}, {"k", 0}}.dump()).status == 422);
  CHECK(json::parse(svc->diagnose(json{{"symptoms", {names[0]}}, {"k", 3}}.dump()).body)["results"].size() == 3);

  std::size_t lines = 0;
  std::ifstream in2(tmp / "log.jsonl");
  for (std::string line; std::getline(in2, line);) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("listing and health endpoints") {
  oracle::TempDir tmp;
  const auto svc = make_service(false, tmp / "log.jsonl");
  const auto s = json::parse(svc->list_symptoms().body);
  CHECK(s["symptoms"].get<std::vector<std::string>>() == svc->vocabulary().names());
  const auto d = json::parse(svc->list_diseases().body)["diseases"];
  REQUIRE(d.size() == svc->catalog().size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d[i]["id"] == i);
    CHECK(d[i]["has_treatment"] == !svc->catalog().treatment(i).empty());
  }
  const auto h = json::parse(svc->health().body);
  CHECK(h["models"]["skin"].is_null());
  CHECK(svc->not_found("/nope").status == 404);
}

TEST_CASE("skin endpoint") {
  REQUIRE(artifacts().skin_ok);
  oracle::TempDir tmp;
  CHECK(make_service(false, tmp / "a.jsonl")->classify_skin(ppm(16, 16, 3), "application/octet-stream").status == 503);

  const auto svc = make_service(true, tmp / "b.jsonl");
  const auto ok = svc->classify_skin(ppm(16, 16, 90), "application/octet-stream");
  REQUIRE(ok.status == 200);
  CHECK(json::parse(ok.body)["results"].size() == 26);
  CHECK(ok.headers.at(kFingerprintHeader) != svc->symptom_model().fingerprint());

  const auto wrong_size = svc->classify_skin(ppm(32, 32, 90), "application/octet-stream");
  CHECK(wrong_size.status == 415);
  CHECK(json::parse(wrong_size.body)["error"]["message"].get<std::string>().find("16x16") != std::string::npos);
  CHECK(svc->classify_skin("GIF89a", "application/octet-stream").status == 415);
  CHECK(svc->classify_skin(ppm(16, 16, 90), "image/png").status == 415);
}

TEST_CASE("log appends are whole lines under contention and survive reopening") {
  oracle::TempDir tmp;
  const auto path = tmp / "log.jsonl";
  {
    DiagnosisLog log(path, FsyncPolicy::never);
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&log, t] {
        for (int i = 0; i < 200; ++i) log.append(json{{"t", t}, {"i", i}, {"pad", std::string(300, 'x')}}.dump());
      });
    }
    for (auto& th : threads) th.join();
  }
  std::size_t offset_after = 0;
  {
    DiagnosisLog log(path, FsyncPolicy::every_entry);
    offset_after = log.append(R"({"restart":true})");
  }
  std::ifstream in(path);
  std::vector<std::vector<int>> seen(8);
  std::size_t n = 0, bytes = 0;
  std::string last;
  for (std::string line; std::getline(in, line);) {
    const auto j = json::parse(line);
    ++n;
    if (j.contains("restart")) {
      CHECK(offset_after == bytes);
    } else {
      seen[j["t"].get<std::size_t>()].push_back(j["i"]);
    }
    bytes += line.size() + 1;
  }
  CHECK(n == 1601);
  for (const auto& v : seen) {
    REQUIRE(v.size() == 200);
    for (int i = 0; i < 200; ++i) CHECK(v[static_cast<std::size_t>(i)] == i);
  }
}

TEST_CASE("config path precedence and loading") {
  ::unsetenv(kConfigEnv);
  CHECK(resolve_config_path(std::nullopt, "fallback.json") == "fallback.json");
  ::setenv(kConfigEnv, "/etc/env.json", 1);
  CHECK(resolve_config_path(std::nullopt, "fallback.json") == "/etc/env.json");
  CHECK(resolve_config_path(std::filesystem::path("/x/cli.json"), "fallback.json") == "/x/cli.json");
  ::unsetenv(kConfigEnv);

  oracle::TempDir tmp;
  std::ofstream(tmp / "c.json") << R"({"symptom_model": "m.emed", "vocabulary": "/abs/v.txt", "diseases": "d.txt", "port": 9000, "fsync": "never"})";
  const auto cfg = load_service_config(tmp / "c.json");
  CHECK(cfg.symptom_model == tmp / "m.emed");
  CHECK(cfg.vocabulary == "/abs/v.txt");
  CHECK(cfg.port == 9000);
  CHECK(cfg.fsync == FsyncPolicy::never);
  CHECK(cfg.skin_model.empty());
  CHECK(cfg.log == tmp / "diagnoses.jsonl");

  std::ofstream(tmp / "bad.json") << R"({"symptom_model": "m", "vocabulary": "v", "diseases": "d", "fsync": "sometimes"})";
  CHECK_THROWS_AS(load_service_config(tmp / "bad.json"), InputError);
  CHECK_THROWS_AS(load_service_config(tmp / "missing.json"), IoError);
}

TEST_CASE("HTTP round trip on an ephemeral port") {
  oracle::TempDir tmp;
  const auto svc = make_service(false, tmp / "log.jsonl");
  std::ofstream(tmp / "index.html") << "<html>ui</html>";
  HttpServer server(*svc, tmp.path());
  std::promise<int> ready;
  std::thread th([&] { server.run("127.0.0.1", 0, [&](int p) { ready.set_value(p); }); });
  const int port = ready.get_future().get();

  httplib::Client client("127.0.0.1", port);
  const auto sym = client.Get("/api/symptoms");
  REQUIRE(sym);
  CHECK(sym->status == 200);
  CHECK(sym->get_header_value(kFingerprintHeader) == svc->symptom_model().fingerprint());
  const auto names = json::parse(sym->body)["symptoms"];
  const auto diag = client.Post("/api/diagnose", json{{"symptoms", {names[1]}}}.dump(), "application/json");
  REQUIRE(diag);
  CHECK(diag->status == 200);
  CHECK(diag->body == svc->diagnose(json{{"symptoms", {names[1]}}}.dump()).body);
  const auto skin = client.Post("/api/skin", ppm(16, 16, 1), "application/octet-stream");
  REQUIRE(skin);
  CHECK(skin->status == 503);
  const auto missing = client.Get("/api/unknown");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"]["code"] == "not_found");
  const auto page = client.Get("/index.html");
  REQUIRE(page);
  CHECK(page->body == "<html>ui</html>");

  server.stop();
  th.join();
}

TEST_CASE("CLI exit codes") {
  const auto& a = artifacts();
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"no-such-command"}).code == kExitUsage);
  CHECK(cli({"verify"}).code == kExitUsage);
  CHECK(cli({"diagnose", "--bundle", (a / "m.emed").string(), "--symptoms", "fevr"}).code == kExitData);
  CHECK(cli({"verify", (a / "missing.emed").string()}).code != kExitOk);

  auto bytes = read_file(a / "m.emed");
  bytes[bytes.size() - 5] ^= 0x01;
  oracle::TempDir tmp;
  write_file(tmp / "bad.emed", bytes);
  const auto bad = cli({"verify", (tmp / "bad.emed").string()});
  CHECK(bad.code == kExitIntegrity);
  CHECK(bad.out.rfind("FAILED", 0) == 0);
  CHECK(cli({"diagnose", "--bundle", (tmp / "bad.emed").string(), "--vocab", (a / "vocab.txt").string(),
             "--diseases", (a / "diseases.txt").string(), "--symptoms", "fever"})
            .code == kExitIntegrity);
}

TEST_CASE("CLI verify, quantize and diagnose output") {
  const auto& a = artifacts();
  const auto v = cli({"verify", (a / "m.emed").string()});
  CHECK(v.code == 0);
  CHECK(lines_of(v.out).front() == "ok");

  oracle::TempDir tmp;
  const auto d = tmp.path().string();
  REQUIRE(cli({"freeze", (a / "m.ckpt").string(), d + "/f.emed"}).code == 0);
  const auto q = cli({"quantize", d + "/f.emed", d + "/q.emed", "--format", "json"});
  REQUIRE(q.code == 0);
  const auto qj = json::parse(q.out);
  CHECK(qj["quantized"] == true);
  CHECK(qj["blob_ratio"].get<double>() >= 0.25);
  CHECK(qj["blob_ratio"].get<double>() <= 0.30);

  const auto names = SymptomVocabulary::load(a / "vocab.txt").names();
  const auto diag = cli({"diagnose", "--bundle", (a / "m.emed").string(), "--symptoms", names[0] + "," + names[2]});
  REQUIRE(diag.code == 0);
  const auto rows = lines_of(diag.out);
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(rows[i].rfind(std::to_string(i + 1) + ". ", 0) == 0);

  const auto dj = cli({"diagnose", "--bundle", (a / "m.emed").string(), "--symptoms", names[0], "-k", "3", "--format", "json"});
  REQUIRE(dj.code == 0);
  CHECK(json::parse(dj.out)["results"].size() == 3);

  const auto empty = cli({"diagnose", "--bundle", (a / "m.emed").string()});
  CHECK(empty.code == kExitData);
  CHECK(empty.err.find(kEmptySymptomsMessage) != std::string::npos);
  CHECK(cli({"diagnose", "--bundle", (a / "m.emed").string(), "--allow-empty"}).code == 0);
}

TEST_CASE("CLI eval, embed and tsne") {
  const auto& a = artifacts();
  const auto e = cli({"eval", "--bundle", (a / "m.emed").string(), "--data", (a / "test.rec").string(), "--world",
                      (a / "world.json").string(), "--format", "json"});
  REQUIRE(e.code == 0);
  const auto ej = json::parse(e.out);
  CHECK(ej["n"] == 200);
  CHECK(ej["top1"].get<double>() <= ej["top5"].get<double>());
  CHECK(ej["oracle_top5"].get<double>() >= ej["oracle_top1"].get<double>());

  oracle::TempDir tmp;
  const auto d = tmp.path().string();
  REQUIRE(cli({"embed", "--bundle", (a / "m.emed").string(), "--data", (a / "test.rec").string(), "--out", d + "/e.csv",
               "--limit", "60"})
              .code == 0);
  const auto rows = lines_of(std::string(reinterpret_cast<const char*>(read_file(tmp / "e.csv").data()),
                                         read_file(tmp / "e.csv").size()));
  CHECK(rows.size() == 60);
  REQUIRE(cli({"tsne", "--in", d + "/e.csv", "--out", d + "/t.csv", "--perplexity", "10", "--iterations", "300"}).code == 0);
  const auto t1 = read_file(tmp / "t.csv");
  REQUIRE(cli({"tsne", "--in", d + "/e.csv", "--out", d + "/t2.csv", "--perplexity", "10", "--iterations", "300"}).code == 0);
  CHECK(t1 == read_file(tmp / "t2.csv"));
  CHECK(cli({"tsne", "--in", d + "/e.csv", "--out", d + "/t3.csv", "--perplexity", "40"}).code == kExitData);
}
