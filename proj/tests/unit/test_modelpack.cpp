#include <cmath>
#include <cstring>

#include "doctest.h"
#include "mededge/bundle.hpp"
#include "mededge/modelpack.hpp"
#include "mededge/random.hpp"
#include "oracles.hpp"

using namespace mededge;

namespace {

template <typename T>
T le(const Bytes& b, std::size_t at) {
  T v{};
  for (std::size_t i = 0; i < sizeof(T); ++i) reinterpret_cast<std::uint8_t*>(&v)[i] = b[at + i];
  return v;
}

Checkpoint small_checkpoint(std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.classes = 5;
  d.features.resize(40, 6);
  for (Eigen::Index r = 0; r < 40; ++r) {
    d.labels.push_back(static_cast<int>(r % 5));
    for (Eigen::Index c = 0; c < 6; ++c) d.features(r, c) = static_cast<float>(rng.uniform());
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  return train_classifier(make_dnn({6, 12, 4, 5, 0.15}, seed), d, cfg);
}

FrozenGraph cnn_with_statistics(std::uint64_t seed) {
  CnnSpec spec;
  spec.input = {8, 8, 3};
  spec.channels = 4;
  spec.hidden_width = 6;
  spec.classes = 5;
  FrozenGraph f{make_skin_cnn(spec, seed), "test"};
  f.graph.mode = Mode::inference;
  Rng rng(seed + 1);
  for (auto& [name, t] : f.graph.buffers) {
    if (name.ends_with("running_mean"))
      for (auto& v : t.values()) v = static_cast<float>(rng.normal() * 0.3);
    if (name.ends_with("running_var"))
      for (auto& v : t.values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
  for (auto& [name, t] : f.graph.params) {
    if (name.starts_with("stem_bn") || name.starts_with("res_bn"))
      for (auto& v : t.values()) v += static_cast<float>(rng.normal() * 0.2);
  }
  return f;
}

std::vector<int> top5(std::span<const float> p) {
  std::vector<int> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
  idx.resize(std::min<std::size_t>(5, idx.size()));
  return idx;
}

}  // namespace

TEST_CASE("quantize: all zeros") {
  const auto q = quantize_tensor(Tensor::zeros({4, 4}));
  for (auto c : q.codes()) CHECK(c == q.quant().zero_point);
  const auto back = dequantize_tensor(q);
  for (auto v : back.values()) CHECK(v == 0.0f);
  CHECK(q.quant().scale == 1.0f);
  CHECK(q.quant().zero_point == 0);
}

TEST_CASE("quantize: [-1, 0, 3] by hand") {
  const auto q = quantize_tensor(Tensor::from_values({3}, {-1.0f, 0.0f, 3.0f}));
  CHECK(q.quant().scale == doctest::Approx(4.0 / 255.0).epsilon(1e-4));
  CHECK(q.quant().scale >= 4.0f / 255.0f);
  CHECK(q.quant().zero_point == 64);
  CHECK(std::vector<std::uint8_t>(q.codes().begin(), q.codes().end()) == std::vector<std::uint8_t>{0, 64, 255});
  const auto d = dequantize_tensor(q);
  CHECK(d.values()[0] == doctest::Approx(-1.0039).epsilon(1e-4));
  CHECK(d.values()[1] == 0.0f);
  CHECK(d.values()[2] == doctest::Approx(2.9961).epsilon(1e-4));
}

TEST_CASE("quantize: round trip error is within half a step") {
  Rng rng(3);
  std::vector<Tensor> cases;
  std::vector<float> big(10000);
  for (auto& v : big) v = static_cast<float>(rng.normal() * 0.7 + 0.1);
  cases.push_back(Tensor::from_values({10000}, big));
  cases.push_back(Tensor::from_values({1}, {-0.3f}));
  cases.push_back(Tensor::from_values({1}, {12.5f}));
  cases.push_back(Tensor::from_values({3}, {2.0f, 2.0f, 2.0f}));
  cases.push_back(Tensor::from_values({3}, {-7.0f, -7.0f, -7.0f}));
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> v(1 + rng.below(300));
    const double lo = rng.uniform(-100, 10), hi = lo + rng.uniform(0, 50);
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    cases.push_back(Tensor::from_values({static_cast<std::int64_t>(v.size())}, v));
  }
  for (const auto& t : cases) {
    const auto q = quantize_tensor(t);
    const double scale = q.quant().scale;
    CHECK(q.quant().zero_point >= 0);
    CHECK(q.quant().zero_point <= 255);
    const auto d = dequantize_tensor(q);
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(std::abs(static_cast<double>(d.values()[i]) - t.values()[i]) <= scale / 2 + 1e-9);
    }
  }
}

TEST_CASE("quantize: round half away from zero") {
  // scale = 1 exactly: range [-127.5, 127.5] gives (hi - lo) / 255 = 1
  const auto q = quantize_tensor(Tensor::from_values({4}, {-127.5f, 0.5f, -0.5f, 127.5f}));
  REQUIRE(q.quant().scale == 1.0f);
  const int zp = q.quant().zero_point;
  CHECK(q.codes()[1] == zp + 1);
  CHECK(q.codes()[2] == zp - 1);
}

TEST_CASE("quantize: NaN names the index") {
  try {
    quantize_tensor(Tensor::from_values({3}, {1.0f, 2.0f, NAN}));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("crc32 and fnv1a64 reference values") {
  const std::string s = "123456789";
  CHECK(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) == 0xCBF43926u);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("bundle layout is bit-exact") {
  const Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = quantize_tensor(Tensor::from_values({5}, {-1, 0, 1, 2, 3}));
  const Tensor c = Tensor::from_values({1}, {42});
  const auto bytes = encode_bundle("hello,manifest\n", kQuantized, {{"a", &a}, {"bq", &b}, {"c", &c}});

  CHECK(std::memcmp(bytes.data(), "EMED", 4) == 0);
  CHECK(le<std::uint16_t>(bytes, 4) == 1);
  CHECK(le<std::uint16_t>(bytes, 6) == kQuantized);
  const auto mlen = le<std::uint64_t>(bytes, 8);
  CHECK(mlen == 15);
  CHECK(std::string(bytes.begin() + 16, bytes.begin() + 16 + 15) == "hello,manifest\n");
  std::size_t pos = 16 + mlen;
  CHECK(le<std::uint32_t>(bytes, pos) == 3);
  pos += 4;

  const std::uint64_t blob = (bytes.size() > 4096) ? 4096 : 0;
  REQUIRE(blob == 4096);
  std::uint64_t prev_end = 0;
  const std::vector<std::pair<std::string, const Tensor*>> expect{{"a", &a}, {"bq", &b}, {"c", &c}};
  for (const auto& [name, t] : expect) {
    const auto nlen = le<std::uint16_t>(bytes, pos);
    CHECK(std::string(bytes.begin() + static_cast<std::ptrdiff_t>(pos) + 2,
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos) + 2 + nlen) == name);
    pos += 2 + nlen;
    CHECK(bytes[pos] == static_cast<std::uint8_t>(t->dtype()));
    const int rank = bytes[pos + 1];
    CHECK(rank == static_cast<int>(t->rank()));
    pos += 2;
    for (int r = 0; r < rank; ++r, pos += 4)
      CHECK(le<std::uint32_t>(bytes, pos) == t->shape()[static_cast<std::size_t>(r)]);
    const auto scale = le<float>(bytes, pos);
    const auto zp = le<std::int32_t>(bytes, pos + 4);
    const auto off = le<std::uint64_t>(bytes, pos + 8);
    const auto len = le<std::uint64_t>(bytes, pos + 16);
    const auto crc = le<std::uint32_t>(bytes, pos + 24);
    pos += 28;
    if (t->dtype() == DType::q8) {
      CHECK(scale == t->quant().scale);
      CHECK(zp == t->quant().zero_point);
    }
    CHECK(off % 64 == 0);
    CHECK(off >= prev_end);
    CHECK(len == t->byte_size());
    prev_end = off + len;
    const std::span<const std::uint8_t> payload(bytes.data() + blob + off, len);
    CHECK(crc == crc32(payload));
    if (t->dtype() == DType::f32) {
      CHECK(std::memcmp(payload.data(), t->values().data(), len) == 0);
    } else {
      CHECK(std::memcmp(payload.data(), t->codes().data(), len) == 0);
    }
  }
  for (std::size_t i = pos; i < blob; ++i) CHECK(bytes[i] == 0);
  CHECK(bytes.size() == blob + prev_end);

  const auto parsed = parse_bundle(bytes);
  CHECK(parsed.ok());
  CHECK(parsed.layout.blob_offset == 4096);
  CHECK(read_tensor(bytes, parsed.layout, *parsed.layout.find("bq")) == b);
}

TEST_CASE("verify: intact, bit-flipped and truncated bundles") {
  oracle::TempDir dir;
  const auto ckpt = small_checkpoint(1);
  const auto frozen = prune_for_inference(freeze(ckpt));
  pack_bundle(frozen, true, dir / "m.emed");
  CHECK(verify_bundle(dir / "m.emed").empty());

  const auto bytes = read_file(dir / "m.emed");
  const auto layout = parse_bundle(bytes).layout;
  Rng rng(5);
  for (const auto& entry : layout.tensors) {
    auto bad = bytes;
    const auto at = layout.blob_offset + entry.offset + rng.below(entry.byte_length);
    bad[at] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    write_file(dir / "bad.emed", bad);
    const auto v = verify_bundle(dir / "bad.emed");
    REQUIRE(v.size() == 1);
    CHECK(v[0].tensor == entry.name);
  }

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, std::size_t{4095}, bytes.size() - 1}) {
    write_file(dir / "short.emed", std::span(bytes.data(), cut));
    const auto v = verify_bundle(dir / "short.emed");
    CHECK_FALSE(v.empty());
  }

  auto magic = bytes;
  magic[0] = 'X';
  write_file(dir / "magic.emed", magic);
  CHECK_FALSE(verify_bundle(dir / "magic.emed").empty());
}

TEST_CASE("freeze drops optimizer state and preserves outputs exactly") {
  oracle::TempDir dir;
  const auto ckpt = small_checkpoint(2);
  save_checkpoint(ckpt, dir / "c.ckpt");
  const auto bytes = read_file(dir / "c.ckpt");
  const auto parsed = parse_bundle(bytes);
  CHECK((parsed.layout.flags & kTrainingArtifacts) != 0);
  bool has_opt = false;
  for (const auto& t : parsed.layout.tensors) has_opt = has_opt || t.name.starts_with("opt/");
  CHECK(has_opt);

  const auto frozen = freeze(dir / "c.ckpt");
  CHECK(frozen.graph.mode == Mode::inference);
  for (const auto& [name, t] : frozen.graph.params) CHECK_FALSE(name.starts_with("opt/"));
  CHECK(frozen.provenance == hex64(checkpoint_hash(ckpt)));

  auto reference = ckpt.graph;
  reference.mode = Mode::inference;
  Rng rng(9);
  for (int i = 0; i < 3; ++i) {
    MatrixX<float> x(1, 6);
    for (Eigen::Index c = 0; c < 6; ++c) x(0, c) = static_cast<float>(rng.uniform());
    CHECK(predict(frozen.graph, x) == predict(reference, x));
  }

  pack_bundle(frozen, false, dir / "f1.emed");
  pack_bundle(freeze(dir / "c.ckpt"), false, dir / "f2.emed");
  CHECK(read_file(dir / "f1.emed") == read_file(dir / "f2.emed"));

  auto bad = bytes;
  const auto& entry = parsed.layout.tensors.front();
  bad[parsed.layout.blob_offset + entry.offset] ^= 0x10;
  write_file(dir / "bad.ckpt", bad);
  try {
    freeze(dir / "bad.ckpt");
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find(entry.name) != std::string::npos);
  }
}

TEST_CASE("prune removes dropout without changing outputs") {
  auto frozen = freeze(small_checkpoint(3));
  int dropouts = 0;
  for (const auto& l : frozen.graph.layers) dropouts += l.kind == LayerKind::dropout;
  CHECK(dropouts == 2);
  const auto pruned = prune_for_inference(frozen);
  CHECK(pruned.graph.layers.size() == frozen.graph.layers.size() - 2);
  const MatrixX<float> x = MatrixX<float>::Random(10, 6).cwiseAbs();
  CHECK(predict(pruned.graph, x) == predict(frozen.graph, x));

  const FrozenGraph plain{[] {
                            auto g = make_mlp({4, 6, 3}, 1);
                            g.mode = Mode::inference;
                            return g;
                          }(),
                          "x"};
  const auto same = prune_for_inference(plain);
  CHECK(same.graph.layers == plain.graph.layers);
  CHECK(same.graph.params == plain.graph.params);
}

TEST_CASE("prune folds batch norm within 1e-5 and keeps top-5 rankings") {
  const auto frozen = cnn_with_statistics(4);
  const auto pruned = prune_for_inference(frozen);
  for (const auto& l : pruned.graph.layers) {
    CHECK(l.kind != LayerKind::batch_norm);
    CHECK(l.kind != LayerKind::dropout);
  }
  CHECK(pruned.graph.layers.size() == frozen.graph.layers.size() - 3);

  Rng rng(6);
  MatrixX<float> probe(100, frozen.graph.input_dim());
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = static_cast<float>(rng.uniform());
  const auto a = predict(frozen.graph, probe);
  const auto b = predict(pruned.graph, probe);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5f);
  for (Eigen::Index r = 0; r < 100; ++r) {
    CHECK(top5({a.row(r).data(), static_cast<std::size_t>(a.cols())}) ==
          top5({b.row(r).data(), static_cast<std::size_t>(b.cols())}));
  }
}

TEST_CASE("pack is deterministic and verifies") {
  oracle::TempDir dir;
  const auto frozen = prune_for_inference(freeze(small_checkpoint(5)));
  const auto s1 = pack_bundle(frozen, true, dir / "a.emed");
  CHECK(verify_bundle(dir / "a.emed").empty());
  const auto reread = load_frozen(dir / "a.emed");
  pack_bundle(reread, true, dir / "b.emed");
  CHECK(read_file(dir / "a.emed") == read_file(dir / "b.emed"));
  CHECK(s1.fingerprint == fingerprint_of(s1.layout.manifest));
  CHECK(s1.fingerprint == hex64(fnv1a64(s1.layout.manifest)));
  CHECK((s1.layout.flags & kQuantized) != 0);
  CHECK_THROWS_AS(load_frozen(dir / "missing.emed"), IoError);
}

TEST_CASE("manifest round trip") {
  ManifestInfo info;
  info.graph = make_skin_cnn({}, 1);
  info.graph.params.clear();
  info.graph.buffers.clear();
  info.provenance = "00ff";
  info.has_training = true;
  info.epoch = 3;
  info.step = 99;
  info.history = {{0, 1.5, 0.25}, {1, 1.25, 0.5}};
  const auto text = encode_manifest(info);
  const auto back = decode_manifest(text);
  CHECK(back.graph.layers == info.graph.layers);
  CHECK(back.graph.input_shape == info.graph.input_shape);
  CHECK(back.graph.output_dim == info.graph.output_dim);
  CHECK(back.epoch == 3);
  CHECK(back.step == 99);
  CHECK(back.history == info.history);
  CHECK(encode_manifest(back) == text);
  CHECK_THROWS_AS(decode_manifest("bogus,line\n"), IntegrityError);
}

TEST_CASE("estimate_flops") {
  NetworkGraph empty;
  CHECK(estimate_flops(empty).total == 0);

  NetworkGraph g;
  g.input_shape = {1, 1, 3};
  g.layers = {{.kind = LayerKind::dense, .name = "d", .fan_in = 3, .fan_out = 4}};
  auto r = estimate_flops(g);
  REQUIRE(r.per_layer.size() == 1);
  CHECK(r.per_layer[0].flops == 28);
  CHECK(r.total == 28);

  FlopsReport budget;
  budget.total = 15'000'000'000ULL;
  CHECK(budget_check(budget, 3e9) == doctest::Approx(5.0));
  CHECK(budget.over_budget_factor == doctest::Approx(5.0));

  const auto cnn = make_skin_cnn({}, 1);
  const auto rc = estimate_flops(cnn);
  std::uint64_t sum = 0;
  for (const auto& l : rc.per_layer) sum += l.flops;
  CHECK(sum == rc.total);
  // stem conv: 2 * 3*3 * 3 * 8 * 32 * 32
  CHECK(rc.per_layer[0].flops == 2ULL * 9 * 3 * 8 * 32 * 32);
}
