#include "mededge/modelpack.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace mededge {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] void bad_manifest(std::size_t line, const std::string& what) {
  throw IntegrityError({{0, "", "manifest line " + std::to_string(line) + ": " + what}});
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.emplace_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

template <typename T>
T parse_number(std::string_view text, std::size_t line) {
  T value{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    bad_manifest(line, "bad number '" + std::string(text) + "'");
  }
  return value;
}

std::uint64_t parse_hex(std::string_view text, std::size_t line) {
  std::uint64_t value = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), value, 16);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    bad_manifest(line, "bad hex value '" + std::string(text) + "'");
  }
  return value;
}

bool is_buffer_name(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var") ||
         name.ends_with(".bn_count");
}

void check_name(const std::string& name) {
  if (name.empty() || name.find_first_of(",\n=") != std::string::npos) {
    throw GraphError("layer name '" + name + "' cannot be written to a manifest");
  }
}

std::string weights_digest(const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::string text;
  for (const auto& [name, t] : tensors) {
    text += name;
    text += ':';
    text += std::to_string(crc32(tensor_payload(*t)));
    text += ';';
  }
  return hex64(fnv1a64(text));
}

ParsedBundle parse_or_throw(std::span<const std::uint8_t> bytes) {
  auto parsed = parse_bundle(bytes);
  if (!parsed.ok()) throw IntegrityError(parsed.violations);
  return parsed;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

std::string encode_manifest(const ManifestInfo& info) {
  const auto& g = info.graph;
  std::ostringstream out;
  out << "input," << g.input_shape.height << ',' << g.input_shape.width << ','
      << g.input_shape.channels << '\n';
  out << "output," << g.output_dim << '\n';
  out << "mode," << (g.mode == Mode::training ? "training" : "inference") << '\n';
  if (!info.provenance.empty()) out << "provenance," << info.provenance << '\n';
  if (!info.digest.empty()) out << "digest," << info.digest << '\n';
  if (info.has_training) {
    out << "train,epoch=" << info.epoch << ",step=" << info.step
        << ",config=" << hex64(info.config_hash) << ",beta1=" << fmt(info.beta1)
        << ",beta2=" << fmt(info.beta2) << ",epsilon=" << fmt(info.epsilon) << '\n';
    for (const auto& h : info.history) {
      out << "history," << h.epoch << ',' << fmt(h.loss) << ',' << fmt(h.accuracy) << '\n';
    }
  }
  for (const auto& l : g.layers) {
    check_name(l.name);
    out << to_string(l.kind) << ',' << l.name;
    switch (l.kind) {
      case LayerKind::dense:
        out << ",fan_in=" << l.fan_in << ",fan_out=" << l.fan_out;
        break;
      case LayerKind::conv2d:
        out << ",kernel=" << l.kernel << ",stride=" << l.stride << ",channels=" << l.channels;
        break;
      case LayerKind::maxpool:
        out << ",kernel=" << l.kernel << ",stride=" << l.stride;
        break;
      case LayerKind::concat:
      case LayerKind::residual_add:
        check_name(l.source);
        out << ",source=" << l.source;
        break;
      case LayerKind::batch_norm:
        out << ",decay=" << fmt(l.bn_decay) << ",epsilon=" << fmt(l.bn_epsilon);
        break;
      case LayerKind::dropout:
        out << ",p=" << fmt(l.drop_prob);
        break;
      case LayerKind::relu:
      case LayerKind::softmax:
        break;
    }
    out << '\n';
  }
  return out.str();
}

ManifestInfo decode_manifest(std::string_view text) {
  ManifestInfo info;
  auto& g = info.graph;
  bool have_input = false, have_output = false;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    const std::string& key = f[0];
    auto need = [&](std::size_t n) {
      if (f.size() != n) bad_manifest(line_no, "expected " + std::to_string(n) + " fields");
    };
    if (key == "input") {
      need(4);
      g.input_shape = {parse_number<int>(f[1], line_no), parse_number<int>(f[2], line_no),
                       parse_number<int>(f[3], line_no)};
      have_input = true;
    } else if (key == "output") {
      need(2);
      g.output_dim = parse_number<int>(f[1], line_no);
      have_output = true;
    } else if (key == "mode") {
      need(2);
      if (f[1] == "training") {
        g.mode = Mode::training;
      } else if (f[1] == "inference") {
        g.mode = Mode::inference;
      } else {
        bad_manifest(line_no, "unknown mode " + f[1]);
      }
    } else if (key == "provenance") {
      need(2);
      info.provenance = f[1];
    } else if (key == "digest") {
      need(2);
      info.digest = f[1];
    } else if (key == "history") {
      need(4);
      info.history.push_back({parse_number<int>(f[1], line_no), parse_number<double>(f[2], line_no),
                              parse_number<double>(f[3], line_no)});
    } else if (key == "train") {
      info.has_training = true;
      for (std::size_t i = 1; i < f.size(); ++i) {
        const auto eq = f[i].find('=');
        if (eq == std::string::npos) bad_manifest(line_no, "expected key=value");
        const std::string k = f[i].substr(0, eq);
        const std::string_view v = std::string_view(f[i]).substr(eq + 1);
        if (k == "epoch") info.epoch = parse_number<int>(v, line_no);
        else if (k == "step") info.step = parse_number<std::int64_t>(v, line_no);
        else if (k == "config") info.config_hash = parse_hex(v, line_no);
        else if (k == "beta1") info.beta1 = parse_number<double>(v, line_no);
        else if (k == "beta2") info.beta2 = parse_number<double>(v, line_no);
        else if (k == "epsilon") info.epsilon = parse_number<double>(v, line_no);
        else bad_manifest(line_no, "unknown training key " + k);
      }
    } else if (auto kind = parse_layer_kind(key)) {
      if (f.size() < 2) bad_manifest(line_no, "layer without a name");
      LayerSpec l;
      l.kind = *kind;
      l.name = f[1];
      for (std::size_t i = 2; i < f.size(); ++i) {
        const auto eq = f[i].find('=');
        if (eq == std::string::npos) bad_manifest(line_no, "expected key=value");
        const std::string k = f[i].substr(0, eq);
        const std::string_view v = std::string_view(f[i]).substr(eq + 1);
        if (k == "fan_in") l.fan_in = parse_number<int>(v, line_no);
        else if (k == "fan_out") l.fan_out = parse_number<int>(v, line_no);
        else if (k == "kernel") l.kernel = parse_number<int>(v, line_no);
        else if (k == "stride") l.stride = parse_number<int>(v, line_no);
        else if (k == "channels") l.channels = parse_number<int>(v, line_no);
        else if (k == "source") l.source = std::string(v);
        else if (k == "decay") l.bn_decay = parse_number<double>(v, line_no);
        else if (k == "epsilon") l.bn_epsilon = parse_number<double>(v, line_no);
        else if (k == "p") l.drop_prob = parse_number<double>(v, line_no);
        else bad_manifest(line_no, "unknown layer key " + k);
      }
      g.layers.push_back(std::move(l));
    } else {
      bad_manifest(line_no, "unknown record '" + key + "'");
    }
  }
  if (!have_input || !have_output) bad_manifest(line_no, "missing input or output record");
  try {
    layer_shapes(g);
  } catch (const GraphError& e) {
    bad_manifest(line_no, e.what());
  }
  return info;
}

std::string fingerprint_of(std::string_view manifest) { return hex64(fnv1a64(manifest)); }

// ---------------------------------------------------------------------------
// Checkpoints

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  ManifestInfo info;
  info.graph.layers = ckpt.graph.layers;
  info.graph.input_shape = ckpt.graph.input_shape;
  info.graph.output_dim = ckpt.graph.output_dim;
  info.graph.mode = Mode::training;
  info.has_training = true;
  info.epoch = ckpt.epoch;
  info.step = ckpt.optimizer.step;
  info.config_hash = ckpt.config_hash;
  info.beta1 = ckpt.optimizer.beta1;
  info.beta2 = ckpt.optimizer.beta2;
  info.epsilon = ckpt.optimizer.epsilon;
  info.history = ckpt.history;

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& [name, t] : ckpt.graph.params) tensors.emplace_back(name, &t);
  for (const auto& [name, t] : ckpt.graph.buffers) tensors.emplace_back(name, &t);
  for (const auto& [name, t] : ckpt.optimizer.first_moment) {
    tensors.emplace_back(std::string(kOptimizerPrefix) + "m/" + name, &t);
  }
  for (const auto& [name, t] : ckpt.optimizer.second_moment) {
    tensors.emplace_back(std::string(kOptimizerPrefix) + "v/" + name, &t);
  }
  info.digest = weights_digest(tensors);
  return encode_bundle(encode_manifest(info), kTrainingArtifacts, tensors);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

namespace {

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto parsed = parse_or_throw(bytes);
  if (!(parsed.layout.flags & kTrainingArtifacts)) {
    throw InputError("bundle carries no training artifacts; it is not a checkpoint");
  }
  auto info = decode_manifest(parsed.layout.manifest);
  Checkpoint ckpt;
  ckpt.graph = std::move(info.graph);
  ckpt.graph.mode = Mode::training;
  ckpt.epoch = info.epoch;
  ckpt.config_hash = info.config_hash;
  ckpt.history = std::move(info.history);
  ckpt.optimizer.step = info.step;
  ckpt.optimizer.beta1 = info.beta1;
  ckpt.optimizer.beta2 = info.beta2;
  ckpt.optimizer.epsilon = info.epsilon;
  const std::string m_prefix = std::string(kOptimizerPrefix) + "m/";
  const std::string v_prefix = std::string(kOptimizerPrefix) + "v/";
  for (const auto& e : parsed.layout.tensors) {
    Tensor t = read_tensor(bytes, parsed.layout, e);
    if (e.name.starts_with(m_prefix)) {
      ckpt.optimizer.first_moment[e.name.substr(m_prefix.size())] = std::move(t);
    } else if (e.name.starts_with(v_prefix)) {
      ckpt.optimizer.second_moment[e.name.substr(v_prefix.size())] = std::move(t);
    } else if (is_buffer_name(e.name)) {
      ckpt.graph.buffers[e.name] = std::move(t);
    } else {
      ckpt.graph.params[e.name] = std::move(t);
    }
  }
  try {
    validate(ckpt.graph);
  } catch (const GraphError& err) {
    throw IntegrityError({{0, "", err.what()}});
  }
  return ckpt;
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
  const Bytes bytes = encode_checkpoint(ckpt);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---------------------------------------------------------------------------
// Freeze / prune

FrozenGraph freeze(const Checkpoint& ckpt) {
  FrozenGraph frozen;
  frozen.graph.layers = ckpt.graph.layers;
  frozen.graph.params = ckpt.graph.params;
  frozen.graph.buffers = ckpt.graph.buffers;
  frozen.graph.input_shape = ckpt.graph.input_shape;
  frozen.graph.output_dim = ckpt.graph.output_dim;
  frozen.graph.mode = Mode::inference;
  frozen.provenance = hex64(checkpoint_hash(ckpt));
  validate(frozen.graph);
  return frozen;
}

FrozenGraph freeze(const std::filesystem::path& checkpoint_path) {
  const Bytes bytes = read_file(checkpoint_path);
  return freeze(decode_checkpoint(bytes));
}

FrozenGraph prune_for_inference(const FrozenGraph& frozen) {
  FrozenGraph out = frozen;
  NetworkGraph& g = out.graph;
  g.mode = Mode::inference;
  for (auto& [name, t] : g.params) {
    if (t.dtype() == DType::q8) t = dequantize_tensor(t);
  }

  auto is_source = [&](const std::string& name) {
    for (const auto& l : g.layers) {
      if (!l.source.empty() && l.source == name) return true;
    }
    return false;
  };
  auto redirect = [&](const std::string& from, const std::string& to) {
    for (auto& l : g.layers) {
      if (l.source == from) l.source = to;
    }
  };

  for (std::size_t i = 0; i < g.layers.size();) {
    const LayerSpec l = g.layers[i];
    const std::string previous = i == 0 ? "input" : g.layers[i - 1].name;
    if (l.kind == LayerKind::dropout) {
      redirect(l.name, previous);
      g.layers.erase(g.layers.begin() + static_cast<std::ptrdiff_t>(i));
      continue;
    }
    if (l.kind == LayerKind::batch_norm && i > 0) {
      const LayerSpec& producer = g.layers[i - 1];
      if ((producer.kind == LayerKind::dense || producer.kind == LayerKind::conv2d) &&
          !is_source(producer.name)) {
        const auto gamma = g.params.at(l.weight_name()).values();
        const auto beta = g.params.at(l.bias_name()).values();
        const auto mean = g.buffers.at(l.running_mean_name()).values();
        const auto var = g.buffers.at(l.running_var_name()).values();
        auto w = g.params.at(producer.weight_name()).matrix();
        auto b = g.params.at(producer.bias_name()).values();
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
          const auto k = static_cast<std::size_t>(c);
          const double s = gamma[k] / std::sqrt(static_cast<double>(var[k]) + l.bn_epsilon);
          for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<float>(w(r, c) * s);
          b[k] = static_cast<float>((static_cast<double>(b[k]) - mean[k]) * s + beta[k]);
        }
        g.params.erase(l.weight_name());
        g.params.erase(l.bias_name());
        g.buffers.erase(l.running_mean_name());
        g.buffers.erase(l.running_var_name());
        g.buffers.erase(l.bn_count_name());
        redirect(l.name, producer.name);
        g.layers.erase(g.layers.begin() + static_cast<std::ptrdiff_t>(i));
        continue;
      }
    }
    ++i;
  }
  validate(g);
  return out;
}

// ---------------------------------------------------------------------------
// Quantisation

QuantParams choose_quant_params(float min_value, float max_value) {
  const double lo = std::min(0.0, static_cast<double>(min_value));
  const double hi = std::max(0.0, static_cast<double>(max_value));
  if (!(hi > lo)) return {1.0f, 0};
  int exponent = 0;
  const double mantissa = std::frexp((hi - lo) / 255.0, &exponent);
  const double scale = std::ldexp(std::ceil(std::ldexp(mantissa, 16)), exponent - 16);
  const double zp = std::round(-lo / scale);
  return {static_cast<float>(scale), static_cast<std::int32_t>(std::clamp(zp, 0.0, 255.0))};
}

Tensor quantize_tensor(const Tensor& t) {
  const auto v = t.values();
  float lo = 0.0f, hi = 0.0f;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError("cannot quantise non-finite element at index " + std::to_string(i));
    }
    if (i == 0 || v[i] < lo) lo = v[i];
    if (i == 0 || v[i] > hi) hi = v[i];
  }
  const QuantParams qp = choose_quant_params(lo, hi);
  const double scale = qp.scale;
  std::vector<std::uint8_t> codes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double q = std::round(static_cast<double>(v[i]) / scale) + qp.zero_point;
    codes[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
  }
  return Tensor::quantized(t.shape(), std::move(codes), qp);
}

Tensor dequantize_tensor(const Tensor& q) {
  MatrixX<float> m;
  dequantize_into(q, m);
  return Tensor::from_values(q.shape(), std::vector<float>(m.data(), m.data() + m.size()));
}

// ---------------------------------------------------------------------------
// Packing

Bytes encode_frozen(const FrozenGraph& frozen, bool quantize) {
  const auto& g = frozen.graph;
  validate(g);
  std::vector<Tensor> converted;
  converted.reserve(g.params.size());
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  bool any_q8 = false;
  for (const auto& [name, t] : g.params) {
    if (quantize && t.dtype() == DType::f32) {
      converted.push_back(quantize_tensor(t));
      tensors.emplace_back(name, &converted.back());
    } else {
      tensors.emplace_back(name, &t);
    }
    any_q8 = any_q8 || tensors.back().second->dtype() == DType::q8;
  }
  for (const auto& [name, t] : g.buffers) tensors.emplace_back(name, &t);

  ManifestInfo info;
  info.graph.layers = g.layers;
  info.graph.input_shape = g.input_shape;
  info.graph.output_dim = g.output_dim;
  info.graph.mode = Mode::inference;
  info.provenance = frozen.provenance;
  info.digest = weights_digest(tensors);
  return encode_bundle(encode_manifest(info), any_q8 ? kQuantized : 0, tensors);
}

BundleSummary summarize_bundle(std::span<const std::uint8_t> file) {
  auto parsed = parse_bundle(file, false);
  if (!parsed.ok()) throw IntegrityError(parsed.violations);
  BundleSummary s;
  s.layout = std::move(parsed.layout);
  s.file_bytes = file.size();
  s.fingerprint = fingerprint_of(s.layout.manifest);
  std::uint64_t offset = 0;
  for (const auto& e : s.layout.tensors) {
    const std::uint64_t bytes = element_count(e.shape) * sizeof(float);
    s.f32_blob_bytes = offset + bytes;
    offset = align_up(offset + bytes, kTensorAlignment);
  }
  return s;
}

BundleSummary pack_bundle(const FrozenGraph& frozen, bool quantize, const std::filesystem::path& out) {
  const Bytes bytes = encode_frozen(frozen, quantize);
  write_file(out, bytes);
  return summarize_bundle(bytes);
}

FrozenGraph load_frozen(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  const auto parsed = parse_or_throw(bytes);
  if (parsed.layout.flags & kTrainingArtifacts) {
    throw InputError(path.string() + " is a training checkpoint; freeze it first");
  }
  auto info = decode_manifest(parsed.layout.manifest);
  FrozenGraph frozen;
  frozen.graph = std::move(info.graph);
  frozen.graph.mode = Mode::inference;
  frozen.provenance = info.provenance;
  for (const auto& e : parsed.layout.tensors) {
    auto& store = is_buffer_name(e.name) ? frozen.graph.buffers : frozen.graph.params;
    store[e.name] = read_tensor(bytes, parsed.layout, e);
  }
  try {
    validate(frozen.graph);
  } catch (const GraphError& err) {
    throw IntegrityError({{0, "", err.what()}});
  }
  return frozen;
}

// ---------------------------------------------------------------------------
// FLOPs

FlopsReport estimate_flops(const NetworkGraph& g) {
  FlopsReport report;
  const auto shapes = layer_shapes(g);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    const Shape3 in = i == 0 ? g.input_shape : shapes[i - 1];
    const Shape3 out = shapes[i];
    const auto n_out = static_cast<std::uint64_t>(out.size());
    std::uint64_t f = 0;
    switch (l.kind) {
      case LayerKind::dense:
        f = (2ULL * static_cast<std::uint64_t>(l.fan_in) + 1) * static_cast<std::uint64_t>(l.fan_out);
        break;
      case LayerKind::conv2d:
        f = 2ULL * static_cast<std::uint64_t>(l.kernel * l.kernel) *
            static_cast<std::uint64_t>(in.channels) * static_cast<std::uint64_t>(out.channels) *
            static_cast<std::uint64_t>(out.pixels());
        break;
      case LayerKind::relu:
      case LayerKind::softmax:
      case LayerKind::residual_add:
        f = n_out;
        break;
      case LayerKind::batch_norm:
        f = 2 * n_out;
        break;
      case LayerKind::maxpool:
        f = static_cast<std::uint64_t>(l.kernel * l.kernel - 1) * n_out;
        break;
      case LayerKind::dropout:
      case LayerKind::concat:
        break;
    }
    report.per_layer.push_back({l.name, f});
    report.total += f;
  }
  return report;
}

double budget_check(FlopsReport& report, double device_flops) {
  if (!(device_flops > 0.0)) throw InputError("device budget must be positive");
  report.device_budget = device_flops;
  report.over_budget_factor = static_cast<double>(report.total) / device_flops;
  return report.over_budget_factor;
}

}  // namespace mededge
