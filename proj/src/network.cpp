#include "mededge/network.hpp"

#include <array>
#include <cmath>
#include <unordered_map>

#include "mededge/random.hpp"

namespace mededge {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kKindNames{{
    {LayerKind::dense, "dense"},
    {LayerKind::conv2d, "conv2d"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::concat, "concat"},
    {LayerKind::residual_add, "residual_add"},
    {LayerKind::batch_norm, "batch_norm"},
    {LayerKind::dropout, "dropout"},
    {LayerKind::relu, "relu"},
    {LayerKind::softmax, "softmax"},
}};

// Maps a source layer name to its activation slot: 0 is the graph input,
// i + 1 is the output of layer i.
std::size_t source_slot(const NetworkGraph& g, std::size_t layer_index) {
  const auto& src = g.layers[layer_index].source;
  if (src == "input") return 0;
  for (std::size_t j = 0; j < layer_index; ++j) {
    if (g.layers[j].name == src) return j + 1;
  }
  throw GraphError(g.layers[layer_index].name + ": source '" + src +
                   "' is not an earlier layer");
}

void expect_param_shape(const NetworkGraph& g, const std::string& name,
                        const std::vector<std::int64_t>& shape, bool buffer = false) {
  const auto& store = buffer ? g.buffers : g.params;
  auto it = store.find(name);
  if (it == store.end()) throw GraphError("missing tensor " + name);
  if (it->second.shape() != shape) {
    throw GraphError("tensor " + name + " has shape " + it->second.shape_string());
  }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, n] : kKindNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

const LayerSpec* NetworkGraph::find_layer(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

std::vector<Shape3> layer_shapes(const NetworkGraph& g) {
  std::vector<Shape3> shapes;
  shapes.reserve(g.layers.size());
  auto shape_of_slot = [&](std::size_t slot) { return slot == 0 ? g.input_shape : shapes[slot - 1]; };
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    const Shape3 in = i == 0 ? g.input_shape : shapes.back();
    Shape3 out = in;
    switch (l.kind) {
      case LayerKind::dense:
        if (l.fan_in != in.size() || l.fan_out <= 0) {
          throw GraphError(l.name + ": dense fan_in " + std::to_string(l.fan_in) +
                           " does not match producer width " + std::to_string(in.size()));
        }
        out = {1, 1, l.fan_out};
        break;
      case LayerKind::conv2d:
        if (l.kernel <= 0 || l.stride <= 0 || l.channels <= 0) {
          throw GraphError(l.name + ": conv2d needs positive kernel, stride and channels");
        }
        out = conv_output_shape(in, l.kernel, l.stride, l.channels);
        break;
      case LayerKind::maxpool:
        if (l.kernel <= 0 || l.stride <= 0 || l.kernel > in.height || l.kernel > in.width) {
          throw GraphError(l.name + ": maxpool window does not fit " + to_string(in));
        }
        out = pool_output_shape(in, l.kernel, l.stride);
        break;
      case LayerKind::residual_add: {
        const Shape3 other = shape_of_slot(source_slot(g, i));
        if (!(other == in)) {
          throw GraphError(l.name + ": residual shapes differ (" + to_string(in) + " vs " +
                           to_string(other) + ")");
        }
        break;
      }
      case LayerKind::concat: {
        const Shape3 other = shape_of_slot(source_slot(g, i));
        if (other.height != in.height || other.width != in.width) {
          throw GraphError(l.name + ": concat spatial sizes differ");
        }
        out.channels = in.channels + other.channels;
        break;
      }
      case LayerKind::dropout:
        if (!(l.drop_prob >= 0.0 && l.drop_prob < 1.0)) {
          throw GraphError(l.name + ": drop probability must lie in [0, 1)");
        }
        break;
      case LayerKind::batch_norm:
        if (!(l.bn_decay > 0.0) || !(l.bn_epsilon > 0.0)) {
          throw GraphError(l.name + ": batch norm decay and epsilon must be positive");
        }
        break;
      case LayerKind::relu:
        break;
      case LayerKind::softmax:
        if (i + 1 != g.layers.size()) throw GraphError(l.name + ": softmax must be the last layer");
        break;
    }
    shapes.push_back(out);
  }
  if (!shapes.empty() && g.output_dim != 0 && shapes.back().size() != g.output_dim) {
    throw GraphError("final layer width " + std::to_string(shapes.back().size()) +
                     " does not match output_dim " + std::to_string(g.output_dim));
  }
  return shapes;
}

void validate(const NetworkGraph& g) {
  const auto shapes = layer_shapes(g);
  if (g.layers.empty() || g.layers.back().kind != LayerKind::softmax) {
    throw GraphError("graph must end in a softmax layer");
  }
  std::unordered_map<std::string, int> seen;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (l.name.empty() || l.name == "input" || ++seen[l.name] > 1) {
      throw GraphError("layer names must be unique and not 'input': '" + l.name + "'");
    }
    const Shape3 in = i == 0 ? g.input_shape : shapes[i - 1];
    switch (l.kind) {
      case LayerKind::dense:
        expect_param_shape(g, l.weight_name(), {l.fan_in, l.fan_out});
        expect_param_shape(g, l.bias_name(), {l.fan_out});
        break;
      case LayerKind::conv2d:
        expect_param_shape(g, l.weight_name(), {l.kernel, l.kernel, in.channels, l.channels});
        expect_param_shape(g, l.bias_name(), {l.channels});
        break;
      case LayerKind::batch_norm:
        expect_param_shape(g, l.weight_name(), {in.channels});
        expect_param_shape(g, l.bias_name(), {in.channels});
        expect_param_shape(g, l.running_mean_name(), {in.channels}, true);
        expect_param_shape(g, l.running_var_name(), {in.channels}, true);
        break;
      default:
        break;
    }
  }
}

std::size_t count_parameters(const NetworkGraph& g) {
  std::size_t n = 0;
  for (const auto& [name, t] : g.params) n += t.size();
  return n;
}

void init_parameters(NetworkGraph& g, std::uint64_t seed) {
  const auto shapes = layer_shapes(g);
  g.params.clear();
  g.buffers.clear();
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    const Shape3 in = i == 0 ? g.input_shape : shapes[i - 1];
    Rng rng(mix_seed(seed, i));
    auto uniform_tensor = [&](std::vector<std::int64_t> shape, int fan_in) {
      const double bound = std::sqrt(6.0 / fan_in);
      std::vector<float> v(element_count(shape));
      for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
      return Tensor::from_values(std::move(shape), std::move(v));
    };
    switch (l.kind) {
      case LayerKind::dense:
        g.params[l.weight_name()] = uniform_tensor({l.fan_in, l.fan_out}, l.fan_in);
        g.params[l.bias_name()] = Tensor::zeros({l.fan_out});
        break;
      case LayerKind::conv2d:
        g.params[l.weight_name()] = uniform_tensor({l.kernel, l.kernel, in.channels, l.channels},
                                                   l.kernel * l.kernel * in.channels);
        g.params[l.bias_name()] = Tensor::zeros({l.channels});
        break;
      case LayerKind::batch_norm:
        g.params[l.weight_name()] =
            Tensor::from_values({in.channels}, std::vector<float>(in.channels, 1.0f));
        g.params[l.bias_name()] = Tensor::zeros({in.channels});
        g.buffers[l.running_mean_name()] = Tensor::zeros({in.channels});
        g.buffers[l.running_var_name()] =
            Tensor::from_values({in.channels}, std::vector<float>(in.channels, 1.0f));
        g.buffers[l.bn_count_name()] = Tensor::zeros({1});
        break;
      default:
        break;
    }
  }
  ++g.version;
}

NetworkGraph make_dnn(const DnnSpec& spec, std::uint64_t seed) {
  if (spec.input_dim <= 0 || spec.hidden_width <= 0 || spec.n_hidden < 0 || spec.output_dim <= 0) {
    throw GraphError("dnn dimensions must be positive");
  }
  NetworkGraph g;
  g.input_shape = {1, 1, spec.input_dim};
  g.output_dim = spec.output_dim;
  int width = spec.input_dim;
  for (int h = 1; h <= spec.n_hidden; ++h) {
    const std::string idx = std::to_string(h);
    LayerSpec dense{.kind = LayerKind::dense, .name = "hidden" + idx, .fan_in = width,
                    .fan_out = spec.hidden_width};
    g.layers.push_back(dense);
    g.layers.push_back({.kind = LayerKind::relu, .name = "relu" + idx});
    if (h % 2 == 1 && spec.drop_prob > 0.0) {
      g.layers.push_back(
          {.kind = LayerKind::dropout, .name = "dropout" + idx, .drop_prob = spec.drop_prob});
    }
    width = spec.hidden_width;
  }
  g.layers.push_back(
      {.kind = LayerKind::dense, .name = "logits", .fan_in = width, .fan_out = spec.output_dim});
  g.layers.push_back({.kind = LayerKind::softmax, .name = "probabilities"});
  init_parameters(g, seed);
  return g;
}

NetworkGraph make_mlp(const std::vector<int>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw GraphError("mlp needs at least input and output widths");
  NetworkGraph g;
  g.input_shape = {1, 1, widths.front()};
  g.output_dim = widths.back();
  for (std::size_t i = 1; i < widths.size(); ++i) {
    const std::string idx = std::to_string(i);
    g.layers.push_back({.kind = LayerKind::dense, .name = "dense" + idx, .fan_in = widths[i - 1],
                        .fan_out = widths[i]});
    if (i + 1 < widths.size()) g.layers.push_back({.kind = LayerKind::relu, .name = "relu" + idx});
  }
  g.layers.push_back({.kind = LayerKind::softmax, .name = "probabilities"});
  init_parameters(g, seed);
  return g;
}

NetworkGraph make_skin_cnn(const CnnSpec& spec, std::uint64_t seed) {
  NetworkGraph g;
  g.input_shape = spec.input;
  const int c = spec.channels;
  auto conv = [&](std::string name) {
    return LayerSpec{.kind = LayerKind::conv2d, .name = std::move(name), .kernel = 3, .stride = 1,
                     .channels = c};
  };
  auto pool = [](std::string name) {
    return LayerSpec{.kind = LayerKind::maxpool, .name = std::move(name), .kernel = 2, .stride = 2};
  };
  g.layers = {
      conv("stem_conv"),
      {.kind = LayerKind::batch_norm, .name = "stem_bn"},
      {.kind = LayerKind::relu, .name = "stem_relu"},
      pool("stem_pool"),
      conv("res_conv1"),
      {.kind = LayerKind::batch_norm, .name = "res_bn"},
      {.kind = LayerKind::relu, .name = "res_relu"},
      conv("res_conv2"),
      {.kind = LayerKind::residual_add, .name = "res_add", .source = "stem_pool"},
      {.kind = LayerKind::relu, .name = "res_out"},
      pool("res_pool"),
  };
  const Shape3 pooled = layer_shapes(g).back();
  g.output_dim = spec.classes;
  g.layers.push_back({.kind = LayerKind::dense, .name = "hidden", .fan_in = pooled.size(),
                      .fan_out = spec.hidden_width});
  g.layers.push_back({.kind = LayerKind::relu, .name = "hidden_relu"});
  g.layers.push_back(
      {.kind = LayerKind::dropout, .name = "hidden_dropout", .drop_prob = spec.drop_prob});
  g.layers.push_back({.kind = LayerKind::dense, .name = "logits", .fan_in = spec.hidden_width,
                      .fan_out = spec.classes});
  g.layers.push_back({.kind = LayerKind::softmax, .name = "probabilities"});
  init_parameters(g, seed);
  return g;
}

std::size_t embedding_layer(const NetworkGraph& g) {
  for (std::size_t i = g.layers.size(); i-- > 0;) {
    if (g.layers[i].kind == LayerKind::dense) {
      if (i == 0) break;
      return i;
    }
  }
  throw GraphError("model has no hidden layer to extract embeddings from");
}

// ---------------------------------------------------------------------------
// Parameter sources

template <typename S>
ConstMatrixMap<S> GraphParams<S>::fetch(const std::string& name, MatrixX<S>& scratch) const {
  auto it = graph_.params.find(name);
  if (it == graph_.params.end()) {
    it = graph_.buffers.find(name);
    if (it == graph_.buffers.end()) throw GraphError("missing tensor " + name);
  }
  const Tensor& t = it->second;
  if (t.dtype() == DType::q8) {
    dequantize_into(t, scratch);
  } else if constexpr (std::is_same_v<S, float>) {
    return t.matrix();
  } else {
    scratch = t.matrix().template cast<S>();
  }
  return ConstMatrixMap<S>(scratch.data(), scratch.rows(), scratch.cols());
}

template <typename S>
ParamStore<S>::ParamStore(const NetworkGraph& graph) {
  GraphParams<S> src(graph);
  for (const auto* store : {&graph.params, &graph.buffers}) {
    for (const auto& [name, t] : *store) {
      MatrixX<S> scratch;
      values_[name] = src.fetch(name, scratch);
    }
  }
}

template <typename S>
ConstMatrixMap<S> ParamStore<S>::fetch(const std::string& name, MatrixX<S>&) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw GraphError("missing tensor " + name);
  return ConstMatrixMap<S>(it->second.data(), it->second.rows(), it->second.cols());
}

// ---------------------------------------------------------------------------
// Forward

template <typename S>
BasicTrace<S> forward_batch(const NetworkGraph& g, const ParamSource<S>& params,
                            const MatrixX<S>& input, std::uint64_t seed,
                            std::optional<Mode> mode) {
  const auto shapes = layer_shapes(g);
  if (g.layers.empty()) throw GraphError("graph has no layers");
  if (input.cols() != g.input_dim()) {
    throw GraphError("input width " + std::to_string(input.cols()) + " does not match input_dim " +
                     std::to_string(g.input_dim()));
  }
  const Mode run_mode = mode.value_or(g.mode);
  const bool training = run_mode == Mode::training;
  const std::size_t L = g.layers.size();
  BasicTrace<S> trace;
  trace.input = input;
  trace.outputs.resize(L);
  trace.shapes = shapes;
  trace.dropout_masks.resize(L);
  trace.pool_argmax.resize(L);
  trace.bn_mean.resize(L);
  trace.bn_var.resize(L);
  trace.graph_version = g.version;
  trace.mode = run_mode;

  auto slot = [&](std::size_t s) -> const MatrixX<S>& {
    return s == 0 ? trace.input : trace.outputs[s - 1];
  };
  MatrixX<S> w_scratch, b_scratch, m_scratch, v_scratch;

  for (std::size_t i = 0; i < L; ++i) {
    const auto& l = g.layers[i];
    const MatrixX<S>& x = slot(i);
    const Shape3 in = i == 0 ? g.input_shape : shapes[i - 1];
    MatrixX<S>& y = trace.outputs[i];
    switch (l.kind) {
      case LayerKind::dense: {
        auto w = params.fetch(l.weight_name(), w_scratch);
        auto b = params.fetch(l.bias_name(), b_scratch);
        y = dense_forward(x, w, b, l.name);
        break;
      }
      case LayerKind::conv2d: {
        auto w = params.fetch(l.weight_name(), w_scratch);
        auto b = params.fetch(l.bias_name(), b_scratch);
        y = conv2d_forward(x, in, w, b, l.kernel, l.stride, l.name);
        break;
      }
      case LayerKind::maxpool:
        y = maxpool_forward(x, in, l.kernel, l.stride, &trace.pool_argmax[i]);
        break;
      case LayerKind::concat: {
        const MatrixX<S>& other = slot(source_slot(g, i));
        const Shape3 os = shapes[i];
        const int c1 = in.channels;
        const int c2 = os.channels - c1;
        y.resize(x.rows(), os.size());
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
          for (int p = 0; p < os.pixels(); ++p) {
            y.row(n).segment(p * os.channels, c1) = x.row(n).segment(p * c1, c1);
            y.row(n).segment(p * os.channels + c1, c2) = other.row(n).segment(p * c2, c2);
          }
        }
        break;
      }
      case LayerKind::residual_add:
        y = x + slot(source_slot(g, i));
        break;
      case LayerKind::batch_norm: {
        auto gamma = params.fetch(l.weight_name(), w_scratch);
        auto beta = params.fetch(l.bias_name(), b_scratch);
        const S eps = static_cast<S>(l.bn_epsilon);
        if (training) {
          Eigen::Map<const MatrixX<S>> rows(x.data(), x.rows() * in.pixels(), in.channels);
          RowVectorX<S> mean = rows.colwise().mean();
          RowVectorX<S> var = (rows.rowwise() - mean).array().square().colwise().mean().matrix();
          y = batch_norm_apply(x, in.channels, gamma, beta, mean, var, eps);
          trace.bn_mean[i] = std::move(mean);
          trace.bn_var[i] = std::move(var);
        } else {
          auto mean = params.fetch(l.running_mean_name(), m_scratch);
          auto var = params.fetch(l.running_var_name(), v_scratch);
          y = batch_norm_apply(x, in.channels, gamma, beta, mean, var, eps);
        }
        break;
      }
      case LayerKind::dropout:
        if (training && l.drop_prob > 0.0) {
          Rng rng(mix_seed(seed, i));
          const S keep_scale = S(1) / static_cast<S>(1.0 - l.drop_prob);
          MatrixX<S> mask(x.rows(), x.cols());
          for (Eigen::Index k = 0; k < mask.size(); ++k) {
            mask.data()[k] = rng.uniform() < l.drop_prob ? S(0) : keep_scale;
          }
          y = x.cwiseProduct(mask);
          trace.dropout_masks[i] = std::move(mask);
        } else {
          y = x;
        }
        break;
      case LayerKind::relu:
        y = relu(x);
        break;
      case LayerKind::softmax:
        y = softmax(x);
        break;
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Backward

template <typename S>
GradMap<S> backward_batch(const NetworkGraph& g, const ParamSource<S>& params,
                          const BasicTrace<S>& trace, const MatrixX<S>& targets,
                          Reduction reduction) {
  const std::size_t L = g.layers.size();
  if (trace.graph_version != g.version || trace.size() != L || trace.mode != g.mode) {
    throw GraphError("activation trace is stale: it was not produced by this graph state");
  }
  if (L == 0 || g.layers.back().kind != LayerKind::softmax) {
    throw GraphError("backward requires a graph ending in softmax");
  }
  const MatrixX<S>& probs = trace.outputs.back();
  if (targets.rows() != probs.rows() || targets.cols() != probs.cols()) {
    throw DimensionError("targets shape does not match network output");
  }
  const bool training = trace.mode == Mode::training;
  const Eigen::Index N = probs.rows();
  const S norm = reduction == Reduction::mean ? S(1) / static_cast<S>(N) : S(1);

  // grads[s] accumulates dLoss/d(activation slot s).
  std::vector<MatrixX<S>> grads(L + 1);
  grads[L - 1] = (probs - targets) * norm;  // combined softmax + cross-entropy
  auto accumulate = [&](std::size_t s, const MatrixX<S>& d) {
    if (grads[s].size() == 0) {
      grads[s] = d;
    } else {
      grads[s] += d;
    }
  };
  auto slot = [&](std::size_t s) -> const MatrixX<S>& {
    return s == 0 ? trace.input : trace.outputs[s - 1];
  };

  GradMap<S> out;
  MatrixX<S> w_scratch, b_scratch;
  for (std::size_t i = L - 1; i-- > 0;) {
    const auto& l = g.layers[i];
    const MatrixX<S>& gy = grads[i + 1];
    if (gy.size() == 0) continue;  // layer output never used downstream
    const MatrixX<S>& x = slot(i);
    const Shape3 in = i == 0 ? g.input_shape : trace.shapes[i - 1];
    const Shape3 os = trace.shapes[i];
    const bool need_input_grad = i > 0;
    switch (l.kind) {
      case LayerKind::dense: {
        auto w = params.fetch(l.weight_name(), w_scratch);
        out[l.weight_name()] = x.transpose() * gy;
        out[l.bias_name()] = gy.colwise().sum();
        if (need_input_grad) accumulate(i, gy * w.transpose());
        break;
      }
      case LayerKind::conv2d: {
        auto w = params.fetch(l.weight_name(), w_scratch);
        MatrixX<S> dw = MatrixX<S>::Zero(w.rows(), w.cols());
        RowVectorX<S> db = RowVectorX<S>::Zero(w.cols());
        MatrixX<S> dx = MatrixX<S>::Zero(x.rows(), x.cols());
        MatrixX<S> col, dcol;
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
          im2col(x.row(n).data(), in, l.kernel, l.stride, os, col);
          Eigen::Map<const MatrixX<S>> dy(gy.row(n).data(), os.pixels(), os.channels);
          dw.noalias() += col.transpose() * dy;
          db += dy.colwise().sum();
          if (need_input_grad) {
            dcol.noalias() = dy * w.transpose();
            col2im_add(dcol, in, l.kernel, l.stride, os, dx.row(n).data());
          }
        }
        out[l.weight_name()] = std::move(dw);
        out[l.bias_name()] = std::move(db);
        if (need_input_grad) accumulate(i, dx);
        break;
      }
      case LayerKind::maxpool: {
        if (!need_input_grad) break;
        MatrixX<S> dx = MatrixX<S>::Zero(x.rows(), x.cols());
        const auto& argmax = trace.pool_argmax[i];
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
          for (int o = 0; o < os.size(); ++o) {
            dx(n, argmax[static_cast<std::size_t>(n * os.size() + o)]) += gy(n, o);
          }
        }
        accumulate(i, dx);
        break;
      }
      case LayerKind::concat: {
        const std::size_t src = source_slot(g, i);
        const int c1 = in.channels;
        const int c2 = os.channels - c1;
        MatrixX<S> d1(x.rows(), in.size());
        MatrixX<S> d2(x.rows(), os.pixels() * c2);
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
          for (int p = 0; p < os.pixels(); ++p) {
            d1.row(n).segment(p * c1, c1) = gy.row(n).segment(p * os.channels, c1);
            d2.row(n).segment(p * c2, c2) = gy.row(n).segment(p * os.channels + c1, c2);
          }
        }
        if (need_input_grad) accumulate(i, d1);
        if (src > 0) accumulate(src, d2);
        break;
      }
      case LayerKind::residual_add: {
        const std::size_t src = source_slot(g, i);
        if (need_input_grad) accumulate(i, gy);
        if (src > 0) accumulate(src, gy);
        break;
      }
      case LayerKind::batch_norm: {
        auto gamma = params.fetch(l.weight_name(), w_scratch);
        const int C = in.channels;
        const Eigen::Index M = x.rows() * in.pixels();
        Eigen::Map<const MatrixX<S>> xr(x.data(), M, C);
        Eigen::Map<const MatrixX<S>> gr(gy.data(), M, C);
        const S eps = static_cast<S>(l.bn_epsilon);
        RowVectorX<S> mean, var;
        if (training) {
          mean = trace.bn_mean[i];
          var = trace.bn_var[i];
        } else {
          MatrixX<S> m_scratch, v_scratch;
          mean = params.fetch(l.running_mean_name(), m_scratch).reshaped().transpose();
          var = params.fetch(l.running_var_name(), v_scratch).reshaped().transpose();
        }
        const RowVectorX<S> inv_std = (var.array() + eps).rsqrt().matrix();
        MatrixX<S> xhat = (xr.rowwise() - mean);
        xhat.array().rowwise() *= inv_std.array();
        out[l.weight_name()] = gr.cwiseProduct(xhat).colwise().sum();
        out[l.bias_name()] = gr.colwise().sum();
        if (need_input_grad) {
          MatrixX<S> dxhat = gr;
          dxhat.array().rowwise() *= gamma.reshaped().transpose().array();
          MatrixX<S> dx(M, C);
          if (training) {
            const RowVectorX<S> sum_d = dxhat.colwise().sum();
            const RowVectorX<S> sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
            const S inv_m = S(1) / static_cast<S>(M);
            dx = (dxhat * static_cast<S>(M)).rowwise() - sum_d;
            dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
            dx.array().rowwise() *= (inv_std * inv_m).array();
          } else {
            dx = dxhat;
            dx.array().rowwise() *= inv_std.array();
          }
          accumulate(i, Eigen::Map<MatrixX<S>>(dx.data(), x.rows(), x.cols()));
        }
        break;
      }
      case LayerKind::dropout:
        if (!need_input_grad) break;
        if (training && trace.dropout_masks[i].size() != 0) {
          accumulate(i, gy.cwiseProduct(trace.dropout_masks[i]));
        } else {
          accumulate(i, gy);
        }
        break;
      case LayerKind::relu:
        if (need_input_grad) {
          accumulate(i, (trace.outputs[i].array() > S(0)).select(gy.array(), S(0)).matrix());
        }
        break;
      case LayerKind::softmax:
        throw GraphError(l.name + ": softmax is only supported as the final layer");
    }
  }
  return out;
}

template class GraphParams<float>;
template class GraphParams<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template BasicTrace<float> forward_batch(const NetworkGraph&, const ParamSource<float>&,
                                         const MatrixX<float>&, std::uint64_t,
                                         std::optional<Mode>);
template BasicTrace<double> forward_batch(const NetworkGraph&, const ParamSource<double>&,
                                          const MatrixX<double>&, std::uint64_t,
                                          std::optional<Mode>);

MatrixX<float> predict(const NetworkGraph& graph, const MatrixX<float>& inputs) {
  const GraphParams<float> params(graph);
  constexpr Eigen::Index kChunk = 256;
  MatrixX<float> out(inputs.rows(), graph.output_dim);
  for (Eigen::Index start = 0; start < inputs.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, inputs.rows() - start);
    const MatrixX<float> chunk = inputs.middleRows(start, n);
    out.middleRows(start, n) =
        forward_batch<float>(graph, params, chunk, 0, Mode::inference).outputs.back();
  }
  return out;
}
template GradMap<float> backward_batch(const NetworkGraph&, const ParamSource<float>&,
                                       const BasicTrace<float>&, const MatrixX<float>&, Reduction);
template GradMap<double> backward_batch(const NetworkGraph&, const ParamSource<double>&,
                                        const BasicTrace<double>&, const MatrixX<double>&,
                                        Reduction);

// ---------------------------------------------------------------------------
// Single-sample convenience API

ForwardResult forward(const NetworkGraph& graph, const Tensor& input, std::uint64_t seed) {
  if (input.dtype() != DType::f32 || static_cast<int>(input.size()) != graph.input_dim()) {
    throw GraphError("forward: input must be an f32 tensor with " +
                     std::to_string(graph.input_dim()) + " elements");
  }
  const MatrixX<float> x = ConstMatrixMap<float>(input.values().data(), 1, graph.input_dim());
  ForwardResult result;
  result.trace = forward_batch<float>(graph, GraphParams<float>(graph), x, seed);
  const auto& p = result.trace.probabilities();
  result.output = Tensor::from_matrix(p, {static_cast<std::int64_t>(p.cols())});
  return result;
}

std::map<std::string, Tensor> backward(const NetworkGraph& graph, const ActivationTrace& trace,
                                       const Tensor& target) {
  if (trace.outputs.empty() || static_cast<Eigen::Index>(target.size()) != trace.outputs.back().size()) {
    throw DimensionError("backward: target length does not match network output");
  }
  const MatrixX<float> t =
      ConstMatrixMap<float>(target.values().data(), trace.outputs.back().rows(),
                            trace.outputs.back().cols());
  const auto grads =
      backward_batch<float>(graph, GraphParams<float>(graph), trace, t, Reduction::sum);
  std::map<std::string, Tensor> out;
  for (const auto& [name, g] : grads) {
    out[name] = Tensor::from_matrix(g, graph.params.at(name).shape());
  }
  return out;
}

}  // namespace mededge
