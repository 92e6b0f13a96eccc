#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mededge/layers.hpp"
#include "mededge/tensor.hpp"

namespace mededge {

enum class LayerKind {
  dense,
  conv2d,
  maxpool,
  concat,
  residual_add,
  batch_norm,
  dropout,
  relu,
  softmax
};

enum class Mode { training, inference };

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  int fan_in = 0;   // dense
  int fan_out = 0;  // dense
  int kernel = 0;   // conv2d, maxpool
  int stride = 1;   // conv2d, maxpool
  int channels = 0; // conv2d output channels
  double drop_prob = 0.15;
  double bn_decay = 0.9997;
  double bn_epsilon = 0.001;
  std::string source;  // residual_add / concat: layer name joined in, or "input"

  bool has_params() const noexcept {
    return kind == LayerKind::dense || kind == LayerKind::conv2d || kind == LayerKind::batch_norm;
  }
  std::string weight_name() const { return name + ".weight"; }
  std::string bias_name() const { return name + ".bias"; }
  std::string running_mean_name() const { return name + ".running_mean"; }
  std::string running_var_name() const { return name + ".running_var"; }
  std::string bn_count_name() const { return name + ".bn_count"; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Ordered layer list plus parameters. Trainable parameters live in `params`;
/// batch-norm running statistics live in `buffers`. Layers may refer back to
/// an earlier layer through `LayerSpec::source`, which is how residual
/// shortcuts and concatenations are expressed in a linear list.
struct NetworkGraph {
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  Shape3 input_shape;
  int output_dim = 0;
  Mode mode = Mode::training;
  /// Bumped whenever parameters are updated in place; traces record it.
  std::uint64_t version = 0;

  int input_dim() const noexcept { return input_shape.size(); }
  const LayerSpec* find_layer(std::string_view name) const;
};

/// Output shape of every layer; throws GraphError on incompatible neighbours.
std::vector<Shape3> layer_shapes(const NetworkGraph& graph);

/// Shape checks plus parameter presence/shape checks.
void validate(const NetworkGraph& graph);

std::size_t count_parameters(const NetworkGraph& graph);

/// Uniform He-style initialisation scaled by fan-in; biases zero, batch-norm
/// gamma one, running variance one.
void init_parameters(NetworkGraph& graph, std::uint64_t seed);

/// Fully connected classifier: n_hidden blocks of dense -> relu (-> dropout on
/// odd 1-based hidden index), then dense -> softmax.
struct DnnSpec {
  int input_dim = 50;
  int hidden_width = 64;
  int n_hidden = 4;
  int output_dim = 100;
  double drop_prob = 0.15;

  static DnnSpec full_scale() { return {237, 820, 16, 1537, 0.15}; }
  static DnnSpec desk_scale() { return {50, 64, 4, 100, 0.15}; }
};

NetworkGraph make_dnn(const DnnSpec& spec, std::uint64_t seed);

/// Plain dense stack widths[0] -> ... -> widths.back() with relu between and
/// softmax on top; no dropout.
NetworkGraph make_mlp(const std::vector<int>& widths, std::uint64_t seed);

/// Small residual image classifier: conv-bn-relu-pool, one identity residual
/// block, pool, dense hidden layer with dropout, dense to classes.
struct CnnSpec {
  Shape3 input{32, 32, 3};
  int channels = 8;
  int hidden_width = 32;
  int classes = 26;
  double drop_prob = 0.15;
};

NetworkGraph make_skin_cnn(const CnnSpec& spec, std::uint64_t seed);

/// Supplies parameter and buffer tensors to the executor as matrices of the
/// requested scalar type. Implementations may back the returned view with
/// `scratch` (dequantisation, widening) or point straight at their storage.
template <typename S>
class ParamSource {
 public:
  virtual ~ParamSource() = default;
  virtual ConstMatrixMap<S> fetch(const std::string& name, MatrixX<S>& scratch) const = 0;
};

/// Reads from a graph's params and buffers; f32 tensors are viewed in place
/// when S is float, q8 tensors are dequantised into scratch.
template <typename S>
class GraphParams final : public ParamSource<S> {
 public:
  explicit GraphParams(const NetworkGraph& graph) : graph_(graph) {}
  ConstMatrixMap<S> fetch(const std::string& name, MatrixX<S>& scratch) const override;

 private:
  const NetworkGraph& graph_;
};

/// Owning name -> matrix store, used for wide-precision copies of a graph.
template <typename S>
class ParamStore final : public ParamSource<S> {
 public:
  ParamStore() = default;
  explicit ParamStore(const NetworkGraph& graph);
  ConstMatrixMap<S> fetch(const std::string& name, MatrixX<S>& scratch) const override;
  MatrixX<S>& at(const std::string& name) { return values_.at(name); }
  std::map<std::string, MatrixX<S>>& values() { return values_; }

 private:
  std::map<std::string, MatrixX<S>> values_;
};

/// Per-layer intermediate state retained from a forward pass.
template <typename S>
struct BasicTrace {
  MatrixX<S> input;
  std::vector<MatrixX<S>> outputs;  // one per layer
  std::vector<Shape3> shapes;       // output shape per layer
  std::vector<MatrixX<S>> dropout_masks;
  std::vector<std::vector<int>> pool_argmax;
  std::vector<RowVectorX<S>> bn_mean;  // batch statistics, training mode only
  std::vector<RowVectorX<S>> bn_var;
  std::uint64_t graph_version = 0;
  Mode mode = Mode::inference;

  std::size_t size() const noexcept { return outputs.size(); }
  const MatrixX<S>& probabilities() const { return outputs.back(); }
};

using ActivationTrace = BasicTrace<float>;

template <typename S>
using GradMap = std::map<std::string, MatrixX<S>>;

enum class Reduction { mean, sum };

/// Runs every layer on a batch. Training mode draws dropout masks from `seed`
/// and normalises with batch statistics; inference mode makes dropout the
/// identity and uses running statistics.
/// `mode` overrides graph.mode when given.
template <typename S>
BasicTrace<S> forward_batch(const NetworkGraph& graph, const ParamSource<S>& params,
                            const MatrixX<S>& input, std::uint64_t seed,
                            std::optional<Mode> mode = std::nullopt);

/// Inference-mode class probabilities for every row of `inputs`.
MatrixX<float> predict(const NetworkGraph& graph, const MatrixX<float>& inputs);

/// Gradients of the cross-entropy loss against one-hot `targets` with respect
/// to every trainable parameter.
template <typename S>
GradMap<S> backward_batch(const NetworkGraph& graph, const ParamSource<S>& params,
                          const BasicTrace<S>& trace, const MatrixX<S>& targets,
                          Reduction reduction = Reduction::mean);

struct ForwardResult {
  Tensor output;  // probability vector
  ActivationTrace trace;
};

ForwardResult forward(const NetworkGraph& graph, const Tensor& input, std::uint64_t seed = 0);

std::map<std::string, Tensor> backward(const NetworkGraph& graph, const ActivationTrace& trace,
                                       const Tensor& target);

/// Index of the layer whose input is the final hidden representation (the
/// last dense layer); throws GraphError when there is no hidden layer.
std::size_t embedding_layer(const NetworkGraph& graph);

}  // namespace mededge
