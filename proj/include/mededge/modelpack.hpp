#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mededge/bundle.hpp"
#include "mededge/network.hpp"
#include "mededge/train.hpp"

namespace mededge {

// ---------------------------------------------------------------------------
// Manifest: one line per record, comma-separated fields.
//
//   input,<h>,<w>,<c>
//   output,<n>
//   mode,<training|inference>
//   provenance,<hex>            frozen models: hash of the source checkpoint
//   digest,<hex>                hash over tensor names and checksums
//   train,epoch=..,step=..,config=..,beta1=..,beta2=..,epsilon=..
//   history,<epoch>,<loss>,<accuracy>
//   <kind>,<name>[,key=value...]   one per layer, in order

struct ManifestInfo {
  NetworkGraph graph;  // layers, shapes and mode; no tensors
  std::string provenance;
  std::string digest;
  bool has_training = false;
  int epoch = 0;
  std::int64_t step = 0;
  std::uint64_t config_hash = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::vector<EpochLog> history;
};

std::string encode_manifest(const ManifestInfo& info);
/// Throws IntegrityError on malformed text.
ManifestInfo decode_manifest(std::string_view text);

// ---------------------------------------------------------------------------
// Checkpoints share the bundle container with flag bit 0 set; optimizer
// moments are stored as "opt/m/<param>" and "opt/v/<param>".

inline constexpr std::string_view kOptimizerPrefix = "opt/";

Bytes encode_checkpoint(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Verifies integrity first; IntegrityError names the failing tensor.
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------

/// Inference-mode graph with every parameter embedded as a constant.
struct FrozenGraph {
  NetworkGraph graph;
  std::string provenance;
};

/// Drops optimizer state, switches to inference mode.
FrozenGraph freeze(const Checkpoint& ckpt);
FrozenGraph freeze(const std::filesystem::path& checkpoint_path);

/// Removes dropout layers and folds batch norm into a directly preceding
/// dense or conv layer whose output feeds nothing else.
FrozenGraph prune_for_inference(const FrozenGraph& frozen);

// ---------------------------------------------------------------------------
// Affine uint8 quantisation, one scale per tensor.

/// Range is widened to include zero; scale is (hi - lo) / 255 rounded up to a
/// 16-bit mantissa so that scale * (q - zero_point) is exact in f32.
QuantParams choose_quant_params(float min_value, float max_value);
/// q = clamp(round_half_away(x / scale) + zero_point, 0, 255).
Tensor quantize_tensor(const Tensor& t);
Tensor dequantize_tensor(const Tensor& q);

struct BundleSummary {
  BundleLayout layout;
  std::uint64_t f32_blob_bytes = 0;  // blob size had every tensor been stored as f32
  std::uint64_t file_bytes = 0;
  std::string fingerprint;
  double blob_ratio() const {
    return f32_blob_bytes ? static_cast<double>(layout.blob_size) / f32_blob_bytes : 1.0;
  }
};

/// Bundle image of a frozen graph; f32 tensors are quantised when asked,
/// tensors already in q8 are stored as they are.
Bytes encode_frozen(const FrozenGraph& frozen, bool quantize);
BundleSummary pack_bundle(const FrozenGraph& frozen, bool quantize, const std::filesystem::path& out);
/// Summary of an existing file (no checksum verification).
BundleSummary summarize_bundle(std::span<const std::uint8_t> file);

/// Reads a frozen bundle (f32 or q8) into an owning graph.
FrozenGraph load_frozen(const std::filesystem::path& path);

std::string fingerprint_of(std::string_view manifest);

// ---------------------------------------------------------------------------

struct LayerFlops {
  std::string layer;
  std::uint64_t flops = 0;
};

struct FlopsReport {
  std::vector<LayerFlops> per_layer;
  std::uint64_t total = 0;
  double device_budget = 0.0;
  double over_budget_factor = 0.0;
};

/// dense (2*n_in + 1)*n_out; conv 2*k*k*c_in*c_out*H_out*W_out; relu,
/// softmax and residual_add 1 per element; batch norm 2 per element; maxpool
/// k*k - 1 comparisons per output; dropout and concat free.
FlopsReport estimate_flops(const NetworkGraph& graph);
double budget_check(FlopsReport& report, double device_flops);

}  // namespace mededge
