#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mededge/infer.hpp"
#include "mededge/tensor.hpp"

namespace mededge {

/// Fraction of rows whose label ranks within the top k; ties rank the lower
/// class id first. Rows must sum to 1 within 1e-4.
template <typename S>
double topk_accuracy(const MatrixX<S>& probs, std::span<const int> labels, int k);

/// Mean of -ln p_true with p clamped at 1e-12.
template <typename S>
double mean_cross_entropy(const MatrixX<S>& probs, std::span<const int> labels);

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  double mean_cross_entropy = 0.0;
  std::size_t n = 0;
  /// confusion[true][predicted], predicted = top-ranked class.
  std::vector<std::vector<std::int64_t>> confusion;
};

template <typename S>
EvalReport evaluate(const MatrixX<S>& probs, std::span<const int> labels);

struct EmbeddingSet {
  MatrixX<float> vectors;  // one row per input
  std::vector<int> labels;
  std::string fingerprint;
};

/// Final hidden-layer activations; GraphError for a model without a hidden
/// layer.
EmbeddingSet extract_embeddings(const ModelHandle& handle, const MatrixX<float>& inputs,
                                std::vector<int> labels);

/// One row per point, comma separated, label in the last column.
template <typename S>
std::string points_csv(const MatrixX<S>& points, std::span<const int> labels);

/// Mean silhouette over all points (Euclidean); singleton clusters score 0.
double silhouette_score(const Eigen::MatrixXd& points, std::span<const int> labels);

}  // namespace mededge
