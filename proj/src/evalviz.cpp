#include "mededge/evalviz.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace mededge {

namespace {

template <typename S>
void check_predictions(const MatrixX<S>& probs, std::span<const int> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw InputError(std::to_string(probs.rows()) + " prediction rows for " + std::to_string(labels.size()) +
                     " labels");
  }
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const double sum = probs.row(r).template cast<double>().sum();
    if (!(std::abs(sum - 1.0) <= 1e-4)) {
      throw InputError("prediction row " + std::to_string(r) + " sums to " + std::to_string(sum) +
                       ", not 1");
    }
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= probs.cols()) {
      throw InputError("label " + std::to_string(y) + " at row " + std::to_string(r) + " is out of range");
    }
  }
}

// 0-based rank of `label` under the descending-probability, ascending-id order.
template <typename S>
Eigen::Index rank_of(const MatrixX<S>& probs, Eigen::Index r, int label) {
  const S pt = probs(r, label);
  Eigen::Index rank = 0;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    const S p = probs(r, c);
    if (p > pt || (p == pt && c < label)) ++rank;
  }
  return rank;
}

template <typename S>
Eigen::Index top_class(const MatrixX<S>& probs, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < probs.cols(); ++c) {
    if (probs(r, c) > probs(r, best)) best = c;
  }
  return best;
}

}  // namespace

template <typename S>
double topk_accuracy(const MatrixX<S>& probs, std::span<const int> labels, int k) {
  check_predictions(probs, labels);
  if (k < 1 || k > probs.cols()) {
    throw InputError("k must be in [1, " + std::to_string(probs.cols()) + "], got " + std::to_string(k));
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    if (rank_of(probs, r, labels[static_cast<std::size_t>(r)]) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

template <typename S>
double mean_cross_entropy(const MatrixX<S>& probs, std::span<const int> labels) {
  check_predictions(probs, labels);
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const double p = static_cast<double>(probs(r, labels[static_cast<std::size_t>(r)]));
    total += -std::log(std::max(p, 1e-12));
  }
  return total / static_cast<double>(labels.size());
}

template <typename S>
EvalReport evaluate(const MatrixX<S>& probs, std::span<const int> labels) {
  EvalReport rep;
  rep.n = labels.size();
  rep.top1 = topk_accuracy(probs, labels, 1);
  rep.top5 = topk_accuracy(probs, labels, std::min<int>(5, static_cast<int>(probs.cols())));
  rep.mean_cross_entropy = mean_cross_entropy(probs, labels);
  const auto C = static_cast<std::size_t>(probs.cols());
  rep.confusion.assign(C, std::vector<std::int64_t>(C, 0));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    ++rep.confusion[static_cast<std::size_t>(labels[static_cast<std::size_t>(r)])]
                   [static_cast<std::size_t>(top_class(probs, r))];
  }
  return rep;
}

EmbeddingSet extract_embeddings(const ModelHandle& handle, const MatrixX<float>& inputs, std::vector<int> labels) {
  if (!labels.empty() && labels.size() != static_cast<std::size_t>(inputs.rows())) {
    throw InputError("labels and inputs differ in length");
  }
  EmbeddingSet set;
  set.vectors = handle.embed(inputs);
  set.labels = std::move(labels);
  set.fingerprint = handle.fingerprint();
  return set;
}

template <typename S>
std::string points_csv(const MatrixX<S>& points, std::span<const int> labels) {
  if (static_cast<std::size_t>(points.rows()) != labels.size()) throw InputError("labels and points differ in length");
  std::string out;
  char buf[32];
  for (Eigen::Index r = 0; r < points.rows(); ++r) {
    for (Eigen::Index c = 0; c < points.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.9g,", static_cast<double>(points(r, c)));
      out += buf;
    }
    out += std::to_string(labels[static_cast<std::size_t>(r)]) + "\n";
  }
  return out;
}

double silhouette_score(const Eigen::MatrixXd& points, std::span<const int> labels) {
  const Eigen::Index n = points.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw InputError("labels and points differ in length");
  if (n == 0) return 0.0;
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw InputError("cluster labels must be non-negative");
    max_label = std::max(max_label, l);
  }
  const auto K = static_cast<std::size_t>(max_label + 1);
  std::vector<Eigen::Index> sizes(K, 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
  double total = 0.0;
  std::vector<double> sums(K);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) sums[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += (points.row(i) - points.row(j)).norm();
    }
    const auto own = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (sizes[own] < 2) continue;
    const double a = sums[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (k != own && sizes[k] > 0) b = std::min(b, sums[k] / static_cast<double>(sizes[k]));
    }
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

template double topk_accuracy(const MatrixX<float>&, std::span<const int>, int);
template double topk_accuracy(const MatrixX<double>&, std::span<const int>, int);
template double mean_cross_entropy(const MatrixX<float>&, std::span<const int>);
template double mean_cross_entropy(const MatrixX<double>&, std::span<const int>);
template EvalReport evaluate(const MatrixX<float>&, std::span<const int>);
template EvalReport evaluate(const MatrixX<double>&, std::span<const int>);
template std::string points_csv(const MatrixX<float>&, std::span<const int>);
template std::string points_csv(const MatrixX<double>&, std::span<const int>);

}  // namespace mededge
