#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace mededge {

struct TsneConfig {
  int out_dims = 2;
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 42;
  /// 0 picks max(n / (4 * exaggeration), 50).
  double learning_rate = 0.0;
  int exaggeration_iters = 250;
  double exaggeration = 12.0;
  int momentum_switch = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
};

inline constexpr int kTsneMaxPoints = 5000;
inline constexpr double kEntropyTolerance = 1e-5;

struct Calibration {
  Eigen::VectorXd beta;           // 1 / (2 sigma^2) per point
  Eigen::VectorXd entropy_error;  // |H_i - ln(perplexity)|
  std::vector<int> flagged;       // points whose error exceeds the tolerance
};

/// Symmetrised joint affinities P (zero diagonal, sums to 1). Throws
/// InputError when perplexity > (n - 1) / 3, quoting the largest feasible
/// value.
Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& points, double perplexity,
                                Calibration* calibration = nullptr);

/// KL(P || Q) for the Student-t affinities Q of embedding Y.
double tsne_kl(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y);
/// dKL/dY.
Eigen::MatrixXd tsne_gradient(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y);

struct TsneResult {
  Eigen::MatrixXd coords;       // n x out_dims
  std::vector<double> kl_trace; // KL against the unexaggerated P, per iteration
  Calibration calibration;
};

/// Exact t-SNE: gradient descent with momentum and per-coordinate gains,
/// early exaggeration, seeded Gaussian initialisation scaled by 1e-4.
TsneResult tsne_embed(const Eigen::MatrixXd& points, const TsneConfig& config = {});

}  // namespace mededge
