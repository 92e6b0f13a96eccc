#include "mededge/tsne.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "mededge/errors.hpp"
#include "mededge/random.hpp"

namespace mededge {

namespace {

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd D(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = (X.row(i) - X.row(j)).squaredNorm();
      D(i, j) = d;
      D(j, i) = d;
    }
  }
  return D;
}

// Student-t numerators 1 / (1 + |y_i - y_j|^2), zero diagonal.
Eigen::MatrixXd student_numerators(const Eigen::MatrixXd& Y) {
  Eigen::MatrixXd num = squared_distances(Y);
  num = (1.0 + num.array()).inverse().matrix();
  num.diagonal().setZero();
  return num;
}

}  // namespace

Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& X, double perplexity, Calibration* calibration) {
  const Eigen::Index n = X.rows();
  if (n < 4) throw InputError("t-SNE needs at least 4 points, got " + std::to_string(n));
  if (n > kTsneMaxPoints) throw InputError("exact t-SNE is capped at " + std::to_string(kTsneMaxPoints) + " points");
  const double max_perplexity = static_cast<double>(n - 1) / 3.0;
  if (!(perplexity > 1.0 && perplexity <= max_perplexity)) {
    throw InputError("perplexity " + std::to_string(perplexity) + " is infeasible for " + std::to_string(n) +
                     " points; it must be in (1, " + std::to_string(max_perplexity) + "]");
  }
  const Eigen::MatrixXd D = squared_distances(X);
  const double target = std::log(perplexity);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  Calibration cal;
  cal.beta.resize(n);
  cal.entropy_error.resize(n);
  Eigen::VectorXd row(n);

  for (Eigen::Index i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, D(i, j));
    }
    // Entropy of the conditional distribution at precision beta; distances
    // are shifted by their minimum so the exponentials cannot all underflow.
    auto entropy_at = [&](double beta) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0.0;
          continue;
        }
        const double shifted = D(i, j) - dmin;
        row[j] = std::exp(-beta * shifted);
        sum += row[j];
        weighted += shifted * row[j];
      }
      row /= sum;
      return std::log(sum) + beta * weighted / sum;
    };
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double h = entropy_at(beta);
    for (int it = 0; it < 200 && std::abs(h - target) > 1e-10; ++it) {
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
      h = entropy_at(beta);
    }
    cal.beta[i] = beta;
    cal.entropy_error[i] = std::abs(h - target);
    if (cal.entropy_error[i] > kEntropyTolerance) cal.flagged.push_back(static_cast<int>(i));
    P.row(i) = row.transpose();
  }
  if (calibration) *calibration = std::move(cal);
  Eigen::MatrixXd joint = (P + P.transpose()) / (2.0 * static_cast<double>(n));
  return joint;
}

double tsne_kl(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y) {
  const Eigen::MatrixXd num = student_numerators(Y);
  const double z = num.sum();
  double kl = 0.0;
  for (Eigen::Index j = 0; j < P.cols(); ++j) {
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      const double p = P(i, j);
      if (i != j && p > 0.0) kl += p * std::log(p / (num(i, j) / z));
    }
  }
  return kl;
}

Eigen::MatrixXd tsne_gradient(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y) {
  const Eigen::MatrixXd num = student_numerators(Y);
  const double z = num.sum();
  const Eigen::MatrixXd W = ((P - num / z).array() * num.array()).matrix();
  // grad_i = 4 * sum_j W_ij (y_i - y_j)
  return 4.0 * (W.rowwise().sum().asDiagonal() * Y - W * Y);
}

TsneResult tsne_embed(const Eigen::MatrixXd& X, const TsneConfig& cfg) {
  if (cfg.out_dims != 2 && cfg.out_dims != 3) throw InputError("t-SNE output dimension must be 2 or 3");
  if (cfg.iterations < 1) throw InputError("t-SNE needs at least one iteration");
  TsneResult result;
  const Eigen::MatrixXd P = tsne_affinities(X, cfg.perplexity, &result.calibration);
  const Eigen::Index n = X.rows();

  Rng rng(cfg.seed);
  Eigen::MatrixXd Y(n, cfg.out_dims);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index d = 0; d < cfg.out_dims; ++d) Y(i, d) = 1e-4 * rng.normal();
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, cfg.out_dims);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, cfg.out_dims);
  result.kl_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  const double lr = cfg.learning_rate > 0.0
                        ? cfg.learning_rate
                        : std::max(static_cast<double>(n) / (4.0 * cfg.exaggeration), 50.0);

  for (int it = 0; it < cfg.iterations; ++it) {
    const double exaggeration = it < cfg.exaggeration_iters ? cfg.exaggeration : 1.0;
    const double momentum = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;
    const Eigen::MatrixXd grad = tsne_gradient(exaggeration * P, Y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index d = 0; d < cfg.out_dims; ++d) {
        const bool same_sign = (grad(i, d) > 0) == (update(i, d) > 0);
        gains(i, d) = same_sign ? std::max(gains(i, d) * 0.8, 0.01) : gains(i, d) + 0.2;
        update(i, d) = momentum * update(i, d) - lr * gains(i, d) * grad(i, d);
      }
    }
    Y += update;
    Y.rowwise() -= Y.colwise().mean();
    result.kl_trace.push_back(tsne_kl(P, Y));
  }
  result.coords = std::move(Y);
  return result;
}

}  // namespace mededge
