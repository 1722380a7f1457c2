#pragma once

// Multinomial logistic regression on fixed representations. Rows of the
// design matrix are examples.

#include "pnpslab/adam.hpp"
#include "pnpslab/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace pnpslab {

enum class ProbeSolver { Newton, Adam };

std::string to_string(ProbeSolver solver);
ProbeSolver parse_probe_solver(std::string_view text);

struct ProbeConfig {
  ProbeSolver solver = ProbeSolver::Newton;
  /// Coefficient of (l2/2)*||theta||^2 added to the mean cross-entropy. The
  /// bias is penalized too, which pins the softmax shift freedom.
  double l2 = 1e-4;
  int max_newton_iters = 100;
  double gradient_tol = 1e-9;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double held_out_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

template <typename Scalar>
struct LinearProbe {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix weight; // K x h
  Vector bias;   // K

  int n_classes() const { return static_cast<int>(weight.rows()); }

  /// n x K
  Matrix logits(const Eigen::Ref<const Matrix>& x) const {
    return (x * weight.transpose()).rowwise() + bias.transpose();
  }

  Matrix log_probs(const Eigen::Ref<const Matrix>& x) const {
    Matrix z = logits(x);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const Scalar m = z.row(r).maxCoeff();
      const Scalar lse = m + std::log((z.row(r).array() - m).exp().sum());
      z.row(r).array() -= lse;
    }
    return z;
  }

  Eigen::VectorXi predict(const Eigen::Ref<const Matrix>& x) const {
    const Matrix z = logits(x);
    Eigen::VectorXi out(z.rows());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      z.row(r).maxCoeff(&best);
      out(r) = static_cast<int>(best);
    }
    return out;
  }

  double accuracy(const Eigen::Ref<const Matrix>& x, const Eigen::VectorXi& labels) const {
    if (labels.size() == 0) return 0.0;
    return double((predict(x).array() == labels.array()).count()) / double(labels.size());
  }

  /// Sum of -log2 p(y|x) over the rows.
  double codelength_bits(const Eigen::Ref<const Matrix>& x, const Eigen::VectorXi& labels) const {
    const Matrix lp = log_probs(x);
    double nats = 0.0;
    for (Eigen::Index r = 0; r < lp.rows(); ++r) nats -= double(lp(r, labels(r)));
    return nats / std::log(2.0);
  }
};

namespace detail {

template <typename Scalar>
struct SoftmaxObjective {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  const Matrix& xa; // n x d, last column ones
  const Eigen::VectorXi& y;
  int k;
  Scalar l2;

  /// Mean cross-entropy plus penalty; fills row-softmax probabilities.
  Scalar value(const Matrix& theta, Matrix* probs = nullptr) const {
    Matrix z = xa * theta.transpose();
    Scalar total = Scalar(0);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const Scalar m = z.row(r).maxCoeff();
      const Scalar target = z(r, y(r));
      z.row(r).array() = (z.row(r).array() - m).exp();
      const Scalar s = z.row(r).sum();
      total += m + std::log(s) - target;
      z.row(r) /= s;
    }
    if (probs) *probs = std::move(z);
    const Scalar n = Scalar(std::max<Eigen::Index>(1, xa.rows()));
    return total / n + Scalar(0.5) * l2 * theta.squaredNorm();
  }

  Matrix gradient(const Matrix& theta, const Matrix& probs) const {
    Matrix residual = probs;
    for (Eigen::Index r = 0; r < residual.rows(); ++r) residual(r, y(r)) -= Scalar(1);
    const Scalar n = Scalar(std::max<Eigen::Index>(1, xa.rows()));
    return residual.transpose() * xa / n + l2 * theta;
  }
};

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> augment(
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& x) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> xa(x.rows(), x.cols() + 1);
  xa.leftCols(x.cols()) = x;
  xa.col(x.cols()).setOnes();
  return xa;
}

template <typename Scalar>
LinearProbe<Scalar> split_theta(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& theta) {
  const Eigen::Index h = theta.cols() - 1;
  return {theta.leftCols(h), theta.col(h)};
}

} // namespace detail

/// Fit a K-class logistic regression on all rows of x. Labels must lie in
/// [0, K). Deterministic: Newton uses no randomness, Adam shuffles with
/// cfg.seed.
template <typename Scalar>
LinearProbe<Scalar> fit_softmax_regression(
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& x, const Eigen::VectorXi& y,
    int n_classes, const ProbeConfig& cfg) {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (x.rows() != y.size()) throw ArgumentError("probe design matrix and labels differ in length");
  if (n_classes < 2) throw ArgumentError("a probe needs at least two classes");
  if (y.size() > 0 && (y.minCoeff() < 0 || y.maxCoeff() >= n_classes))
    throw ArgumentError("probe label outside [0, K)");

  const Matrix xa = detail::augment<Scalar>(x);
  const Eigen::Index d = xa.cols();
  const int k = n_classes;
  detail::SoftmaxObjective<Scalar> obj{xa, y, k, Scalar(cfg.l2)};
  Matrix theta = Matrix::Zero(k, d);

  if (cfg.solver == ProbeSolver::Newton) {
    const Scalar n = Scalar(std::max<Eigen::Index>(1, xa.rows()));
    Matrix probs;
    Scalar f = obj.value(theta, &probs);
    for (int iter = 0; iter < cfg.max_newton_iters; ++iter) {
      const Matrix grad = obj.gradient(theta, probs);
      if (grad.cwiseAbs().maxCoeff() < Scalar(cfg.gradient_tol)) break;
      // Hessian over theta flattened row-major: index = class * d + column.
      Matrix hess = Matrix::Zero(k * d, k * d);
      for (int a = 0; a < k; ++a)
        for (int c = a; c < k; ++c) {
          Vector s = probs.col(a).cwiseProduct((a == c ? Vector::Ones(probs.rows()) : Vector::Zero(probs.rows())) -
                                               probs.col(c)) /
                     n;
          const Matrix block = xa.transpose() * (xa.array().colwise() * s.array()).matrix();
          hess.block(a * d, c * d, d, d) = block;
          if (c != a) hess.block(c * d, a * d, d, d) = block.transpose();
        }
      hess.diagonal().array() += Scalar(cfg.l2);
      Vector g(k * d);
      for (int a = 0; a < k; ++a) g.segment(a * d, d) = grad.row(a).transpose();
      const Vector step = hess.ldlt().solve(g);
      const Scalar slope = g.dot(step);
      if (!(slope > Scalar(0))) break;
      Scalar t = Scalar(1);
      bool accepted = false;
      for (int ls = 0; ls < 40; ++ls) {
        Matrix trial = theta;
        for (int a = 0; a < k; ++a) trial.row(a) -= t * step.segment(a * d, d).transpose();
        Matrix trial_probs;
        const Scalar ft = obj.value(trial, &trial_probs);
        if (ft <= f - Scalar(1e-4) * t * slope) {
          theta = std::move(trial);
          probs = std::move(trial_probs);
          const Scalar decrease = f - ft;
          f = ft;
          accepted = true;
          if (decrease <= Scalar(1e-15) * std::max(Scalar(1), std::abs(f))) iter = cfg.max_newton_iters;
          break;
        }
        t *= Scalar(0.5);
      }
      if (!accepted) break;
    }
  } else {
    std::mt19937_64 rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(xa.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index(0));
    Vector flat = Vector::Zero(k * d), m = Vector::Zero(k * d), v = Vector::Zero(k * d);
    const AdamConfig adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
    long step = 0;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t len = std::min(batch, order.size() - start);
        Matrix xb(static_cast<Eigen::Index>(len), d);
        Eigen::VectorXi yb(static_cast<Eigen::Index>(len));
        for (std::size_t i = 0; i < len; ++i) {
          xb.row(static_cast<Eigen::Index>(i)) = xa.row(order[start + i]);
          yb(static_cast<Eigen::Index>(i)) = y(order[start + i]);
        }
        detail::SoftmaxObjective<Scalar> batch_obj{xb, yb, k, Scalar(cfg.l2)};
        theta = Eigen::Map<const Matrix>(flat.data(), d, k).transpose();
        Matrix probs;
        batch_obj.value(theta, &probs);
        const Matrix grad = batch_obj.gradient(theta, probs);
        const Matrix grad_t = grad.transpose();
        adam_update<Scalar>(flat, Eigen::Map<const Vector>(grad_t.data(), k * d), m, v, adam, ++step);
      }
    }
    theta = Eigen::Map<const Matrix>(flat.data(), d, k).transpose();
  }
  if (!theta.allFinite()) throw NumericError("probe fit produced non-finite weights");
  return detail::split_theta<Scalar>(theta);
}

} // namespace pnpslab
