#pragma once

// Small sequence classifier with hand-written backpropagation:
//
//   tokens -> embedding -> single-layer LSTM -> tanh MLP -> linear head
//
// The representation read-out is the tanh MLP activation (the input of the
// head). Batches are column-major: a TokenMatrix is seq_len x batch and every
// activation matrix holds one example per column.

#include "pnpslab/adam.hpp"
#include "pnpslab/datagen.hpp"
#include "pnpslab/errors.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace pnpslab {

enum class Encoder { Lstm, MeanPool };

std::string to_string(Encoder encoder);
Encoder parse_encoder(std::string_view text);

struct ModelConfig {
  int vocab_size = 1000;
  int embed_dim = 32;
  int hidden_dim = 64;
  int mlp_hidden = 64;
  int n_classes = 2;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
  Encoder encoder = Encoder::Lstm;
  /// Feed the sequence last-to-first, so positions 1-2 are read last.
  bool reverse_input = true;

  void validate() const;
  int encoder_dim() const { return encoder == Encoder::Lstm ? hidden_dim : embed_dim; }

  bool operator==(const ModelConfig&) const = default;
};

using TokenMatrix = Eigen::Matrix<Token, Eigen::Dynamic, Eigen::Dynamic>;

enum class Reduction {
  /// sum_n w_n * loss_n / sum_n w_n (zero when all weights are zero)
  WeightedMean,
  /// sum_n w_n * loss_n
  WeightedSum,
};

/// All trainable tensors. Gate rows of the cell are ordered (input, forget,
/// candidate, output).
template <typename Scalar>
struct Parameters {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix embedding;      // embed_dim x vocab_size, one column per token
  Matrix cell_input;     // 4*hidden x embed_dim
  Matrix cell_recurrent; // 4*hidden x hidden
  Vector cell_bias;      // 4*hidden
  Matrix mlp_weight;     // mlp_hidden x encoder_dim
  Vector mlp_bias;       // mlp_hidden
  Matrix head_weight;    // n_classes x mlp_hidden
  Vector head_bias;      // n_classes

  static Parameters zeros(const ModelConfig& cfg) {
    const int h4 = cfg.encoder == Encoder::Lstm ? 4 * cfg.hidden_dim : 0;
    const int h = cfg.encoder == Encoder::Lstm ? cfg.hidden_dim : 0;
    Parameters p;
    p.embedding = Matrix::Zero(cfg.embed_dim, cfg.vocab_size);
    p.cell_input = Matrix::Zero(h4, cfg.encoder == Encoder::Lstm ? cfg.embed_dim : 0);
    p.cell_recurrent = Matrix::Zero(h4, h);
    p.cell_bias = Vector::Zero(h4);
    p.mlp_weight = Matrix::Zero(cfg.mlp_hidden, cfg.encoder_dim());
    p.mlp_bias = Vector::Zero(cfg.mlp_hidden);
    p.head_weight = Matrix::Zero(cfg.n_classes, cfg.mlp_hidden);
    p.head_bias = Vector::Zero(cfg.n_classes);
    return p;
  }

  /// Calls f(name, flat_view_of_p1, flat_view_of_p2, ...) for every block,
  /// in declaration order.
  template <class F, class... Ps>
  static void zip(F&& f, Ps&... ps) {
    f("embedding", flat(ps.embedding)...);
    f("cell_input", flat(ps.cell_input)...);
    f("cell_recurrent", flat(ps.cell_recurrent)...);
    f("cell_bias", flat(ps.cell_bias)...);
    f("mlp_weight", flat(ps.mlp_weight)...);
    f("mlp_bias", flat(ps.mlp_bias)...);
    f("head_weight", flat(ps.head_weight)...);
    f("head_bias", flat(ps.head_bias)...);
  }

  Eigen::Index size() const {
    Eigen::Index n = 0;
    zip([&n](std::string_view, const auto& v) { n += v.size(); }, *this);
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    zip([&ok](std::string_view, const auto& v) { ok = ok && v.allFinite(); }, *this);
    return ok;
  }

  std::string first_non_finite_block() const {
    std::string name;
    zip([&name](std::string_view n, const auto& v) {
      if (name.empty() && !v.allFinite()) name = n;
    }, *this);
    return name;
  }

private:
  template <class M>
  static auto flat(M& m) {
    if constexpr (std::is_const_v<M>)
      return Eigen::Map<const Vector>(m.data(), m.size());
    else
      return Eigen::Map<Vector>(m.data(), m.size());
  }
};

template <typename Scalar>
struct LossAndGrad {
  Scalar loss = Scalar(0);
  Parameters<Scalar> grad;
  /// Unweighted cross-entropy per example.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> per_example;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> logits;
};

template <typename Scalar>
struct BatchOutput {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> logits;         // n_classes x batch
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> representation; // mlp_hidden x batch
};

/// Column-wise softmax.
template <typename Derived>
auto softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> p =
      (logits.rowwise() - logits.colwise().maxCoeff()).array().exp().matrix();
  p.array().rowwise() /= p.colwise().sum().array();
  return p;
}

template <typename Scalar = double>
class SequenceClassifier {
public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  /// Uniform init in [-init_scale, init_scale], deterministic in the seed.
  explicit SequenceClassifier(const ModelConfig& cfg) : cfg_(cfg), params_(Parameters<Scalar>::zeros(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    std::uniform_real_distribution<double> u(-cfg_.init_scale, cfg_.init_scale);
    Parameters<Scalar>::zip([&](std::string_view, auto v) {
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = Scalar(u(rng));
    }, params_);
  }

  SequenceClassifier(const ModelConfig& cfg, Parameters<Scalar> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    const auto expected = Parameters<Scalar>::zeros(cfg_);
    bool same = true;
    Parameters<Scalar>::zip([&](std::string_view, const auto& a, const auto& b) { same = same && a.size() == b.size(); },
                            expected, params_);
    if (!same) throw ConfigError("parameter shapes do not match the model config");
  }

  static SequenceClassifier zeros(const ModelConfig& cfg) { return SequenceClassifier(cfg, Parameters<Scalar>::zeros(cfg)); }

  const ModelConfig& config() const noexcept { return cfg_; }
  const Parameters<Scalar>& params() const noexcept { return params_; }
  Parameters<Scalar>& params() noexcept { return params_; }

  BatchOutput<Scalar> forward(const TokenMatrix& tokens) const {
    Cache cache;
    run_forward(tokens, cache);
    return {std::move(cache.logits), std::move(cache.rep)};
  }

  struct Output {
    Vector logits;
    Vector representation;
  };

  Output forward(std::span<const Token> tokens) const {
    TokenMatrix column(static_cast<Eigen::Index>(tokens.size()), 1);
    for (std::size_t t = 0; t < tokens.size(); ++t) column(static_cast<Eigen::Index>(t), 0) = tokens[t];
    auto out = forward(column);
    return {out.logits.col(0), out.representation.col(0)};
  }

  /// Weighted cross-entropy and its exact gradient.
  ///
  /// `logit_offsets` (n_classes x batch, optional) are added to the logits
  /// before the softmax; the gradient flows only into this model.
  LossAndGrad<Scalar> loss_and_grad(const TokenMatrix& tokens, const Eigen::VectorXi& labels, const Vector& weights,
                                    const Matrix* logit_offsets = nullptr,
                                    Reduction reduction = Reduction::WeightedMean) const {
    check_batch(labels, weights, logit_offsets, tokens.cols());
    return loss_and_grad_with(
        tokens, labels, [&weights](const Vector&) { return weights; }, logit_offsets, reduction);
  }

  /// As loss_and_grad, but the example weights are computed from the
  /// unweighted per-example losses of this very forward pass.
  template <class WeightFn>
  LossAndGrad<Scalar> loss_and_grad_with(const TokenMatrix& tokens, const Eigen::VectorXi& labels,
                                         WeightFn&& weight_fn, const Matrix* logit_offsets = nullptr,
                                         Reduction reduction = Reduction::WeightedMean) const {
    const Eigen::Index batch = tokens.cols();
    check_batch(labels, Vector::Zero(batch), logit_offsets, batch);
    Cache cache;
    run_forward(tokens, cache);

    LossAndGrad<Scalar> out;
    out.grad = Parameters<Scalar>::zeros(cfg_);
    out.logits = cache.logits;
    Matrix z = cache.logits;
    if (logit_offsets) z += *logit_offsets;
    const Matrix prob = softmax_columns(z);
    out.per_example.resize(batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const Scalar m = z.col(b).maxCoeff();
      out.per_example(b) = m + std::log((z.col(b).array() - m).exp().sum()) - z(labels(b), b);
    }

    const Vector weights = weight_fn(out.per_example);
    check_batch(labels, weights, logit_offsets, batch);
    const Scalar total_w = weights.sum();
    Scalar norm = Scalar(1);
    if (reduction == Reduction::WeightedMean) norm = total_w > Scalar(0) ? total_w : Scalar(0);
    if (norm == Scalar(0)) {
      out.loss = Scalar(0);
      return out;
    }
    out.loss = weights.dot(out.per_example) / norm;

    Matrix dlogits = prob;
    for (Eigen::Index b = 0; b < batch; ++b) dlogits(labels(b), b) -= Scalar(1);
    dlogits.array().rowwise() *= (weights / norm).transpose().array();
    backward(tokens, cache, dlogits, out.grad);
    return out;
  }

  Scalar loss(const TokenMatrix& tokens, const Eigen::VectorXi& labels, const Vector& weights,
              const Matrix* logit_offsets = nullptr, Reduction reduction = Reduction::WeightedMean) const {
    const Eigen::Index batch = tokens.cols();
    check_batch(labels, weights, logit_offsets, batch);
    Cache cache;
    run_forward(tokens, cache);
    Matrix z = cache.logits;
    if (logit_offsets) z += *logit_offsets;
    Scalar acc = Scalar(0);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const Scalar m = z.col(b).maxCoeff();
      acc += weights(b) * (m + std::log((z.col(b).array() - m).exp().sum()) - z(labels(b), b));
    }
    const Scalar total_w = weights.sum();
    if (reduction == Reduction::WeightedSum) return acc;
    return total_w > Scalar(0) ? acc / total_w : Scalar(0);
  }

private:
  struct Cache {
    std::vector<Matrix> x;                    // embed_dim x batch, processing order
    std::vector<Matrix> i, f, g, o, c, h;     // hidden x batch
    std::vector<Eigen::Index> position;       // token row consumed at each step
    Matrix encoded, rep, logits;
  };

  void check_batch(const Eigen::VectorXi& labels, const Vector& weights, const Matrix* offsets,
                   Eigen::Index batch) const {
    if (labels.size() != batch || weights.size() != batch)
      throw ArgumentError("labels/weights length does not match the batch");
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (labels(b) < 0 || labels(b) >= cfg_.n_classes) throw ArgumentError("label out of range");
      if (!(weights(b) >= Scalar(0))) throw ArgumentError("example weights must be non-negative");
    }
    if (offsets && (offsets->rows() != cfg_.n_classes || offsets->cols() != batch))
      throw ArgumentError("logit offsets have the wrong shape");
  }

  void run_forward(const TokenMatrix& tokens, Cache& cache) const {
    const Eigen::Index steps = tokens.rows();
    const Eigen::Index batch = tokens.cols();
    if (steps < 1) throw ArgumentError("empty token sequence");
    for (Eigen::Index k = 0; k < tokens.size(); ++k)
      if (tokens.data()[k] < 0 || tokens.data()[k] >= cfg_.vocab_size)
        throw ArgumentError("token id " + std::to_string(tokens.data()[k]) + " outside the vocabulary of size " +
                            std::to_string(cfg_.vocab_size));

    cache.position.resize(static_cast<std::size_t>(steps));
    cache.x.resize(static_cast<std::size_t>(steps));
    for (Eigen::Index s = 0; s < steps; ++s) {
      const Eigen::Index row = cfg_.reverse_input ? steps - 1 - s : s;
      cache.position[static_cast<std::size_t>(s)] = row;
      Matrix& x = cache.x[static_cast<std::size_t>(s)];
      x.resize(cfg_.embed_dim, batch);
      for (Eigen::Index b = 0; b < batch; ++b) x.col(b) = params_.embedding.col(tokens(row, b));
    }

    if (cfg_.encoder == Encoder::MeanPool) {
      cache.encoded = Matrix::Zero(cfg_.embed_dim, batch);
      for (const auto& x : cache.x) cache.encoded += x;
      cache.encoded /= Scalar(steps);
    } else {
      const Eigen::Index hd = cfg_.hidden_dim;
      for (auto* v : {&cache.i, &cache.f, &cache.g, &cache.o, &cache.c, &cache.h}) v->resize(static_cast<std::size_t>(steps));
      Matrix z(4 * hd, batch);
      for (Eigen::Index s = 0; s < steps; ++s) {
        const auto us = static_cast<std::size_t>(s);
        z.noalias() = params_.cell_input * cache.x[us];
        if (s > 0) z.noalias() += params_.cell_recurrent * cache.h[us - 1];
        z.colwise() += params_.cell_bias;
        cache.i[us] = sigmoid(z.topRows(hd));
        cache.f[us] = sigmoid(z.middleRows(hd, hd));
        cache.g[us] = z.middleRows(2 * hd, hd).array().tanh().matrix();
        cache.o[us] = sigmoid(z.bottomRows(hd));
        cache.c[us] = cache.i[us].cwiseProduct(cache.g[us]);
        if (s > 0) cache.c[us] += cache.f[us].cwiseProduct(cache.c[us - 1]);
        cache.h[us] = cache.o[us].cwiseProduct(cache.c[us].array().tanh().matrix());
      }
      cache.encoded = cache.h.back();
    }

    cache.rep.noalias() = params_.mlp_weight * cache.encoded;
    cache.rep.colwise() += params_.mlp_bias;
    cache.rep = cache.rep.array().tanh().matrix();
    cache.logits.noalias() = params_.head_weight * cache.rep;
    cache.logits.colwise() += params_.head_bias;

    if (!cache.logits.allFinite()) {
      const std::string block = params_.first_non_finite_block();
      throw NumericError("non-finite logits in forward pass" +
                         (block.empty() ? std::string(" (parameters finite; activations overflowed)")
                                        : " (parameter block '" + block + "')"));
    }
  }

  template <class Derived>
  static Matrix sigmoid(const Eigen::MatrixBase<Derived>& z) {
    return (Scalar(1) / (Scalar(1) + (-z.array()).exp())).matrix();
  }

  void backward(const TokenMatrix& tokens, const Cache& cache, const Matrix& dlogits, Parameters<Scalar>& grad) const {
    grad.head_weight.noalias() = dlogits * cache.rep.transpose();
    grad.head_bias = dlogits.rowwise().sum();
    Matrix dpre = (params_.head_weight.transpose() * dlogits).cwiseProduct(
        (Scalar(1) - cache.rep.array().square()).matrix());
    grad.mlp_weight.noalias() = dpre * cache.encoded.transpose();
    grad.mlp_bias = dpre.rowwise().sum();
    Matrix dencoded = params_.mlp_weight.transpose() * dpre;

    const Eigen::Index batch = tokens.cols();
    const auto steps = cache.x.size();
    auto scatter = [&](const Matrix& dx, std::size_t s) {
      const Eigen::Index row = cache.position[s];
      for (Eigen::Index b = 0; b < batch; ++b) grad.embedding.col(tokens(row, b)) += dx.col(b);
    };

    if (cfg_.encoder == Encoder::MeanPool) {
      const Matrix dx = dencoded / Scalar(steps);
      for (std::size_t s = 0; s < steps; ++s) scatter(dx, s);
      return;
    }

    const Eigen::Index hd = cfg_.hidden_dim;
    Matrix dh = dencoded;
    Matrix dc = Matrix::Zero(hd, batch);
    Matrix dz(4 * hd, batch);
    Matrix dx;
    for (std::size_t s = steps; s-- > 0;) {
      const Matrix& i = cache.i[s];
      const Matrix& f = cache.f[s];
      const Matrix& g = cache.g[s];
      const Matrix& o = cache.o[s];
      const Matrix tanh_c = cache.c[s].array().tanh().matrix();
      dc.array() += dh.array() * o.array() * (Scalar(1) - tanh_c.array().square());
      dz.topRows(hd) = (dc.array() * g.array() * i.array() * (Scalar(1) - i.array())).matrix();
      if (s > 0)
        dz.middleRows(hd, hd) = (dc.array() * cache.c[s - 1].array() * f.array() * (Scalar(1) - f.array())).matrix();
      else
        dz.middleRows(hd, hd).setZero();
      dz.middleRows(2 * hd, hd) = (dc.array() * i.array() * (Scalar(1) - g.array().square())).matrix();
      dz.bottomRows(hd) = (dh.array() * tanh_c.array() * o.array() * (Scalar(1) - o.array())).matrix();

      grad.cell_input.noalias() += dz * cache.x[s].transpose();
      grad.cell_bias += dz.rowwise().sum();
      dx.noalias() = params_.cell_input.transpose() * dz;
      scatter(dx, s);
      if (s > 0) {
        grad.cell_recurrent.noalias() += dz * cache.h[s - 1].transpose();
        dh.noalias() = params_.cell_recurrent.transpose() * dz;
        dc = dc.cwiseProduct(f);
      }
    }
  }

  ModelConfig cfg_;
  Parameters<Scalar> params_;
};

/// Per-block outcome of a finite-difference gradient check.
struct BlockCheck {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradientCheckReport {
  std::vector<BlockCheck> blocks;
  bool passed = true;
  /// Step too small for reliable central differences; result is advisory.
  bool advisory = false;
  std::string warning;

  /// Names of the blocks that failed, comma separated.
  std::string failed_blocks() const {
    std::string out;
    for (const auto& b : blocks)
      if (!b.passed) out += (out.empty() ? "" : ", ") + b.name;
    return out;
  }
};

/// Compare `analytic` against central differences of the weighted loss,
/// entry by entry. Relative error is |a - n| / max(|a|, |n|, abs_floor).
template <typename Scalar>
GradientCheckReport finite_diff_check(const SequenceClassifier<Scalar>& model, const TokenMatrix& tokens,
                                      const Eigen::VectorXi& labels,
                                      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& weights,
                                      const Parameters<Scalar>& analytic, double step, double tolerance,
                                      double abs_floor = 1e-7) {
  if (!(step > 0.0)) throw ArgumentError("finite-difference step must be positive");
  GradientCheckReport report;
  if (step < std::sqrt(double(std::numeric_limits<Scalar>::epsilon()))) {
    report.advisory = true;
    report.warning = "step below sqrt(machine epsilon): cancellation dominates, result is advisory only";
  }
  SequenceClassifier<Scalar> probe = model;
  Parameters<Scalar>::zip(
      [&](std::string_view name, auto theta, const auto& exact) {
        BlockCheck block{std::string(name), 0.0, true};
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
          const Scalar saved = theta(k);
          theta(k) = saved + Scalar(step);
          const double up = double(probe.loss(tokens, labels, weights));
          theta(k) = saved - Scalar(step);
          const double down = double(probe.loss(tokens, labels, weights));
          theta(k) = saved;
          const double numeric = (up - down) / (2.0 * step);
          const double a = double(exact(k));
          const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
          block.max_rel_error = std::max(block.max_rel_error, std::abs(a - numeric) / denom);
        }
        block.passed = block.max_rel_error <= tolerance;
        report.passed = report.passed && block.passed;
        report.blocks.push_back(block);
      },
      probe.params(), analytic);
  return report;
}

template <typename Scalar>
GradientCheckReport finite_diff_check(const SequenceClassifier<Scalar>& model, const TokenMatrix& tokens,
                                      const Eigen::VectorXi& labels,
                                      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& weights, double step,
                                      double tolerance) {
  const auto analytic = model.loss_and_grad(tokens, labels, weights);
  return finite_diff_check(model, tokens, labels, weights, analytic.grad, step, tolerance);
}

/// Bias-only model: a logit table indexed by (class, feature value), two
/// parameters per class.
template <typename Scalar = double>
class BiasOnlyModel {
public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  explicit BiasOnlyModel(int n_classes) : table_(Matrix::Zero(n_classes, 2)) {}

  int n_classes() const { return static_cast<int>(table_.rows()); }
  const Matrix& table() const { return table_; }
  Matrix& table() { return table_; }

  Vector forward(int feature_value) const { return table_.col(feature_value); }

  /// Log-probabilities for a batch of feature values (n_classes x batch).
  Matrix log_probs(const Eigen::VectorXi& features) const {
    Matrix lp(table_.rows(), features.size());
    for (Eigen::Index c = 0; c < 2; ++c) {
      const Scalar m = table_.col(c).maxCoeff();
      const Vector col = table_.col(c).array() - (m + std::log((table_.col(c).array() - m).exp().sum()));
      for (Eigen::Index b = 0; b < features.size(); ++b)
        if (features(b) == c) lp.col(b) = col;
    }
    return lp;
  }

  /// Weighted-mean cross-entropy and its gradient with respect to the table.
  std::pair<Scalar, Matrix> loss_and_grad(const Eigen::VectorXi& features, const Eigen::VectorXi& labels,
                                          const Vector& weights) const {
    const Matrix lp = log_probs(features);
    Matrix grad = Matrix::Zero(table_.rows(), 2);
    const Scalar total = weights.sum();
    if (total <= Scalar(0)) return {Scalar(0), grad};
    Scalar loss = Scalar(0);
    for (Eigen::Index b = 0; b < features.size(); ++b) {
      loss -= weights(b) * lp(labels(b), b);
      Vector d = lp.col(b).array().exp();
      d(labels(b)) -= Scalar(1);
      grad.col(features(b)) += weights(b) * d;
    }
    return {loss / total, grad / total};
  }

  /// Full-batch Adam on unit weights.
  void fit(const Eigen::VectorXi& features, const Eigen::VectorXi& labels, int steps = 500,
           const AdamConfig& adam = AdamConfig{0.05, 0.9, 0.999, 1e-8}) {
    const Vector weights = Vector::Ones(features.size());
    Vector m = Vector::Zero(table_.size()), v = Vector::Zero(table_.size());
    for (int t = 1; t <= steps; ++t) {
      const auto [loss, grad] = loss_and_grad(features, labels, weights);
      (void)loss;
      Eigen::Map<Vector> flat(table_.data(), table_.size());
      const Eigen::Map<const Vector> g(grad.data(), grad.size());
      adam_update<Scalar>(flat, g, m, v, adam, t);
    }
  }

  int predict(int feature_value) const {
    Eigen::Index best = 0;
    table_.col(feature_value).maxCoeff(&best);
    return static_cast<int>(best);
  }

private:
  Matrix table_;
};

} // namespace pnpslab
