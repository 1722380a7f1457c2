#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace pnpslab {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of a flat parameter block. `step` counts
/// from 1.
template <typename Scalar>
void adam_update(Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> param,
                 const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& grad,
                 Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> m,
                 Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> v, const AdamConfig& cfg, long step) {
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  m = b1 * m + (Scalar(1) - b1) * grad;
  v = b2 * v + (Scalar(1) - b2) * grad.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(step));
  const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(step));
  const Scalar lr = Scalar(cfg.learning_rate) / c1;
  param.array() -= lr * m.array() / ((v.array() / c2).sqrt() + Scalar(cfg.epsilon));
}

} // namespace pnpslab
