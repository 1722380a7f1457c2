#pragma once

#include "pnpslab/datagen.hpp"

#include <Eigen/Dense>

namespace pnpslab {

/// rows x cols table of non-negative counts.
using CountTable = Eigen::MatrixXd;

/// Empirical mutual information in bits of the joint count table.
double mutual_information_bits(const CountTable& counts);

/// p-value of Pearson's chi-square independence test on the table.
double chi_square_independence_pvalue(const CountTable& counts);

/// 2 x K table of (feature value, label) counts for the reserved feature.
CountTable feature_label_counts(const Dataset& dataset);

/// Standard error of a Bernoulli mean estimated from n draws.
double binomial_stderr(double p, std::size_t n);

} // namespace pnpslab
