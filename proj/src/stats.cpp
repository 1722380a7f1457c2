#include "pnpslab/stats.hpp"

#include "pnpslab/errors.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>

namespace pnpslab {

double mutual_information_bits(const CountTable& counts) {
  const double total = counts.sum();
  if (total <= 0.0) return 0.0;
  const Eigen::VectorXd rows = counts.rowwise().sum();
  const Eigen::RowVectorXd cols = counts.colwise().sum();
  double mi = 0.0;
  for (Eigen::Index r = 0; r < counts.rows(); ++r)
    for (Eigen::Index c = 0; c < counts.cols(); ++c) {
      const double n = counts(r, c);
      if (n > 0.0) mi += n / total * std::log2(n * total / (rows(r) * cols(c)));
    }
  return mi;
}

double chi_square_independence_pvalue(const CountTable& counts) {
  const double total = counts.sum();
  const Eigen::VectorXd rows = counts.rowwise().sum();
  const Eigen::RowVectorXd cols = counts.colwise().sum();
  double stat = 0.0;
  Eigen::Index live_rows = 0, live_cols = 0;
  for (Eigen::Index r = 0; r < counts.rows(); ++r) live_rows += rows(r) > 0.0;
  for (Eigen::Index c = 0; c < counts.cols(); ++c) live_cols += cols(c) > 0.0;
  if (live_rows < 2 || live_cols < 2) return 1.0;
  for (Eigen::Index r = 0; r < counts.rows(); ++r)
    for (Eigen::Index c = 0; c < counts.cols(); ++c) {
      const double expected = rows(r) * cols(c) / total;
      if (expected > 0.0) stat += (counts(r, c) - expected) * (counts(r, c) - expected) / expected;
    }
  const boost::math::chi_squared dist(double((live_rows - 1) * (live_cols - 1)));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

CountTable feature_label_counts(const Dataset& dataset) {
  CountTable table = CountTable::Zero(2, dataset.spec().num_classes());
  for (const auto& [group, members] : dataset.group_index())
    table(group.feature, group.label) += double(members.size());
  return table;
}

double binomial_stderr(double p, std::size_t n) {
  if (n == 0) throw ArgumentError("binomial_stderr needs n >= 1");
  return std::sqrt(std::max(0.0, p * (1.0 - p)) / double(n));
}

} // namespace pnpslab
