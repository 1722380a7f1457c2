#pragma once

#include "pnpslab/datagen.hpp"
#include "pnpslab/neuralnet.hpp"
#include "pnpslab/probe.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace pnpslab {

/// Representations (one row per example) with aligned labels.
struct RepMatrix {
  Eigen::MatrixXd x;
  Eigen::VectorXi probe_labels; // feature value
  Eigen::VectorXi task_labels;
  int n_task_classes = 2;
  std::string model_id;
  std::string dataset_id;

  Eigen::Index rows() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }
  void validate() const;
};

/// Representation read-out (the MLP activation feeding the head) of every
/// example. The probe label is the feature detector's value.
RepMatrix extract_representations(const SequenceClassifier<double>& model, const Dataset& dataset,
                                  const FeatureHandle& feature, std::string model_id = {},
                                  std::string dataset_id = {});

struct BalancedSplit {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> held_out;
  /// Per-class counts of each part; every present class gets the same count.
  std::vector<std::size_t> train_per_class;
  std::vector<std::size_t> held_out_per_class;
};

/// Downsample every present class to the minority count, then split each
/// class into train / held-out parts. DegenerateProbeError when fewer than two
/// classes are present or the minority class has fewer than two rows.
BalancedSplit balanced_split(const Eigen::VectorXi& labels, int n_classes, double held_out_fraction, Rng& rng);

/// Rows of a class-balanced downsample (no held-out part).
std::vector<Eigen::Index> balanced_rows(const Eigen::VectorXi& labels, int n_classes, Rng& rng);

struct ProbeResult {
  LinearProbe<double> probe;
  double held_out_accuracy = 0.0;
  BalancedSplit split;
};

/// Logistic probe on a class-balanced subsample, scored on a balanced
/// held-out split. n_classes <= 0 means max(label) + 1.
ProbeResult train_linear_probe(const Eigen::MatrixXd& reps, const Eigen::VectorXi& labels, const ProbeConfig& config,
                               int n_classes = 0);

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& rows);
Eigen::VectorXi select_rows(const Eigen::VectorXi& y, const std::vector<Eigen::Index>& rows);

// --- MDL ---------------------------------------------------------------------

std::vector<double> default_block_schedule();

struct MdlConfig {
  std::vector<double> schedule = default_block_schedule();
  /// Probe solver settings; l2 is replaced by the validated grid value when
  /// l2_grid is non-empty.
  ProbeConfig probe{};
  std::vector<double> l2_grid{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  double validation_fraction = 0.2;
  /// Rows are visited in a seeded random order.
  std::uint64_t seed = 0;

  void validate() const;
};

struct MdlBlock {
  std::size_t block_end = 0;
  double block_bits = 0.0;
  double cumulative_bits = 0.0;
  /// Compression of the prefix coded so far.
  double compression = 0.0;
};

struct MdlReport {
  double online_bits = 0.0;
  double uniform_bits = 0.0;
  double compression = 0.0;
  std::vector<double> schedule;
  std::vector<MdlBlock> blocks;
  double final_block_accuracy = 0.0;
};

/// Block boundaries floor(fraction * n); ScheduleError for invalid schedules
/// or empty blocks.
std::vector<std::size_t> block_ends(const std::vector<double>& schedule, std::size_t n);

/// Prequential (online) code of labels given representations.
MdlReport mdl_online_code(const Eigen::MatrixXd& reps, const Eigen::VectorXi& labels, int n_classes,
                          const MdlConfig& config = {});

void write_mdl_csv(std::ostream& out, const MdlReport& report);

// --- INLP --------------------------------------------------------------------

struct Projection {
  Eigen::MatrixXd matrix;     // h x h
  Eigen::MatrixXd directions; // h x collected, effective probe directions
  Eigen::MatrixXd basis;      // orthonormal basis of span(directions)
  int iterations = 0;
};

/// Number of singular values above tol.
int numerical_rank(const Eigen::MatrixXd& m, double tol = 1e-8);

struct InlpConfig {
  int max_iters = 20;
  bool stop_at_majority = true;
  /// Stop once probe accuracy <= majority baseline + tolerance.
  double tolerance = 0.015;
  ProbeConfig probe{};
  std::uint64_t seed = 0;

  void validate() const;
};

enum class InlpStatus { MaxIterations, ReachedMajority, RankExhausted };

std::string to_string(InlpStatus status);

struct InlpRow {
  int iteration = 0;
  int rank = 0;
  double probe_acc = 0.0;
  double task_acc_overall = 0.0;
  std::optional<double> task_acc_minority;
};

struct InlpResult {
  Projection projection;
  std::vector<InlpRow> history; // iteration 0 is the unprojected state
  InlpStatus status = InlpStatus::MaxIterations;
  std::optional<Group> minority;
  double majority_baseline = 0.5;
};

/// Iterative null-space projection of the probe label. Probe accuracy uses
/// a balanced probe fitted on projected train rows and scored on a balanced
/// subset of projected eval rows; task accuracy uses a fresh linear head.
/// The minority group is the smallest (probe label, task label) cell of the
/// train rows.
InlpResult inlp(const RepMatrix& train, const RepMatrix& eval, const InlpConfig& config);

void write_inlp_csv(std::ostream& out, const std::vector<InlpRow>& history);

} // namespace pnpslab
