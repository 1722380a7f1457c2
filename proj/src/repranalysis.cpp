#include "pnpslab/repranalysis.hpp"

#include "pnpslab/csv.hpp"
#include "pnpslab/errors.hpp"
#include "pnpslab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pnpslab {

std::string to_string(ProbeSolver solver) { return solver == ProbeSolver::Newton ? "newton" : "adam"; }

ProbeSolver parse_probe_solver(std::string_view text) {
  if (text == "newton") return ProbeSolver::Newton;
  if (text == "adam") return ProbeSolver::Adam;
  throw ConfigError("unknown probe solver '" + std::string(text) + "' (expected newton or adam)");
}

void ProbeConfig::validate() const {
  if (!(l2 >= 0.0)) throw ConfigError("probe l2 must be >= 0");
  if (max_newton_iters < 1 || epochs < 1 || batch_size < 1) throw ConfigError("probe iteration counts must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("probe learning_rate must be positive");
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0))
    throw ConfigError("probe held_out_fraction must lie in (0, 1)");
}

void RepMatrix::validate() const {
  if (probe_labels.size() != x.rows() || task_labels.size() != x.rows())
    throw ConfigError("representation rows and label vectors differ in length");
  if (n_task_classes < 2) throw ConfigError("n_task_classes must be >= 2");
}

RepMatrix extract_representations(const SequenceClassifier<double>& model, const Dataset& dataset,
                                  const FeatureHandle& feature, std::string model_id, std::string dataset_id) {
  const auto& cfg = model.config();
  if (cfg.vocab_size < dataset.spec().vocab_size)
    throw ConfigError("model vocabulary is smaller than the dataset vocabulary");
  if (cfg.n_classes != dataset.spec().num_classes()) throw ConfigError("model class count does not match the task");

  RepMatrix reps;
  reps.x.resize(static_cast<Eigen::Index>(dataset.size()), cfg.mlp_hidden);
  reps.probe_labels.resize(static_cast<Eigen::Index>(dataset.size()));
  reps.task_labels = label_vector(dataset);
  reps.n_task_classes = cfg.n_classes;
  reps.model_id = std::move(model_id);
  reps.dataset_id = std::move(dataset_id);
  constexpr std::size_t chunk = 512;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + chunk); ++i) idx.push_back(i);
    const auto out = model.forward(token_matrix(dataset, idx));
    reps.x.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) =
        out.representation.transpose();
  }
  for (std::size_t i = 0; i < dataset.size(); ++i)
    reps.probe_labels(static_cast<Eigen::Index>(i)) = feature.detect(dataset[i]);
  return reps;
}

// --- Probing -----------------------------------------------------------------

namespace {

int infer_classes(const Eigen::VectorXi& labels, int n_classes) {
  if (labels.size() > 0 && labels.minCoeff() < 0) throw ArgumentError("negative probe label");
  const int k = n_classes > 0 ? n_classes : (labels.size() ? labels.maxCoeff() + 1 : 0);
  if (labels.size() > 0 && labels.maxCoeff() >= k) throw ArgumentError("probe label outside [0, K)");
  return std::max(k, 2);
}

std::vector<std::vector<Eigen::Index>> rows_by_class(const Eigen::VectorXi& labels, int k) {
  std::vector<std::vector<Eigen::Index>> by(static_cast<std::size_t>(k));
  for (Eigen::Index r = 0; r < labels.size(); ++r) by[static_cast<std::size_t>(labels(r))].push_back(r);
  return by;
}

std::size_t minority_count(const std::vector<std::vector<Eigen::Index>>& by) {
  std::size_t present = 0, m = 0;
  for (const auto& rows : by)
    if (!rows.empty()) {
      m = present == 0 ? rows.size() : std::min(m, rows.size());
      ++present;
    }
  if (present < 2) throw DegenerateProbeError("probe labels contain fewer than two classes");
  return m;
}

} // namespace

std::vector<Eigen::Index> balanced_rows(const Eigen::VectorXi& labels, int n_classes, Rng& rng) {
  auto by = rows_by_class(labels, infer_classes(labels, n_classes));
  const std::size_t m = minority_count(by);
  std::vector<Eigen::Index> out;
  for (auto& rows : by) {
    if (rows.empty()) continue;
    std::shuffle(rows.begin(), rows.end(), rng);
    out.insert(out.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(m));
  }
  std::sort(out.begin(), out.end());
  return out;
}

BalancedSplit balanced_split(const Eigen::VectorXi& labels, int n_classes, double held_out_fraction, Rng& rng) {
  const int k = infer_classes(labels, n_classes);
  auto by = rows_by_class(labels, k);
  const std::size_t m = minority_count(by);
  if (m < 2) throw DegenerateProbeError("minority probe class has fewer than two rows");
  const auto held = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(held_out_fraction * double(m))), 1,
                                            m - 1);
  BalancedSplit split;
  split.train_per_class.assign(static_cast<std::size_t>(k), 0);
  split.held_out_per_class.assign(static_cast<std::size_t>(k), 0);
  for (std::size_t c = 0; c < by.size(); ++c) {
    auto& rows = by[c];
    if (rows.empty()) continue;
    std::shuffle(rows.begin(), rows.end(), rng);
    split.held_out.insert(split.held_out.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(held));
    split.train.insert(split.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(held),
                       rows.begin() + static_cast<std::ptrdiff_t>(m));
    split.held_out_per_class[c] = held;
    split.train_per_class[c] = m - held;
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.held_out.begin(), split.held_out.end());
  return split;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Eigen::VectorXi select_rows(const Eigen::VectorXi& y, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXi out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(rows[i]);
  return out;
}

ProbeResult train_linear_probe(const Eigen::MatrixXd& reps, const Eigen::VectorXi& labels, const ProbeConfig& config,
                               int n_classes) {
  config.validate();
  if (reps.rows() != labels.size()) throw ArgumentError("representations and labels differ in length");
  const int k = infer_classes(labels, n_classes);
  Rng rng(config.seed);
  ProbeResult result{{}, 0.0, balanced_split(labels, k, config.held_out_fraction, rng)};
  result.probe =
      fit_softmax_regression<double>(select_rows(reps, result.split.train), select_rows(labels, result.split.train), k,
                                     config);
  result.held_out_accuracy =
      result.probe.accuracy(select_rows(reps, result.split.held_out), select_rows(labels, result.split.held_out));
  return result;
}

// --- MDL ---------------------------------------------------------------------

std::vector<double> default_block_schedule() {
  return {0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.0625, 0.125, 0.25, 0.5, 1.0};
}

void MdlConfig::validate() const {
  probe.validate();
  if (schedule.empty()) throw ScheduleError("block schedule is empty");
  double prev = 0.0;
  for (double f : schedule) {
    if (!(f > prev) || f > 1.0) throw ScheduleError("block schedule must increase strictly within (0, 1]");
    prev = f;
  }
  if (schedule.back() != 1.0) throw ScheduleError("block schedule must end at 1.0");
  for (double l2 : l2_grid)
    if (!(l2 >= 0.0)) throw ConfigError("l2 grid values must be >= 0");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in (0, 1)");
}

std::vector<std::size_t> block_ends(const std::vector<double>& schedule, std::size_t n) {
  if (schedule.empty()) throw ScheduleError("block schedule is empty");
  if (n == 0) throw ScheduleError("cannot code an empty label sequence");
  std::vector<std::size_t> ends;
  double prev = 0.0;
  for (double f : schedule) {
    if (!(f > prev) || f > 1.0) throw ScheduleError("block schedule must increase strictly within (0, 1]");
    prev = f;
    const auto end = static_cast<std::size_t>(std::floor(f * double(n) + 1e-9));
    if (end == 0 || (!ends.empty() && end <= ends.back()))
      throw ScheduleError("block ending at fraction " + format_number(f) + " is empty");
    ends.push_back(end);
  }
  if (schedule.back() != 1.0) throw ScheduleError("block schedule must end at 1.0");
  return ends;
}

namespace {

double mean_bits(const LinearProbe<double>& probe, const Eigen::MatrixXd& x, const Eigen::VectorXi& y) {
  return y.size() ? probe.codelength_bits(x, y) / double(y.size()) : 0.0;
}

/// Fit on `x` with the grid value that codes a held-out tail best.
LinearProbe<double> fit_validated(const Eigen::MatrixXd& x, const Eigen::VectorXi& y, int k, const MdlConfig& cfg) {
  ProbeConfig probe = cfg.probe;
  if (!cfg.l2_grid.empty()) {
    const auto n = x.rows();
    const auto n_val = static_cast<Eigen::Index>(std::floor(cfg.validation_fraction * double(n)));
    if (cfg.l2_grid.size() == 1 || n_val < 1 || n - n_val < 1) {
      probe.l2 = *std::max_element(cfg.l2_grid.begin(), cfg.l2_grid.end());
    } else {
      double best = std::numeric_limits<double>::infinity();
      for (double l2 : cfg.l2_grid) {
        ProbeConfig trial = cfg.probe;
        trial.l2 = l2;
        const auto fitted = fit_softmax_regression<double>(x.topRows(n - n_val), y.head(n - n_val), k, trial);
        const double bits = mean_bits(fitted, x.bottomRows(n_val), y.tail(n_val));
        if (bits < best) {
          best = bits;
          probe.l2 = l2;
        }
      }
    }
  }
  return fit_softmax_regression<double>(x, y, k, probe);
}

} // namespace

MdlReport mdl_online_code(const Eigen::MatrixXd& reps, const Eigen::VectorXi& labels, int n_classes,
                          const MdlConfig& config) {
  config.validate();
  if (reps.rows() != labels.size()) throw ArgumentError("representations and labels differ in length");
  if (n_classes < 2) throw ArgumentError("MDL coding needs at least two classes");
  if (labels.size() > 0 && (labels.minCoeff() < 0 || labels.maxCoeff() >= n_classes))
    throw ArgumentError("label outside [0, K)");
  const auto n = static_cast<std::size_t>(labels.size());
  const auto ends = block_ends(config.schedule, n);

  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  Rng rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const Eigen::MatrixXd x = select_rows(reps, order);
  const Eigen::VectorXi y = select_rows(labels, order);

  const double log2k = std::log2(double(n_classes));
  MdlReport report;
  report.schedule = config.schedule;
  report.uniform_bits = double(n) * log2k;

  double cumulative = double(ends.front()) * log2k;
  report.blocks.push_back({ends.front(), cumulative, cumulative, 1.0});
  for (std::size_t b = 1; b < ends.size(); ++b) {
    const auto prev = static_cast<Eigen::Index>(ends[b - 1]);
    const auto len = static_cast<Eigen::Index>(ends[b]) - prev;
    const auto probe = fit_validated(x.topRows(prev), y.head(prev), n_classes, config);
    const double bits = probe.codelength_bits(x.middleRows(prev, len), y.segment(prev, len));
    cumulative += bits;
    report.blocks.push_back({ends[b], bits, cumulative, double(ends[b]) * log2k / cumulative});
    if (b + 1 == ends.size()) report.final_block_accuracy = probe.accuracy(x.middleRows(prev, len), y.segment(prev, len));
  }
  if (ends.size() == 1) report.final_block_accuracy = 1.0 / double(n_classes);
  report.online_bits = cumulative;
  report.compression = report.uniform_bits / report.online_bits;
  if (!std::isfinite(report.compression) || report.compression <= 0.0)
    throw NumericError("non-finite MDL compression");
  return report;
}

void write_mdl_csv(std::ostream& out, const MdlReport& report) {
  CsvWriter csv(out, {"block_end", "block_codelength_bits", "cumulative_bits", "compression"});
  for (const auto& b : report.blocks)
    csv.row({std::to_string(b.block_end), format_number(b.block_bits), format_number(b.cumulative_bits),
             format_number(b.compression)});
}

// --- INLP --------------------------------------------------------------------

int numerical_rank(const Eigen::MatrixXd& m, double tol) {
  if (m.size() == 0) return 0;
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return static_cast<int>((svd.singularValues().array() > tol).count());
}

void InlpConfig::validate() const {
  if (max_iters < 1) throw ConfigError("INLP max_iters must be >= 1");
  if (!(tolerance >= 0.0)) throw ConfigError("INLP tolerance must be >= 0");
  probe.validate();
}

std::string to_string(InlpStatus status) {
  switch (status) {
  case InlpStatus::MaxIterations: return "max_iterations";
  case InlpStatus::ReachedMajority: return "reached_majority";
  case InlpStatus::RankExhausted: return "rank_exhausted";
  }
  return "?";
}

namespace {

/// Class-difference directions w_k - w_0 of a probe, as columns.
Eigen::MatrixXd probe_directions(const LinearProbe<double>& probe) {
  const Eigen::Index k = probe.weight.rows();
  Eigen::MatrixXd d(probe.weight.cols(), k - 1);
  for (Eigen::Index c = 1; c < k; ++c) d.col(c - 1) = (probe.weight.row(c) - probe.weight.row(0)).transpose();
  return d;
}

std::optional<Group> smallest_cell(const RepMatrix& reps) {
  std::map<Group, std::size_t> counts;
  for (Eigen::Index r = 0; r < reps.rows(); ++r) ++counts[Group{reps.probe_labels(r), reps.task_labels(r)}];
  std::optional<Group> best;
  std::size_t best_count = 0;
  for (const auto& [g, c] : counts)
    if (!best || c < best_count) {
      best = g;
      best_count = c;
    }
  return best;
}

} // namespace

InlpResult inlp(const RepMatrix& train, const RepMatrix& eval, const InlpConfig& config) {
  config.validate();
  train.validate();
  eval.validate();
  const Eigen::Index h = train.dim();
  if (eval.dim() != h) throw ConfigError("train and eval representations differ in dimension");
  const int kp = infer_classes(train.probe_labels, 0);
  const int kt = std::max(train.n_task_classes, eval.n_task_classes);

  Rng rng(config.seed);
  const auto probe_train_rows = balanced_rows(train.probe_labels, kp, rng);
  const auto probe_eval_rows = balanced_rows(eval.probe_labels, kp, rng);
  const Eigen::VectorXi probe_train_y = select_rows(train.probe_labels, probe_train_rows);
  const Eigen::VectorXi probe_eval_y = select_rows(eval.probe_labels, probe_eval_rows);
  const Eigen::MatrixXd probe_train_x = select_rows(train.x, probe_train_rows);
  const Eigen::MatrixXd probe_eval_x = select_rows(eval.x, probe_eval_rows);

  InlpResult result;
  result.minority = smallest_cell(train);
  std::vector<Eigen::Index> minority_rows;
  if (result.minority)
    for (Eigen::Index r = 0; r < eval.rows(); ++r)
      if (eval.probe_labels(r) == result.minority->feature && eval.task_labels(r) == result.minority->label)
        minority_rows.push_back(r);
  std::size_t present = 0;
  for (Eigen::Index c = 0; c < kp; ++c) present += (probe_eval_y.array() == c).any();
  result.majority_baseline = 1.0 / double(std::max<std::size_t>(present, 1));

  auto& proj = result.projection;
  proj.matrix = Eigen::MatrixXd::Identity(h, h);
  proj.directions.resize(h, 0);
  proj.basis.resize(h, 0);

  // Records the state under the current projection; returns the probe used
  // for the next direction.
  auto record = [&](int iteration) {
    const Eigen::MatrixXd& p = proj.matrix;
    ProbeConfig pc = config.probe;
    pc.seed = config.seed + std::uint64_t(iteration);
    const auto probe = fit_softmax_regression<double>(probe_train_x * p, probe_train_y, kp, pc);
    const auto head = fit_softmax_regression<double>(train.x * p, train.task_labels, kt, pc);
    const Eigen::MatrixXd eval_p = eval.x * p;
    InlpRow row;
    row.iteration = iteration;
    row.rank = numerical_rank(p);
    row.probe_acc = probe.accuracy(probe_eval_x * p, probe_eval_y);
    row.task_acc_overall = head.accuracy(eval_p, eval.task_labels);
    if (!minority_rows.empty())
      row.task_acc_minority = head.accuracy(select_rows(eval_p, minority_rows), select_rows(eval.task_labels, minority_rows));
    result.history.push_back(row);
    return probe;
  };

  auto probe = record(0);
  for (int it = 1; it <= config.max_iters; ++it) {
    if (config.stop_at_majority && result.history.back().probe_acc <= result.majority_baseline + config.tolerance) {
      result.status = InlpStatus::ReachedMajority;
      break;
    }
    // The probe saw P x, so its effective direction in input space is P w.
    Eigen::MatrixXd d = proj.matrix * probe_directions(probe);
    Eigen::MatrixXd q = d;
    for (int pass = 0; pass < 2; ++pass)
      if (proj.basis.cols() > 0) q -= proj.basis * (proj.basis.transpose() * q);
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(q);
    const Eigen::MatrixXd r = qr.matrixQR().topRows(q.cols()).triangularView<Eigen::Upper>();
    bool degenerate = proj.basis.cols() + q.cols() > h;
    for (Eigen::Index c = 0; c < q.cols() && !degenerate; ++c)
      degenerate = std::abs(r(c, c)) <= 1e-10 * std::max(1.0, d.col(c).norm());
    if (degenerate) {
      result.status = InlpStatus::RankExhausted;
      break;
    }
    const Eigen::MatrixXd qcols = qr.householderQ() * Eigen::MatrixXd::Identity(h, q.cols());
    Eigen::MatrixXd basis(h, proj.basis.cols() + q.cols());
    basis << proj.basis, qcols;
    proj.basis = std::move(basis);
    Eigen::MatrixXd dirs(h, proj.directions.cols() + d.cols());
    dirs << proj.directions, d;
    proj.directions = std::move(dirs);
    proj.matrix = Eigen::MatrixXd::Identity(h, h) - proj.basis * proj.basis.transpose();
    proj.iterations = it;
    probe = record(it);
    if (result.history.back().rank == 0) {
      result.status = InlpStatus::RankExhausted;
      break;
    }
  }
  return result;
}

void write_inlp_csv(std::ostream& out, const std::vector<InlpRow>& history) {
  CsvWriter csv(out, {"iteration", "rank", "probe_acc", "task_acc_overall", "task_acc_minority"});
  for (const auto& r : history)
    csv.row({std::to_string(r.iteration), std::to_string(r.rank), format_number(r.probe_acc),
             format_number(r.task_acc_overall), format_number(r.task_acc_minority)});
}

} // namespace pnpslab
