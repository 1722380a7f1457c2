#include "pnpslab/errors.hpp"
#include "pnpslab/repranalysis.hpp"
#include "pnpslab/training.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

using namespace pnpslab;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index h, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z;
  Eigen::MatrixXd x(n, h);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = z(rng);
  return x;
}

Eigen::VectorXi random_labels(Eigen::Index n, int k, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, k - 1);
  Eigen::VectorXi y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = u(rng);
  return y;
}

Eigen::VectorXi sign_labels(const Eigen::VectorXd& score) {
  Eigen::VectorXi y(score.size());
  for (Eigen::Index i = 0; i < score.size(); ++i) y(i) = score(i) > 0;
  return y;
}

// Feature label spread over several directions plus a task label that
// depends on both the feature and an independent direction.
RepMatrix synthetic_reps(Eigen::Index n, Eigen::Index h, std::uint64_t seed, int probe_classes = 2) {
  RepMatrix r;
  r.x = gaussian(n, h, seed);
  Rng rng(seed + 1);
  std::normal_distribution<double> z;
  Eigen::VectorXd feature_dir = Eigen::VectorXd::Zero(h), task_dir = Eigen::VectorXd::Zero(h);
  feature_dir.head(3) << 1.0, 0.7, 0.4;
  task_dir(h - 1) = 1.0;
  r.probe_labels.resize(n);
  r.task_labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = r.x.row(i).dot(feature_dir) + 0.3 * z(rng);
    r.probe_labels(i) = probe_classes == 2 ? int(s > 0) : (s < -0.5 ? 0 : (s < 0.5 ? 1 : 2));
    r.task_labels(i) = int(r.x(i, h - 1) + 0.5 * s > 0);
  }
  r.n_task_classes = 2;
  return r;
}

double objective_gradient_norm(const LinearProbe<double>& probe, const Eigen::MatrixXd& x, const Eigen::VectorXi& y,
                               double l2) {
  const Eigen::Index n = x.rows(), k = probe.n_classes();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k, x.cols() + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd z = probe.weight * x.row(i).transpose() + probe.bias;
    z.array() -= z.maxCoeff();
    Eigen::VectorXd p = z.array().exp();
    p /= p.sum();
    p(y(i)) -= 1.0;
    g.leftCols(x.cols()) += p * x.row(i) / double(n);
    g.col(x.cols()) += p / double(n);
  }
  g.leftCols(x.cols()) += l2 * probe.weight;
  g.col(x.cols()) += l2 * probe.bias;
  return g.cwiseAbs().maxCoeff();
}

} // namespace

TEST_SUITE("repranalysis") {

TEST_CASE("softmax regression reaches a stationary point of the penalized objective") {
  const Eigen::MatrixXd x = gaussian(400, 6, 1);
  for (int k : {2, 3}) {
    const Eigen::VectorXi y = random_labels(400, k, 2 + k);
    for (double l2 : {1e-4, 1e-2, 1.0}) {
      ProbeConfig cfg;
      cfg.l2 = l2;
      const auto probe = fit_softmax_regression<double>(x, y, k, cfg);
      CHECK(objective_gradient_norm(probe, x, y, l2) <= 1e-7);
    }
  }
  CHECK_THROWS_AS(fit_softmax_regression<double>(x, random_labels(400, 2, 1), 1, ProbeConfig{}), ArgumentError);
}

TEST_CASE("Adam solver approaches the Newton solution") {
  const Eigen::MatrixXd x = gaussian(2000, 4, 3);
  const Eigen::VectorXi y = sign_labels(x.col(0) + 0.5 * x.col(1) + 0.8 * gaussian(2000, 1, 4).col(0));
  ProbeConfig newton;
  newton.l2 = 1e-2;
  ProbeConfig adam = newton;
  adam.solver = ProbeSolver::Adam;
  adam.epochs = 60;
  adam.learning_rate = 1e-2;
  const auto a = fit_softmax_regression<double>(x, y, 2, newton);
  const auto b = fit_softmax_regression<double>(x, y, 2, adam);
  CHECK(std::abs(a.accuracy(x, y) - b.accuracy(x, y)) <= 0.01);
  CHECK(objective_gradient_norm(b, x, y, newton.l2) <= 5e-3);
}

TEST_CASE("probe accuracy on separable and random labels") {
  const Eigen::MatrixXd x = gaussian(4000, 8, 5);
  Eigen::VectorXd w(8);
  w << 1, -2, 0.5, 0, 0, 1, 0, 0.3;
  const auto sep = train_linear_probe(x, sign_labels(x * w), ProbeConfig{});
  CHECK(sep.held_out_accuracy >= 0.99);

  const auto rnd = train_linear_probe(x, random_labels(4000, 2, 6), ProbeConfig{});
  CHECK(std::abs(rnd.held_out_accuracy - 0.5) <= 0.03);

  for (const auto& s : {sep.split, rnd.split}) {
    CHECK(s.train_per_class[0] == s.train_per_class[1]);
    CHECK(s.held_out_per_class[0] == s.held_out_per_class[1]);
  }

  CHECK_THROWS_AS(train_linear_probe(x, Eigen::VectorXi::Zero(4000), ProbeConfig{}, 2), DegenerateProbeError);
}

TEST_CASE("balanced split bookkeeping") {
  Eigen::VectorXi y(100);
  for (int i = 0; i < 100; ++i) y(i) = i < 80 ? 0 : (i < 95 ? 1 : 2);
  Rng rng(1);
  const auto s = balanced_split(y, 3, 0.2, rng);
  CHECK(s.train_per_class == std::vector<std::size_t>{4, 4, 4});
  CHECK(s.held_out_per_class == std::vector<std::size_t>{1, 1, 1});
  std::vector<Eigen::Index> all = s.train;
  all.insert(all.end(), s.held_out.begin(), s.held_out.end());
  std::sort(all.begin(), all.end());
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  const auto rows = balanced_rows(y, 3, rng);
  CHECK(rows.size() == 15);
  CHECK(std::is_sorted(rows.begin(), rows.end()));
  Eigen::VectorXi lonely = Eigen::VectorXi::Zero(10);
  lonely(0) = 1;
  CHECK_THROWS_AS(balanced_split(lonely, 2, 0.2, rng), DegenerateProbeError);
}

TEST_CASE("MDL uniform codelength and the single-block identity") {
  const Eigen::MatrixXd x = gaussian(1000, 5, 7);
  const Eigen::VectorXi y2 = random_labels(1000, 2, 8);
  const Eigen::VectorXi y3 = random_labels(1000, 3, 9);
  MdlConfig single;
  single.schedule = {1.0};
  const auto r2 = mdl_online_code(x, y2, 2, single);
  CHECK(r2.uniform_bits == 1000.0);
  CHECK(r2.online_bits == 1000.0);
  CHECK(r2.compression == 1.0);
  const auto r3 = mdl_online_code(x, y3, 3, single);
  CHECK(r3.uniform_bits == 1000.0 * std::log2(3.0));
  CHECK(r3.compression == 1.0);

  const auto full = mdl_online_code(x, y3, 3);
  CHECK(full.uniform_bits == 1000.0 * std::log2(3.0));
  CHECK(full.blocks.size() == full.schedule.size());
  CHECK(full.blocks.back().block_end == 1000);
  CHECK(full.blocks.front().block_bits == doctest::Approx(double(full.blocks.front().block_end) * std::log2(3.0)));
  double sum = 0;
  for (const auto& b : full.blocks) {
    sum += b.block_bits;
    CHECK(b.cumulative_bits == doctest::Approx(sum).epsilon(1e-12));
  }
  CHECK(full.online_bits == doctest::Approx(sum).epsilon(1e-12));
  CHECK(full.compression > 0.0);
}

TEST_CASE("MDL sanity on random and separable labels") {
  const Eigen::MatrixXd x = gaussian(10000, 16, 10);
  const auto random = mdl_online_code(x, random_labels(10000, 2, 11), 2);
  CHECK(random.compression >= 0.95);
  CHECK(random.compression <= 1.1);
  const auto separable = mdl_online_code(x, sign_labels(x.col(3)), 2);
  CHECK(separable.compression >= 5.0);
  CHECK(separable.final_block_accuracy >= 0.99);
}

TEST_CASE("MDL compression is invariant to relabeling classes") {
  const Eigen::MatrixXd x = gaussian(2000, 6, 12);
  Eigen::VectorXi y(2000);
  for (Eigen::Index i = 0; i < 2000; ++i) y(i) = x(i, 0) < -0.4 ? 0 : (x(i, 1) > 0 ? 1 : 2);
  const int perm[3] = {2, 0, 1};
  Eigen::VectorXi yp(2000);
  for (Eigen::Index i = 0; i < 2000; ++i) yp(i) = perm[y(i)];
  const double a = mdl_online_code(x, y, 3).compression;
  const double b = mdl_online_code(x, yp, 3).compression;
  CHECK(b == doctest::Approx(a).epsilon(1e-6));
}

TEST_CASE("MDL schedule errors") {
  CHECK(block_ends({0.25, 0.5, 1.0}, 10) == std::vector<std::size_t>{2, 5, 10});
  CHECK_THROWS_AS(block_ends({0.5, 0.4, 1.0}, 100), ScheduleError);
  CHECK_THROWS_AS(block_ends({0.5, 0.9}, 100), ScheduleError);
  CHECK_THROWS_AS(block_ends({0.001, 1.0}, 100), ScheduleError);
  CHECK_THROWS_AS(block_ends({0.1, 0.11, 1.0}, 20), ScheduleError);
  CHECK_THROWS_AS(block_ends({}, 20), ScheduleError);
  CHECK(default_block_schedule() ==
        std::vector<double>{0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.0625, 0.125, 0.25, 0.5, 1.0});
}

TEST_CASE("MDL CSV columns") {
  const Eigen::MatrixXd x = gaussian(500, 3, 13);
  MdlConfig cfg;
  cfg.schedule = {0.1, 0.5, 1.0};
  std::ostringstream out;
  write_mdl_csv(out, mdl_online_code(x, random_labels(500, 2, 14), 2, cfg));
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "block_end,block_codelength_bits,cumulative_bits,compression");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("INLP projection algebra per iteration") {
  const RepMatrix train = synthetic_reps(3000, 12, 20);
  const RepMatrix eval = synthetic_reps(1500, 12, 21);
  for (int probe_classes : {2, 3}) {
    const RepMatrix tr = probe_classes == 2 ? train : synthetic_reps(3000, 12, 22, 3);
    const RepMatrix ev = probe_classes == 2 ? eval : synthetic_reps(1500, 12, 23, 3);
    const int c = probe_classes - 1;
    for (int k = 1; k <= 4; ++k) {
      InlpConfig cfg;
      cfg.max_iters = k;
      cfg.stop_at_majority = false;
      const auto r = inlp(tr, ev, cfg);
      const Eigen::MatrixXd& p = r.projection.matrix;
      CAPTURE(probe_classes);
      CAPTURE(k);
      CHECK(r.projection.iterations == k);
      CHECK((p * p - p).cwiseAbs().maxCoeff() <= 1e-8);
      CHECK((p - p.transpose()).cwiseAbs().maxCoeff() <= 1e-8);
      CHECK(r.projection.directions.cols() == k * c);
      CHECK((r.projection.directions.transpose() * p * ev.x.transpose()).cwiseAbs().maxCoeff() <= 1e-8);
      CHECK(numerical_rank(p) == 12 - k * c);
      REQUIRE(r.history.size() == std::size_t(k + 1));
      for (int i = 0; i <= k; ++i) {
        CHECK(r.history[i].iteration == i);
        CHECK(r.history[i].rank == 12 - i * c);
      }
    }
  }
}

TEST_CASE("INLP removes the feature and tracks task accuracy") {
  const RepMatrix train = synthetic_reps(4000, 16, 30);
  const RepMatrix eval = synthetic_reps(4000, 16, 31);
  InlpConfig cfg;
  cfg.max_iters = 12;
  const auto r = inlp(train, eval, cfg);
  CHECK(r.status == InlpStatus::ReachedMajority);
  CHECK(r.history.front().probe_acc >= 0.9);
  CHECK(r.history.back().probe_acc <= 0.5 + cfg.tolerance);
  REQUIRE(r.minority.has_value());
  CHECK(r.history.front().task_acc_minority.has_value());

  // Probing accuracy does not rise by more than 2 points in a 3-iteration
  // moving average.
  cfg.stop_at_majority = false;
  const auto full = inlp(train, eval, cfg);
  std::vector<double> avg;
  for (std::size_t i = 2; i < full.history.size(); ++i)
    avg.push_back((full.history[i].probe_acc + full.history[i - 1].probe_acc + full.history[i - 2].probe_acc) / 3);
  for (std::size_t i = 1; i < avg.size(); ++i) CHECK(avg[i] <= avg[i - 1] + 0.02);
}

TEST_CASE("INLP stops at rank exhaustion") {
  const RepMatrix train = synthetic_reps(600, 3, 40);
  const RepMatrix eval = synthetic_reps(600, 3, 41);
  InlpConfig cfg;
  cfg.max_iters = 10;
  cfg.stop_at_majority = false;
  const auto r = inlp(train, eval, cfg);
  CHECK(r.status == InlpStatus::RankExhausted);
  CHECK(r.history.back().rank <= 1);
  CHECK(r.projection.iterations <= 3);
}

TEST_CASE("INLP CSV columns") {
  std::ostringstream out;
  write_inlp_csv(out, {{0, 4, 0.9, 0.8, 0.7}, {1, 3, 0.6, 0.75, std::nullopt}});
  CHECK(out.str() == "iteration,rank,probe_acc,task_acc_overall,task_acc_minority\n0,4,0.9,0.8,0.7\n1,3,0.6,0.75,NA\n");
}

TEST_CASE("representation extraction") {
  TaskSpec spec;
  spec.bias_strength = 0.7;
  ModelConfig base;
  base.mlp_hidden = 64;
  const ModelConfig cfg = model_config_for(spec, base);
  const Dataset d = sample_dataset(spec, 1000, Split::Test);
  const FeatureHandle f(spec);
  const Model m(cfg);
  const RepMatrix a = extract_representations(m, d, f, "m", "d");
  CHECK(a.rows() == 1000);
  CHECK(a.dim() == 64);
  CHECK(a.model_id == "m");
  const RepMatrix b = extract_representations(m, d, f);
  CHECK(a.x == b.x);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    CHECK(a.probe_labels(i) == d[std::size_t(i)].feats.at("reserved"));
    CHECK(a.task_labels(i) == d[std::size_t(i)].label);
  }

  const RepMatrix z = extract_representations(Model::zeros(cfg), d, f);
  CHECK((z.x.rowwise() - z.x.row(0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(numerical_rank(z.x) <= 1);

  TaskSpec c = spec;
  c.task_id = TaskId::C;
  CHECK_THROWS_AS(extract_representations(m, sample_dataset(c, 10, Split::Test), FeatureHandle(c)), ConfigError);
}

} // TEST_SUITE
