#include "pnpslab/oracle.hpp"

#include "pnpslab/errors.hpp"
#include "pnpslab/stats.hpp"

#include <algorithm>

namespace pnpslab {

namespace {

void check_example(const TaskSpec& spec, const Example& example) {
  if (example.tokens.size() != static_cast<std::size_t>(spec.seq_len))
    throw ArgumentError("example length does not match the task's seq_len");
  for (Token t : example.tokens)
    if (t < 0 || t >= spec.vocab_size) throw ArgumentError("token outside the vocabulary");
}

LabelDistribution point_mass(int k, int label) {
  LabelDistribution d = LabelDistribution::Zero(k);
  d(label) = 1.0;
  return d;
}

/// Latent cells admitted by a conditioning event, with their probabilities.
struct Cell {
  Latent latent;
  double weight;
};

template <class Pred>
std::vector<Cell> conditional_cells(const TaskSpec& spec, Pred admit) {
  const auto joint = latent_distribution(spec);
  std::vector<Cell> cells;
  for (bool i : {false, true})
    for (bool f : {false, true}) {
      const double p = joint[2 * int(i) + int(f)];
      if (p > 0.0 && admit(i, f)) cells.push_back({Latent{i, f}, p});
    }
  return cells;
}

double total_weight(const std::vector<Cell>& cells) {
  double w = 0.0;
  for (const auto& c : cells) w += c.weight;
  return w;
}

template <class Indicator>
PnPsEstimate integrate(const TaskSpec& spec, const std::vector<Cell>& cells, const MarginalOptions& options,
                       Indicator indicator, const Intervention& intervention, int target_label,
                       bool count_change) {
  PnPsEstimate est;
  est.method = options.method;
  const double z = total_weight(cells);
  if (options.method == EstimateMethod::Exact) {
    double acc = 0.0;
    for (const auto& c : cells) acc += c.weight * indicator(c.latent);
    est.value = acc / z;
    return est;
  }
  if (options.n_samples < 1) throw ArgumentError("monte-carlo estimate needs n_samples >= 1");
  Rng rng(options.seed);
  std::vector<double> weights;
  for (const auto& c : cells) weights.push_back(c.weight);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::size_t hits = 0;
  for (std::size_t s = 0; s < options.n_samples; ++s) {
    const Example context = realize_example(spec, cells[pick(rng)].latent, rng);
    const int y = sample_counterfactual_label(spec, context, intervention, rng);
    hits += count_change ? (y != target_label) : (y == target_label);
  }
  est.n_samples = options.n_samples;
  est.value = double(hits) / double(options.n_samples);
  est.std_error = binomial_stderr(est.value, options.n_samples);
  return est;
}

void check_target(const TaskSpec& spec, int target_label) {
  if (target_label < 0 || target_label >= spec.num_classes())
    throw ArgumentError("target label " + std::to_string(target_label) + " out of range");
}

} // namespace

LabelDistribution counterfactual_label(const TaskSpec& spec, const Example& example,
                                       const Intervention& intervention) {
  check_example(spec, example);
  const int k = spec.num_classes();
  const Latent latent = recompute_latent(spec, example.tokens);
  auto label_with = [&](bool feature) { return label_fn(spec.task_id, latent.identical, feature); };

  switch (intervention.direction) {
  case Direction::ForceAbsent: return point_mass(k, label_with(false));
  case Direction::ForcePresent: return point_mass(k, label_with(true));
  case Direction::ReplaceToken: break;
  }

  const std::size_t pos = intervention.position;
  if (pos < FeatureHandle::window_begin() || pos >= example.tokens.size())
    throw ArgumentError("replace_token position " + std::to_string(pos + 1) + " outside 3.." +
                        std::to_string(example.tokens.size()));
  const Token feature_token = intervention.feature.token();
  if (example.tokens[pos] == feature_token) {
    const auto occurrences = std::count(example.tokens.begin() + FeatureHandle::window_begin(),
                                        example.tokens.end(), feature_token);
    return point_mass(k, label_with(occurrences > 1));
  }
  // The replacement hits the feature token with probability 1 / (V - 1).
  const double hit = 1.0 / double(spec.vocab_size - 1);
  LabelDistribution d = LabelDistribution::Zero(k);
  d(label_with(latent.feature)) += 1.0 - hit;
  d(label_with(true)) += hit;
  return d;
}

int sample_counterfactual_label(const TaskSpec& spec, const Example& example,
                                const Intervention& intervention, Rng& rng) {
  check_example(spec, example);
  switch (intervention.direction) {
  case Direction::ForceAbsent: return intervention.feature.do_absent(example, rng).label;
  case Direction::ForcePresent: return intervention.feature.do_present(example, rng).label;
  case Direction::ReplaceToken:
    return intervention.feature.replace_token(example, intervention.position, rng).label;
  }
  throw ArgumentError("unknown intervention direction");
}

std::string to_string(EstimateMethod method) {
  return method == EstimateMethod::Exact ? "exact" : "monte_carlo";
}

PnPsEstimate pn_context(const TaskSpec& spec, const Example& example, const FeatureHandle& feature) {
  if (!feature.detect(example))
    throw PreconditionError("PN conditions on the feature being present (X_i = x_i), but '" +
                            feature.name() + "' is absent");
  const auto d = counterfactual_label(spec, example, Intervention::force_absent(feature));
  PnPsEstimate est;
  est.value = 1.0 - d(example.label);
  return est;
}

PnPsEstimate ps_context(const TaskSpec& spec, const Example& example, const FeatureHandle& feature,
                        int target_label) {
  check_target(spec, target_label);
  if (feature.detect(example))
    throw PreconditionError("PS conditions on the feature being absent, but '" + feature.name() +
                            "' is present");
  if (example.label == target_label)
    throw PreconditionError("PS conditions on the label differing from the target label " +
                            std::to_string(target_label));
  const auto d = counterfactual_label(spec, example, Intervention::force_present(feature));
  PnPsEstimate est;
  est.value = d(target_label);
  return est;
}

PnPsEstimate pn_marginal(const TaskSpec& spec, const FeatureHandle& feature, int target_label,
                         const MarginalOptions& options) {
  spec.validate();
  check_target(spec, target_label);
  const auto cells = conditional_cells(spec, [&](bool i, bool f) {
    return f && label_fn(spec.task_id, i, f) == target_label;
  });
  if (cells.empty())
    throw UndefinedEstimateError("PN undefined: p(feature present, y = " + std::to_string(target_label) +
                                 ") is zero under this task");
  auto flips = [&](Latent l) { return label_fn(spec.task_id, l.identical, false) != target_label ? 1.0 : 0.0; };
  return integrate(spec, cells, options, flips, Intervention::force_absent(feature), target_label, true);
}

PnPsEstimate ps_marginal(const TaskSpec& spec, const FeatureHandle& feature, int target_label,
                         const MarginalOptions& options) {
  spec.validate();
  check_target(spec, target_label);
  const auto cells = conditional_cells(spec, [&](bool i, bool f) {
    return !f && label_fn(spec.task_id, i, f) != target_label;
  });
  if (cells.empty())
    throw UndefinedEstimateError("PS undefined: p(feature absent, y != " + std::to_string(target_label) +
                                 ") is zero under this task");
  auto produces = [&](Latent l) { return label_fn(spec.task_id, l.identical, true) == target_label ? 1.0 : 0.0; };
  return integrate(spec, cells, options, produces, Intervention::force_present(feature), target_label, false);
}

double spuriousness(const TaskSpec& spec, const FeatureHandle& feature, int target_label) {
  return 1.0 - ps_marginal(spec, feature, target_label).value;
}

std::string to_string(Category category) {
  switch (category) {
  case Category::Irrelevant: return "irrelevant";
  case Category::NecessaryNotSufficient: return "necessary-not-sufficient";
  case Category::SufficientNotNecessary: return "sufficient-not-necessary";
  case Category::NecessaryAndSufficient: return "necessary-and-sufficient";
  }
  return "?";
}

Category categorize(double pn, double ps, double threshold) {
  const bool necessary = pn >= threshold;
  const bool sufficient = ps >= threshold;
  if (necessary && sufficient) return Category::NecessaryAndSufficient;
  if (necessary) return Category::NecessaryNotSufficient;
  if (sufficient) return Category::SufficientNotNecessary;
  return Category::Irrelevant;
}

} // namespace pnpslab
