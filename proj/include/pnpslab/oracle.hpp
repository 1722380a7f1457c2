#pragma once

// Counterfactual labels and probabilities of necessity / sufficiency.
//
// Because labels are a deterministic function of the latent (I, F), every
// counterfactual query reduces to enumerating how an intervention moves F.
// Exact estimates integrate over the latent distribution in closed form;
// Monte-Carlo estimates draw contexts from the conditional generative
// distribution and apply the sampled do-operators to real token sequences.

#include "pnpslab/datagen.hpp"

#include <Eigen/Dense>

#include <string>

namespace pnpslab {

enum class Direction { ForcePresent, ForceAbsent, ReplaceToken };

struct Intervention {
  FeatureHandle feature;
  Direction direction = Direction::ForceAbsent;
  /// 0-based index for ReplaceToken; must lie in the feature window.
  std::size_t position = 0;

  static Intervention force_present(const FeatureHandle& f) { return {f, Direction::ForcePresent, 0}; }
  static Intervention force_absent(const FeatureHandle& f) { return {f, Direction::ForceAbsent, 0}; }
  static Intervention replace_token(const FeatureHandle& f, std::size_t index) {
    return {f, Direction::ReplaceToken, index};
  }
};

/// Probability of each label class.
using LabelDistribution = Eigen::VectorXd;

/// Exact distribution of the label after the intervention.
LabelDistribution counterfactual_label(const TaskSpec& spec, const Example& example,
                                       const Intervention& intervention);

/// One draw of the counterfactual label, obtained by applying the sampled
/// do-operator to the tokens.
int sample_counterfactual_label(const TaskSpec& spec, const Example& example,
                                const Intervention& intervention, Rng& rng);

enum class EstimateMethod { Exact, MonteCarlo };

std::string to_string(EstimateMethod method);

struct PnPsEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t n_samples = 0;
  EstimateMethod method = EstimateMethod::Exact;
};

/// PN in one context: p(label changes | do(feature absent)). Requires the
/// feature to be present.
PnPsEstimate pn_context(const TaskSpec& spec, const Example& example, const FeatureHandle& feature);

/// PS in one context: p(label becomes target | do(feature present)).
/// Requires the feature to be absent and the label to differ from target.
PnPsEstimate ps_context(const TaskSpec& spec, const Example& example, const FeatureHandle& feature,
                        int target_label);

struct MarginalOptions {
  EstimateMethod method = EstimateMethod::Exact;
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
};

/// PN marginalized over contexts with the feature present and label = target.
PnPsEstimate pn_marginal(const TaskSpec& spec, const FeatureHandle& feature, int target_label,
                         const MarginalOptions& options = {});

/// PS marginalized over contexts with the feature absent and label != target.
PnPsEstimate ps_marginal(const TaskSpec& spec, const FeatureHandle& feature, int target_label,
                         const MarginalOptions& options = {});

/// 1 - PS (exact). A feature is spurious for the label when this is > 0.
double spuriousness(const TaskSpec& spec, const FeatureHandle& feature, int target_label);

enum class Category {
  Irrelevant,
  NecessaryNotSufficient,
  SufficientNotNecessary,
  NecessaryAndSufficient,
};

std::string to_string(Category category);

/// Quadrant of the (PN, PS) square; "high" means >= threshold.
Category categorize(double pn, double ps, double threshold = 0.5);

} // namespace pnpslab
