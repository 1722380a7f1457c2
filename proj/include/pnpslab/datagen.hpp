#pragma once

// Synthetic sequence-classification tasks with a known latent cause.
//
// Every example is generated from a latent pair (I, F):
//   I = the tokens at positions 1 and 2 are identical,
//   F = the reserved token occurs somewhere in positions 3..seq_len.
// The label is a deterministic function of (I, F), so every counterfactual
// label can be computed exactly from the token sequence.
//
// Positions in comments are 1-based; vector indices are 0-based, so the
// feature window 3..seq_len is the index range [2, seq_len).

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pnpslab {

using Token = std::int32_t;
using Rng = std::mt19937_64;

enum class TaskId { A, B, C };

std::string to_string(TaskId task);
TaskId parse_task_id(std::string_view text);

/// Number of label classes of a task (2 for A and B, 3 for C).
int num_classes(TaskId task);

/// Label as a function of the latent cause.
///   A: y = I
///   B: y = I xor F
///   C: y = 0 if !F, 2 if F and I, 1 if F and !I
int label_fn(TaskId task, bool identical, bool feature);

struct TaskSpec {
  TaskId task_id = TaskId::A;
  int vocab_size = 1000;
  int seq_len = 10;
  Token reserved_token = 2;
  /// p(I = 1) for task C.
  double identical_prob = 0.3;
  /// Feature/label coupling in [0.5, 1]; 0.5 means independent.
  double bias_strength = 0.5;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
  int num_classes() const { return pnpslab::num_classes(task_id); }

  bool operator==(const TaskSpec&) const = default;
};

struct Latent {
  bool identical = false;
  bool feature = false;

  auto operator<=>(const Latent&) const = default;
};

/// Joint probability of the latent cause, indexed [2 * I + F].
std::array<double, 4> latent_distribution(const TaskSpec& spec);

enum class Split { Train, Dev, Test };

std::string to_string(Split split);
Split parse_split(std::string_view text);

struct Example {
  std::vector<Token> tokens;
  int label = 0;
  std::map<std::string, int> feats;
  Latent latent;

  bool operator==(const Example&) const = default;
};

/// Recompute (I, F) from a token sequence.
Latent recompute_latent(const TaskSpec& spec, std::span<const Token> tokens);

/// Recompute latent, feature annotation and label from the tokens.
void refresh(const TaskSpec& spec, Example& example);

/// Presence of the reserved token in the feature window, together with the
/// do-operators that force it present or absent.
///
/// Interventions only touch positions 3..seq_len. Replacement tokens are
/// drawn uniformly from V \ {current token} (and never the feature token
/// when removing it). Every returned example is refreshed, so its label is
/// the counterfactual label under the intervention.
class FeatureHandle {
public:
  static constexpr std::string_view kReserved = "reserved";

  explicit FeatureHandle(const TaskSpec& spec);

  const std::string& name() const noexcept { return name_; }
  Token token() const noexcept { return spec_.reserved_token; }
  const TaskSpec& spec() const noexcept { return spec_; }

  /// First index of the feature window.
  static constexpr std::size_t window_begin() noexcept { return 2; }

  int detect(const Example& example) const;
  int detect(std::span<const Token> tokens) const;

  Example do_present(const Example& example, Rng& rng) const;
  Example do_absent(const Example& example, Rng& rng) const;

  /// Replace the token at 0-based `index` (must lie in the feature window)
  /// with a uniform draw from V \ {current}.
  Example replace_token(const Example& example, std::size_t index, Rng& rng) const;

  /// Token drawn uniformly from V \ ({reserved} ∪ {exclude}).
  Token draw_background(Rng& rng, Token exclude = -1) const;

private:
  TaskSpec spec_;
  std::string name_;
};

struct Group {
  int feature = 0;
  int label = 0;

  auto operator<=>(const Group&) const = default;
};

std::string to_string(const Group& group);

using GroupIndex = std::map<Group, std::vector<std::size_t>>;

/// Immutable collection of examples of one split.
class Dataset {
public:
  Dataset() = default;
  Dataset(TaskSpec spec, std::vector<Example> examples, Split split);

  const TaskSpec& spec() const noexcept { return spec_; }
  Split split() const noexcept { return split_; }
  std::span<const Example> examples() const noexcept { return examples_; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  const Example& operator[](std::size_t i) const { return examples_[i]; }

  /// (feature value, label) -> example indices for the reserved feature.
  /// Partitions the examples when `annotated()` holds.
  const GroupIndex& group_index() const noexcept { return groups_; }
  std::size_t group_count(Group group) const;
  bool annotated() const noexcept { return annotated_; }

  std::vector<std::size_t> label_counts() const;

  bool operator==(const Dataset& other) const {
    return spec_ == other.spec_ && split_ == other.split_ && examples_ == other.examples_;
  }

private:
  TaskSpec spec_;
  std::vector<Example> examples_;
  Split split_ = Split::Train;
  GroupIndex groups_;
  bool annotated_ = true;
};

/// Draw a latent cause from the task's generative distribution.
Latent sample_latent(const TaskSpec& spec, Rng& rng);

/// Realize tokens for a given latent cause.
Example realize_example(const TaskSpec& spec, Latent latent, Rng& rng);

/// n examples; deterministic in (spec, n, split).
Dataset sample_dataset(const TaskSpec& spec, std::size_t n, Split split);

/// Place the feature token at the last position of a `prevalence` fraction of
/// examples, `strength` of which carry `target_label`.
///
/// Requires the feature to be absent everywhere and to have no causal effect
/// on the label (task A). Throws InfeasibleError when either label pool is
/// too small; achievable() then reports the largest feasible prevalence.
Dataset inject_marker_bias(const Dataset& dataset, const FeatureHandle& feature,
                           double prevalence, double strength, int target_label,
                           Rng& rng);

/// Apply do_absent to every example. Labels are recomputed, so they only
/// stay put for tasks where the feature has no causal effect.
Dataset remove_feature(const Dataset& dataset, const FeatureHandle& feature, Rng& rng);

/// Subsample every (feature, label) group to the smallest group size.
/// Throws BalanceError naming the first empty group.
Dataset subsample_balanced(const Dataset& dataset, const FeatureHandle& feature, Rng& rng);

/// Subsample every label to the rarest label's count.
/// Throws InfeasibleError when a label is missing.
Dataset balance_labels(const Dataset& dataset, Rng& rng);

struct FeatureSplit {
  /// by_value[f] holds the examples with feature value f.
  std::array<Dataset, 2> by_value;
  std::array<std::vector<std::size_t>, 2> label_counts;
  /// Set when one of the two groups is empty.
  bool single_group = false;
};

FeatureSplit group_split(const Dataset& dataset, const FeatureHandle& feature);

} // namespace pnpslab
