#pragma once

#include "pnpslab/datagen.hpp"
#include "pnpslab/neuralnet.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pnpslab {

using Model = SequenceClassifier<double>;

enum class Method { Erm, Subsample, Poe, Dfl, GroupDro };

std::string to_string(Method method);
Method parse_method(std::string_view text);

/// Methods that need per-example feature annotations.
bool is_group_aware(Method method);

struct TrainConfig {
  Method method = Method::Erm;
  int epochs = 3;
  int batch_size = 32;
  AdamConfig adam{};
  double dfl_gamma = 2.0;
  double dro_eta = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Token ids of the selected examples as a seq_len x batch matrix.
TokenMatrix token_matrix(const Dataset& dataset, std::span<const std::size_t> indices);
TokenMatrix token_matrix(const Dataset& dataset);
Eigen::VectorXi label_vector(const Dataset& dataset);
/// Feature annotation of every example; ConfigError when one is missing.
Eigen::VectorXi feature_vector(const Dataset& dataset, const FeatureHandle& feature);

/// Multiplicative-weights state of Group-DRO over the 2*K (feature, label)
/// cells. Group g = feature * K + label.
class GroupDroWeights {
public:
  GroupDroWeights(std::size_t n_groups, double eta);

  /// q_g <- q_g * exp(eta * loss_g) for every present group, then normalize.
  void update(std::span<const double> group_losses, std::span<const bool> present);

  const std::vector<double>& weights() const noexcept { return q_; }

private:
  std::vector<double> q_;
  double eta_;
};

struct GroupStats {
  std::size_t count = 0;
  std::size_t correct = 0;
  /// Absent (nullopt) for empty groups.
  std::optional<double> accuracy;
  std::optional<double> mean_loss;
};

struct GroupTable {
  std::map<Group, GroupStats> groups;
  std::size_t total = 0;
  double accuracy = 0.0;
  double mean_loss = 0.0;
  /// Accuracy restricted to each gold label (nullopt when the label is absent).
  std::vector<std::optional<double>> per_class_accuracy;
  std::optional<Group> minority;
};

/// Bookkeeping behind evaluate_groups, on precomputed predictions and losses.
/// The minority group is the smallest non-empty group of `reference`
/// (defaults to the tabulated dataset itself).
GroupTable tabulate_groups(const Dataset& dataset, std::span<const int> predictions, std::span<const double> losses,
                           const GroupIndex* reference = nullptr);

GroupTable evaluate_groups(const Model& model, const Dataset& dataset, const FeatureHandle& feature,
                           const GroupIndex* training_groups = nullptr);

/// Smallest non-empty group of an index.
std::optional<Group> smallest_group(const GroupIndex& index);

struct HistoryRow {
  int epoch = 0;
  std::string split;
  std::string group; // "all" or "F=f,y=y"
  std::size_t n = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  Method method = Method::Erm;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  std::vector<HistoryRow> history;
  std::optional<BiasOnlyModel<double>> bias_model;
  std::vector<double> dro_weights;
  /// Groups of the data the main model was actually fitted on.
  GroupIndex train_groups;
  std::size_t train_size = 0;
};

/// Fit `model` on `dataset` with the configured method.
///
/// Train-split history rows are running averages over the epoch's
/// minibatches; dev rows (when `dev` is given) are full evaluations.
TrainResult train(Model model, const Dataset& dataset, const FeatureHandle& feature, const TrainConfig& config,
                  const Dataset* dev = nullptr);

/// Model config matching a task: vocabulary and class count come from the spec.
ModelConfig model_config_for(const TaskSpec& spec, ModelConfig base);

struct CrossGroupOptions {
  std::size_t n_train = 100000;
  std::size_t n_test = 20000;
};

struct CrossGroupReport {
  TaskSpec spec;
  /// Sizes of the F=0 / F=1 groups of the generated training data.
  std::array<std::size_t, 2> train_group_sizes{};
  std::array<std::size_t, 2> test_group_sizes{};
  std::size_t train_size = 0;
  GroupTable in_distribution;     // tested on F=1, the training group
  GroupTable out_of_distribution; // tested on F=0
  std::vector<HistoryRow> history;
};

/// Train on the feature-present group only (labels balanced within it) and
/// test on label-balanced samples of both groups.
CrossGroupReport cross_group_experiment(const TaskSpec& spec, const FeatureHandle& feature,
                                        const TrainConfig& config, const ModelConfig& model_config,
                                        const CrossGroupOptions& options = {});

} // namespace pnpslab
