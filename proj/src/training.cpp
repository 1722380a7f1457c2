#include "pnpslab/training.hpp"

#include "pnpslab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace pnpslab {

std::string to_string(Method method) {
  switch (method) {
  case Method::Erm: return "erm";
  case Method::Subsample: return "subsample";
  case Method::Poe: return "poe";
  case Method::Dfl: return "dfl";
  case Method::GroupDro: return "group_dro";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  if (text == "erm") return Method::Erm;
  if (text == "subsample") return Method::Subsample;
  if (text == "poe") return Method::Poe;
  if (text == "dfl") return Method::Dfl;
  if (text == "group_dro") return Method::GroupDro;
  throw ConfigError("unknown method '" + std::string(text) + "'");
}

bool is_group_aware(Method method) { return method != Method::Erm; }

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(dfl_gamma >= 0.0)) throw ConfigError("dfl_gamma must be >= 0");
  if (!(dro_eta > 0.0)) throw ConfigError("dro_eta must be > 0");
}

TokenMatrix token_matrix(const Dataset& dataset, std::span<const std::size_t> indices) {
  const auto len = static_cast<Eigen::Index>(dataset.spec().seq_len);
  TokenMatrix m(len, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& tokens = dataset[indices[b]].tokens;
    for (Eigen::Index t = 0; t < len; ++t) m(t, static_cast<Eigen::Index>(b)) = tokens[static_cast<std::size_t>(t)];
  }
  return m;
}

TokenMatrix token_matrix(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  return token_matrix(dataset, all);
}

Eigen::VectorXi label_vector(const Dataset& dataset) {
  Eigen::VectorXi y(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i) y(static_cast<Eigen::Index>(i)) = dataset[i].label;
  return y;
}

Eigen::VectorXi feature_vector(const Dataset& dataset, const FeatureHandle& feature) {
  Eigen::VectorXi f(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto it = dataset[i].feats.find(feature.name());
    if (it == dataset[i].feats.end())
      throw ConfigError("example " + std::to_string(i) + " lacks the '" + feature.name() + "' annotation");
    f(static_cast<Eigen::Index>(i)) = it->second;
  }
  return f;
}

// --- Group-DRO ---------------------------------------------------------------

GroupDroWeights::GroupDroWeights(std::size_t n_groups, double eta)
    : q_(n_groups, 1.0 / double(n_groups)), eta_(eta) {
  if (n_groups == 0) throw ArgumentError("Group-DRO needs at least one group");
}

void GroupDroWeights::update(std::span<const double> group_losses, std::span<const bool> present) {
  if (group_losses.size() != q_.size() || present.size() != q_.size())
    throw ArgumentError("group loss vector has the wrong length");
  // Shift every exponent (absent groups get a zero loss) by the largest
  // present loss so exp() cannot overflow; the shift cancels in the normalization.
  double shift = 0.0;
  bool any = false;
  for (std::size_t g = 0; g < q_.size(); ++g)
    if (present[g]) {
      shift = any ? std::max(shift, group_losses[g]) : group_losses[g];
      any = true;
    }
  if (!any) return;
  for (std::size_t g = 0; g < q_.size(); ++g)
    q_[g] *= std::exp(eta_ * ((present[g] ? group_losses[g] : 0.0) - shift));
  const double z = std::accumulate(q_.begin(), q_.end(), 0.0);
  for (double& q : q_) q /= z;
}

// --- Evaluation --------------------------------------------------------------

std::optional<Group> smallest_group(const GroupIndex& index) {
  std::optional<Group> best;
  std::size_t best_count = 0;
  for (const auto& [group, members] : index) {
    if (members.empty()) continue;
    if (!best || members.size() < best_count) {
      best = group;
      best_count = members.size();
    }
  }
  return best;
}

GroupTable tabulate_groups(const Dataset& dataset, std::span<const int> predictions, std::span<const double> losses,
                           const GroupIndex* reference) {
  if (predictions.size() != dataset.size() || losses.size() != dataset.size())
    throw ArgumentError("prediction count does not match the dataset");
  const int k = dataset.spec().num_classes();
  GroupTable table;
  for (int f : {0, 1})
    for (int y = 0; y < k; ++y) table.groups[Group{f, y}];

  std::vector<std::size_t> class_count(static_cast<std::size_t>(k), 0), class_correct(static_cast<std::size_t>(k), 0);
  std::map<Group, double> loss_sum;
  std::size_t correct = 0;
  double total_loss = 0.0;
  for (const auto& [group, members] : dataset.group_index()) {
    auto& stats = table.groups[group];
    for (std::size_t i : members) {
      const bool hit = predictions[i] == dataset[i].label;
      stats.count += 1;
      stats.correct += hit;
      loss_sum[group] += losses[i];
    }
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const bool hit = predictions[i] == dataset[i].label;
    correct += hit;
    total_loss += losses[i];
    class_count[static_cast<std::size_t>(dataset[i].label)] += 1;
    class_correct[static_cast<std::size_t>(dataset[i].label)] += hit;
  }
  for (auto& [group, stats] : table.groups)
    if (stats.count > 0) {
      stats.accuracy = double(stats.correct) / double(stats.count);
      stats.mean_loss = loss_sum[group] / double(stats.count);
    }
  table.total = dataset.size();
  if (table.total > 0) {
    table.accuracy = double(correct) / double(table.total);
    table.mean_loss = total_loss / double(table.total);
  }
  for (int y = 0; y < k; ++y) {
    const auto uy = static_cast<std::size_t>(y);
    table.per_class_accuracy.push_back(class_count[uy] > 0
                                           ? std::optional<double>(double(class_correct[uy]) / double(class_count[uy]))
                                           : std::nullopt);
  }
  table.minority = smallest_group(reference ? *reference : dataset.group_index());
  return table;
}

namespace {

constexpr std::size_t kEvalChunk = 512;

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum()) - logits(label);
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return static_cast<int>(best);
}

} // namespace

GroupTable evaluate_groups(const Model& model, const Dataset& dataset, const FeatureHandle& feature,
                           const GroupIndex* training_groups) {
  if (dataset.empty()) throw PreconditionError("evaluate_groups needs a non-empty dataset");
  (void)feature_vector(dataset, feature);
  std::vector<int> predictions(dataset.size());
  std::vector<double> losses(dataset.size());
  std::vector<std::size_t> chunk;
  for (std::size_t start = 0; start < dataset.size(); start += kEvalChunk) {
    chunk.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + kEvalChunk); ++i) chunk.push_back(i);
    const auto out = model.forward(token_matrix(dataset, chunk));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const Eigen::VectorXd logits = out.logits.col(static_cast<Eigen::Index>(b));
      predictions[chunk[b]] = argmax(logits);
      losses[chunk[b]] = cross_entropy(logits, dataset[chunk[b]].label);
    }
  }
  return tabulate_groups(dataset, predictions, losses, training_groups);
}

// --- Training ----------------------------------------------------------------

namespace {

struct RunningGroups {
  explicit RunningGroups(int k) : k(k), n(2 * std::size_t(k), 0), correct(2 * std::size_t(k), 0), loss(2 * std::size_t(k), 0.0) {}

  void add(int feature, int label, bool hit, double l) {
    const auto g = static_cast<std::size_t>(feature * k + label);
    n[g] += 1;
    correct[g] += hit;
    loss[g] += l;
  }

  int k;
  std::vector<std::size_t> n, correct;
  std::vector<double> loss;
};

void append_rows(std::vector<HistoryRow>& history, int epoch, const std::string& split, const RunningGroups& acc,
                 const TrainConfig& config) {
  std::size_t n_all = 0, correct_all = 0;
  double loss_all = 0.0;
  for (std::size_t g = 0; g < acc.n.size(); ++g) {
    n_all += acc.n[g];
    correct_all += acc.correct[g];
    loss_all += acc.loss[g];
  }
  if (n_all > 0)
    history.push_back({epoch, split, "all", n_all, loss_all / double(n_all), double(correct_all) / double(n_all),
                       config.method, config.seed});
  for (std::size_t g = 0; g < acc.n.size(); ++g) {
    if (acc.n[g] == 0) continue;
    const Group group{int(g) / acc.k, int(g) % acc.k};
    history.push_back({epoch, split, to_string(group), acc.n[g], acc.loss[g] / double(acc.n[g]),
                       double(acc.correct[g]) / double(acc.n[g]), config.method, config.seed});
  }
}

void append_table(std::vector<HistoryRow>& history, int epoch, const std::string& split, const GroupTable& table,
                  const TrainConfig& config) {
  history.push_back({epoch, split, "all", table.total, table.mean_loss, table.accuracy, config.method, config.seed});
  for (const auto& [group, stats] : table.groups)
    if (stats.count > 0)
      history.push_back({epoch, split, to_string(group), stats.count, *stats.mean_loss, *stats.accuracy, config.method,
                         config.seed});
}

} // namespace

TrainResult train(Model model, const Dataset& dataset, const FeatureHandle& feature, const TrainConfig& config,
                  const Dataset* dev) {
  config.validate();
  if (dataset.split() != Split::Train) throw ConfigError("train expects a dataset tagged 'train'");
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  if (model.config().n_classes != dataset.spec().num_classes() || model.config().vocab_size < dataset.spec().vocab_size)
    throw ConfigError("model config does not match the task (classes or vocabulary)");
  if (is_group_aware(config.method) && !dataset.annotated())
    throw ConfigError("method '" + to_string(config.method) + "' needs '" + feature.name() + "' annotations");

  Rng rng(config.seed);
  const int k = dataset.spec().num_classes();
  const Dataset data = config.method == Method::Subsample ? subsample_balanced(dataset, feature, rng) : dataset;
  const Eigen::VectorXi labels = label_vector(data);
  const Eigen::VectorXi features = dataset.annotated() ? feature_vector(data, feature) : Eigen::VectorXi::Zero(labels.size());

  TrainResult result{std::move(model), {}, std::nullopt, {}, data.group_index(), data.size()};
  Model& net = result.model;

  if (config.method == Method::Poe || config.method == Method::Dfl) {
    result.bias_model.emplace(k);
    result.bias_model->fit(features, labels);
  }
  std::optional<GroupDroWeights> dro;
  if (config.method == Method::GroupDro) dro.emplace(std::size_t(2 * k), config.dro_eta);

  auto m = Parameters<double>::zeros(net.config());
  auto v = Parameters<double>::zeros(net.config());
  long step = 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch_size = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    RunningGroups running(k);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch_size, order.size() - start));
      const auto n = static_cast<Eigen::Index>(idx.size());
      const TokenMatrix tokens = token_matrix(data, idx);
      Eigen::VectorXi y(n), f(n);
      for (Eigen::Index b = 0; b < n; ++b) {
        y(b) = labels(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(b)]));
        f(b) = features(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(b)]));
      }

      LossAndGrad<double> out;
      switch (config.method) {
      case Method::Erm:
      case Method::Subsample:
        out = net.loss_and_grad(tokens, y, Eigen::VectorXd::Ones(n));
        break;
      case Method::Poe: {
        const Eigen::MatrixXd offsets = result.bias_model->log_probs(f);
        out = net.loss_and_grad(tokens, y, Eigen::VectorXd::Ones(n), &offsets);
        break;
      }
      case Method::Dfl: {
        const Eigen::MatrixXd lp = result.bias_model->log_probs(f);
        Eigen::VectorXd w(n);
        for (Eigen::Index b = 0; b < n; ++b) w(b) = std::pow(1.0 - std::exp(lp(y(b), b)), config.dfl_gamma);
        out = net.loss_and_grad(tokens, y, w);
        break;
      }
      case Method::GroupDro: {
        auto weight_fn = [&](const Eigen::VectorXd& per_example) {
          std::vector<double> sum(std::size_t(2 * k), 0.0);
          std::vector<std::size_t> count(std::size_t(2 * k), 0);
          for (Eigen::Index b = 0; b < n; ++b) {
            const auto g = static_cast<std::size_t>(f(b) * k + y(b));
            sum[g] += per_example(b);
            count[g] += 1;
          }
          std::vector<double> mean(sum.size(), 0.0);
          auto present = std::make_unique<bool[]>(sum.size());
          for (std::size_t g = 0; g < sum.size(); ++g) {
            present[g] = count[g] > 0;
            if (present[g]) mean[g] = sum[g] / double(count[g]);
          }
          dro->update(mean, std::span<const bool>(present.get(), sum.size()));
          Eigen::VectorXd w(n);
          for (Eigen::Index b = 0; b < n; ++b) {
            const auto g = static_cast<std::size_t>(f(b) * k + y(b));
            w(b) = dro->weights()[g] / double(count[g]);
          }
          return w;
        };
        out = net.loss_and_grad_with(tokens, y, weight_fn, nullptr, Reduction::WeightedSum);
        break;
      }
      }
      if (!std::isfinite(out.loss)) throw NumericError("non-finite training loss");

      for (Eigen::Index b = 0; b < n; ++b) {
        const Eigen::VectorXd logits = out.logits.col(b);
        running.add(f(b), y(b), argmax(logits) == y(b), cross_entropy(logits, y(b)));
      }

      ++step;
      Parameters<double>::zip(
          [&](std::string_view, auto p, const auto& g, auto mm, auto vv) {
            adam_update<double>(p, g, mm, vv, config.adam, step);
          },
          net.params(), out.grad, m, v);
      if (!net.params().all_finite())
        throw NumericError("non-finite parameters after update in block '" + net.params().first_non_finite_block() +
                           "'");
    }
    append_rows(result.history, epoch, "train", running, config);
    if (dev) append_table(result.history, epoch, "dev", evaluate_groups(net, *dev, feature, &result.train_groups), config);
  }
  if (dro) result.dro_weights = dro->weights();
  return result;
}

ModelConfig model_config_for(const TaskSpec& spec, ModelConfig base) {
  base.vocab_size = spec.vocab_size;
  base.n_classes = spec.num_classes();
  return base;
}

CrossGroupReport cross_group_experiment(const TaskSpec& spec, const FeatureHandle& feature, const TrainConfig& config,
                                        const ModelConfig& model_config, const CrossGroupOptions& options) {
  CrossGroupReport report;
  report.spec = spec;
  const Dataset train_all = sample_dataset(spec, options.n_train, Split::Train);
  const FeatureSplit train_split = group_split(train_all, feature);
  for (std::size_t f = 0; f < 2; ++f) report.train_group_sizes[f] = train_split.by_value[f].size();
  if (train_split.by_value[1].empty())
    throw InfeasibleError("no training examples with the feature present", 0.0);

  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  Dataset train_group;
  try {
    train_group = balance_labels(train_split.by_value[1], rng);
  } catch (const InfeasibleError& e) {
    throw InfeasibleError(std::string("cannot balance labels within the feature-present group: ") + e.what(), 0.0);
  }
  report.train_size = train_group.size();

  TrainConfig erm = config;
  erm.method = Method::Erm;
  auto trained = train(Model(model_config_for(spec, model_config)), train_group, feature, erm);
  report.history = std::move(trained.history);

  const Dataset test_all = sample_dataset(spec, options.n_test, Split::Test);
  const FeatureSplit test_split = group_split(test_all, feature);
  for (std::size_t f = 0; f < 2; ++f) report.test_group_sizes[f] = test_split.by_value[f].size();
  auto balanced_eval = [&](const Dataset& group) {
    return evaluate_groups(trained.model, balance_labels(group, rng), feature, &trained.train_groups);
  };
  report.in_distribution = balanced_eval(test_split.by_value[1]);
  report.out_of_distribution = balanced_eval(test_split.by_value[0]);
  return report;
}

} // namespace pnpslab
