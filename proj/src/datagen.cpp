#include "pnpslab/datagen.hpp"

#include "pnpslab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pnpslab {

std::string to_string(TaskId task) {
  switch (task) {
  case TaskId::A: return "A";
  case TaskId::B: return "B";
  case TaskId::C: return "C";
  }
  return "?";
}

TaskId parse_task_id(std::string_view text) {
  if (text == "A" || text == "a") return TaskId::A;
  if (text == "B" || text == "b") return TaskId::B;
  if (text == "C" || text == "c") return TaskId::C;
  throw ConfigError("unknown task id '" + std::string(text) + "' (expected A, B or C)");
}

int num_classes(TaskId task) { return task == TaskId::C ? 3 : 2; }

int label_fn(TaskId task, bool identical, bool feature) {
  switch (task) {
  case TaskId::A: return identical ? 1 : 0;
  case TaskId::B: return (identical != feature) ? 1 : 0;
  case TaskId::C:
    if (!feature) return 0;
    return identical ? 2 : 1;
  }
  throw ConfigError("unknown task id");
}

void TaskSpec::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
  if (seq_len < 3) throw ConfigError("seq_len must be >= 3");
  if (reserved_token < 0 || reserved_token >= vocab_size)
    throw ConfigError("reserved_token must lie in [0, vocab_size)");
  if (!(identical_prob >= 0.0 && identical_prob <= 1.0))
    throw ConfigError("identical_prob must lie in [0, 1]");
  if (!(bias_strength >= 0.5 && bias_strength <= 1.0))
    throw ConfigError("bias_strength must lie in [0.5, 1]");
}

std::array<double, 4> latent_distribution(const TaskSpec& spec) {
  const double b = spec.bias_strength;
  std::array<double, 4> p{};
  auto at = [&p](bool i, bool f) -> double& { return p[2 * int(i) + int(f)]; };
  switch (spec.task_id) {
  case TaskId::A:
    // y = I ~ Bern(1/2), then p(F=1 | y=1) = b, p(F=1 | y=0) = 1 - b.
    at(true, true) = 0.5 * b;
    at(true, false) = 0.5 * (1.0 - b);
    at(false, true) = 0.5 * (1.0 - b);
    at(false, false) = 0.5 * b;
    break;
  case TaskId::B:
    // F ~ Bern(1/2); p(I=0 | F) = b, so p(y=1 | F=1) = p(y=0 | F=0) = b.
    for (bool f : {false, true}) {
      at(true, f) = 0.5 * (1.0 - b);
      at(false, f) = 0.5 * b;
    }
    break;
  case TaskId::C:
    for (bool f : {false, true}) {
      at(true, f) = 0.5 * spec.identical_prob;
      at(false, f) = 0.5 * (1.0 - spec.identical_prob);
    }
    break;
  }
  return p;
}

std::string to_string(Split split) {
  switch (split) {
  case Split::Train: return "train";
  case Split::Dev: return "dev";
  case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "dev") return Split::Dev;
  if (text == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(text) + "'");
}

Latent recompute_latent(const TaskSpec& spec, std::span<const Token> tokens) {
  Latent latent;
  latent.identical = tokens.size() >= 2 && tokens[0] == tokens[1];
  latent.feature = std::find(tokens.begin() + std::min<std::ptrdiff_t>(2, tokens.size()),
                             tokens.end(), spec.reserved_token) != tokens.end();
  return latent;
}

void refresh(const TaskSpec& spec, Example& example) {
  example.latent = recompute_latent(spec, example.tokens);
  example.feats[std::string(FeatureHandle::kReserved)] = example.latent.feature ? 1 : 0;
  example.label = label_fn(spec.task_id, example.latent.identical, example.latent.feature);
}

// --- FeatureHandle ---------------------------------------------------------

FeatureHandle::FeatureHandle(const TaskSpec& spec) : spec_(spec), name_(kReserved) {}

int FeatureHandle::detect(std::span<const Token> tokens) const {
  if (tokens.size() <= window_begin()) return 0;
  return std::find(tokens.begin() + window_begin(), tokens.end(), token()) != tokens.end() ? 1 : 0;
}

int FeatureHandle::detect(const Example& example) const { return detect(example.tokens); }

Token FeatureHandle::draw_background(Rng& rng, Token exclude) const {
  // Uniform over V minus the reserved token and `exclude`, by rank mapping.
  std::array<Token, 2> skip{spec_.reserved_token, exclude};
  if (skip[1] < 0 || skip[1] == skip[0]) skip[1] = spec_.vocab_size; // nothing extra
  std::sort(skip.begin(), skip.end());
  const int excluded = skip[1] < spec_.vocab_size ? 2 : 1;
  std::uniform_int_distribution<Token> draw(0, spec_.vocab_size - 1 - excluded);
  Token t = draw(rng);
  for (Token s : skip)
    if (t >= s) ++t;
  return t;
}

Example FeatureHandle::do_present(const Example& example, Rng& rng) const {
  Example out = example;
  if (!detect(out)) {
    std::uniform_int_distribution<std::size_t> pos(window_begin(), out.tokens.size() - 1);
    out.tokens[pos(rng)] = token();
  }
  refresh(spec_, out);
  return out;
}

Example FeatureHandle::do_absent(const Example& example, Rng& rng) const {
  Example out = example;
  for (std::size_t i = window_begin(); i < out.tokens.size(); ++i)
    if (out.tokens[i] == token()) out.tokens[i] = draw_background(rng);
  refresh(spec_, out);
  return out;
}

Example FeatureHandle::replace_token(const Example& example, std::size_t index, Rng& rng) const {
  if (index < window_begin() || index >= example.tokens.size())
    throw ArgumentError("replace_token position " + std::to_string(index + 1) +
                        " outside the feature window 3.." + std::to_string(example.tokens.size()));
  Example out = example;
  const Token current = out.tokens[index];
  std::uniform_int_distribution<Token> draw(0, spec_.vocab_size - 2);
  Token t = draw(rng);
  if (t >= current) ++t;
  out.tokens[index] = t;
  refresh(spec_, out);
  return out;
}

std::string to_string(const Group& group) {
  std::ostringstream os;
  os << "F=" << group.feature << ",y=" << group.label;
  return os.str();
}

// --- Dataset ---------------------------------------------------------------

Dataset::Dataset(TaskSpec spec, std::vector<Example> examples, Split split)
    : spec_(spec), examples_(std::move(examples)), split_(split) {
  const std::string key(FeatureHandle::kReserved);
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    auto it = examples_[i].feats.find(key);
    if (it == examples_[i].feats.end()) {
      annotated_ = false;
      continue;
    }
    groups_[Group{it->second, examples_[i].label}].push_back(i);
  }
}

std::size_t Dataset::group_count(Group group) const {
  auto it = groups_.find(group);
  return it == groups_.end() ? 0 : it->second.size();
}

std::vector<std::size_t> Dataset::label_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(spec_.num_classes()), 0);
  for (const auto& e : examples_) ++counts.at(static_cast<std::size_t>(e.label));
  return counts;
}

// --- Generation ------------------------------------------------------------

Latent sample_latent(const TaskSpec& spec, Rng& rng) {
  const double b = spec.bias_strength;
  Latent latent;
  switch (spec.task_id) {
  case TaskId::A: {
    latent.identical = std::bernoulli_distribution(0.5)(rng);
    latent.feature = std::bernoulli_distribution(latent.identical ? b : 1.0 - b)(rng);
    break;
  }
  case TaskId::B:
    latent.feature = std::bernoulli_distribution(0.5)(rng);
    latent.identical = std::bernoulli_distribution(1.0 - b)(rng);
    break;
  case TaskId::C:
    latent.feature = std::bernoulli_distribution(0.5)(rng);
    latent.identical = std::bernoulli_distribution(spec.identical_prob)(rng);
    break;
  }
  return latent;
}

Example realize_example(const TaskSpec& spec, Latent latent, Rng& rng) {
  const FeatureHandle feature(spec);
  Example e;
  e.tokens.resize(static_cast<std::size_t>(spec.seq_len));
  e.tokens[0] = feature.draw_background(rng);
  e.tokens[1] = latent.identical ? e.tokens[0] : feature.draw_background(rng, e.tokens[0]);
  for (std::size_t i = FeatureHandle::window_begin(); i < e.tokens.size(); ++i)
    e.tokens[i] = feature.draw_background(rng);
  if (latent.feature) {
    std::uniform_int_distribution<std::size_t> pos(FeatureHandle::window_begin(), e.tokens.size() - 1);
    e.tokens[pos(rng)] = spec.reserved_token;
  }
  refresh(spec, e);
  return e;
}

Dataset sample_dataset(const TaskSpec& spec, std::size_t n, Split split) {
  spec.validate();
  if (n < 1) throw ArgumentError("sample_dataset needs n >= 1");
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed & 0xffffffffu),
                    static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(split)};
  Rng rng(seq);
  std::vector<Example> examples;
  examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) examples.push_back(realize_example(spec, sample_latent(spec, rng), rng));
  return Dataset(spec, std::move(examples), split);
}

// --- Bias controls ---------------------------------------------------------

namespace {

bool feature_is_causal(TaskId task) {
  for (bool i : {false, true})
    if (label_fn(task, i, false) != label_fn(task, i, true)) return true;
  return false;
}

std::vector<std::size_t> take_sorted(std::vector<std::vector<std::size_t>>& pools, std::size_t each,
                                     Rng& rng) {
  std::vector<std::size_t> chosen;
  for (auto& pool : pools) {
    std::shuffle(pool.begin(), pool.end(), rng);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(each));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

Dataset select(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(dataset[i]);
  return Dataset(dataset.spec(), std::move(out), dataset.split());
}

} // namespace

Dataset inject_marker_bias(const Dataset& dataset, const FeatureHandle& feature, double prevalence,
                           double strength, int target_label, Rng& rng) {
  if (!(prevalence >= 0.0 && prevalence <= 1.0) || !(strength >= 0.0 && strength <= 1.0))
    throw ArgumentError("prevalence and strength must lie in [0, 1]");
  if (target_label < 0 || target_label >= dataset.spec().num_classes())
    throw ArgumentError("target_label out of range");
  if (feature_is_causal(dataset.spec().task_id))
    throw ConfigError("marker injection needs a feature without causal effect on the label (task A)");
  for (const auto& e : dataset.examples())
    if (feature.detect(e)) throw PreconditionError("marker token already present in the dataset");
  if (prevalence == 0.0) return dataset;

  const std::size_t n = dataset.size();
  const auto marked = static_cast<std::size_t>(std::lround(prevalence * double(n)));
  const auto on_target = static_cast<std::size_t>(std::lround(strength * double(marked)));
  const std::size_t off_target = marked - on_target;

  std::vector<std::size_t> target, other;
  for (std::size_t i = 0; i < n; ++i) (dataset[i].label == target_label ? target : other).push_back(i);

  if (target.size() < on_target || other.size() < off_target) {
    double max_marked = double(n);
    if (strength > 0.0) max_marked = std::min(max_marked, double(target.size()) / strength);
    if (strength < 1.0) max_marked = std::min(max_marked, double(other.size()) / (1.0 - strength));
    const double achievable = max_marked / double(n);
    std::ostringstream os;
    os << "marker bias infeasible: need " << on_target << " examples of label " << target_label
       << " and " << off_target << " others, have " << target.size() << " and " << other.size()
       << "; achievable prevalence at this strength is " << achievable;
    throw InfeasibleError(os.str(), achievable);
  }

  std::shuffle(target.begin(), target.end(), rng);
  std::shuffle(other.begin(), other.end(), rng);
  std::vector<Example> examples(dataset.examples().begin(), dataset.examples().end());
  auto mark = [&](std::size_t i) {
    examples[i].tokens.back() = feature.token();
    refresh(dataset.spec(), examples[i]);
  };
  for (std::size_t k = 0; k < on_target; ++k) mark(target[k]);
  for (std::size_t k = 0; k < off_target; ++k) mark(other[k]);
  return Dataset(dataset.spec(), std::move(examples), dataset.split());
}

Dataset remove_feature(const Dataset& dataset, const FeatureHandle& feature, Rng& rng) {
  std::vector<Example> examples;
  examples.reserve(dataset.size());
  for (const auto& e : dataset.examples()) examples.push_back(feature.do_absent(e, rng));
  return Dataset(dataset.spec(), std::move(examples), dataset.split());
}

Dataset subsample_balanced(const Dataset& dataset, const FeatureHandle& feature, Rng& rng) {
  if (!dataset.annotated())
    throw ConfigError("dataset lacks '" + feature.name() + "' annotations");
  std::vector<std::vector<std::size_t>> pools;
  std::size_t smallest = dataset.size();
  for (int f : {0, 1}) {
    for (int y = 0; y < dataset.spec().num_classes(); ++y) {
      const Group g{f, y};
      auto it = dataset.group_index().find(g);
      if (it == dataset.group_index().end() || it->second.empty())
        throw BalanceError("cannot balance: group (" + to_string(g) + ") is empty");
      pools.push_back(it->second);
      smallest = std::min(smallest, it->second.size());
    }
  }
  return select(dataset, take_sorted(pools, smallest, rng));
}

Dataset balance_labels(const Dataset& dataset, Rng& rng) {
  const int k = dataset.spec().num_classes();
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < dataset.size(); ++i) pools[static_cast<std::size_t>(dataset[i].label)].push_back(i);
  std::size_t smallest = dataset.size();
  for (int y = 0; y < k; ++y) {
    if (pools[static_cast<std::size_t>(y)].empty())
      throw InfeasibleError("cannot balance labels: label " + std::to_string(y) + " is absent", 0.0);
    smallest = std::min(smallest, pools[static_cast<std::size_t>(y)].size());
  }
  return select(dataset, take_sorted(pools, smallest, rng));
}

FeatureSplit group_split(const Dataset& dataset, const FeatureHandle& feature) {
  std::array<std::vector<std::size_t>, 2> members;
  for (std::size_t i = 0; i < dataset.size(); ++i) members[static_cast<std::size_t>(feature.detect(dataset[i]))].push_back(i);
  FeatureSplit split;
  for (std::size_t f = 0; f < 2; ++f) {
    split.by_value[f] = select(dataset, members[f]);
    split.label_counts[f] = split.by_value[f].label_counts();
  }
  split.single_group = members[0].empty() || members[1].empty();
  return split;
}

} // namespace pnpslab
