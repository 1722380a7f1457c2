#include "pnpslab/errors.hpp"
#include "pnpslab/oracle.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <optional>

using namespace pnpslab;

namespace {

// Brute-force oracle on a tiny spec (V = 4, L = 4, reserved = 2): enumerate
// every token sequence the generator can emit, weight it by its generative
// probability, and apply the do-operators by enumerating their replacement
// draws. Written without the library's latent bookkeeping.
struct Brute {
  TaskSpec spec;

  static int label(TaskId task, bool i, bool f) {
    if (task == TaskId::A) return i;
    if (task == TaskId::B) return i ^ f;
    return f ? (i ? 2 : 1) : 0;
  }

  bool has_reserved(const std::vector<Token>& t) const {
    for (std::size_t k = 2; k < t.size(); ++k)
      if (t[k] == spec.reserved_token) return true;
    return false;
  }

  int label_of(const std::vector<Token>& t) const { return label(spec.task_id, t[0] == t[1], has_reserved(t)); }

  // p(I, F) written out from the generative description.
  double latent_p(bool i, bool f) const {
    const double b = spec.bias_strength, q = spec.identical_prob;
    switch (spec.task_id) {
    case TaskId::A: return 0.5 * (f == i ? b : 1 - b);
    case TaskId::B: return 0.5 * (i ? 1 - b : b);
    case TaskId::C: return 0.5 * (i ? q : 1 - q);
    }
    return 0;
  }

  // p(tokens) under the generator.
  double weight(const std::vector<Token>& t) const {
    const double bg = spec.vocab_size - 1; // background pool excludes the reserved token
    const int window = spec.seq_len - 2;
    if (t[0] == spec.reserved_token || t[1] == spec.reserved_token) return 0;
    const bool i = t[0] == t[1];
    int n_res = 0;
    for (int k = 2; k < spec.seq_len; ++k) n_res += t[k] == spec.reserved_token;
    if (n_res > 1) return 0;
    const bool f = n_res == 1;
    double p = latent_p(i, f) / bg * (i ? 1.0 : 1.0 / (bg - 1));
    p *= f ? 1.0 / window * std::pow(1 / bg, window - 1) : std::pow(1 / bg, window);
    return p;
  }

  void for_each_sequence(const std::function<void(const std::vector<Token>&)>& fn) const {
    std::vector<Token> t(spec.seq_len, 0);
    const long total = long(std::pow(spec.vocab_size, spec.seq_len));
    for (long code = 0; code < total; ++code) {
      long c = code;
      for (int k = 0; k < spec.seq_len; ++k, c /= spec.vocab_size) t[k] = Token(c % spec.vocab_size);
      fn(t);
    }
  }

  // Label distribution after removing every reserved token; each removal
  // draws uniformly from V minus {current, reserved}.
  double pn_context(const std::vector<Token>& t) const {
    const int y = label_of(t);
    std::vector<Token> alt;
    for (Token v = 0; v < spec.vocab_size; ++v)
      if (v != spec.reserved_token) alt.push_back(v);
    double changed = 0, total = 0;
    for (Token v : alt) {
      std::vector<Token> u = t;
      for (int k = 2; k < spec.seq_len; ++k)
        if (u[k] == spec.reserved_token) u[k] = v;
      total += 1;
      changed += label_of(u) != y;
    }
    return changed / total;
  }

  // Insert the reserved token at a uniformly chosen window position.
  double ps_context(const std::vector<Token>& t, int target) const {
    double hit = 0, total = 0;
    for (int k = 2; k < spec.seq_len; ++k) {
      std::vector<Token> u = t;
      u[k] = spec.reserved_token;
      total += 1;
      hit += label_of(u) == target;
    }
    return hit / total;
  }

  std::optional<double> pn_marginal(int target) const {
    double num = 0, den = 0;
    for_each_sequence([&](const std::vector<Token>& t) {
      const double w = weight(t);
      if (w == 0 || !has_reserved(t) || label_of(t) != target) return;
      den += w;
      num += w * pn_context(t);
    });
    if (den == 0) return std::nullopt;
    return num / den;
  }

  std::optional<double> ps_marginal(int target) const {
    double num = 0, den = 0;
    for_each_sequence([&](const std::vector<Token>& t) {
      const double w = weight(t);
      if (w == 0 || has_reserved(t) || label_of(t) == target) return;
      den += w;
      num += w * ps_context(t, target);
    });
    if (den == 0) return std::nullopt;
    return num / den;
  }
};

TaskSpec tiny(TaskId task, double b, double q = 0.3) {
  TaskSpec s;
  s.task_id = task;
  s.vocab_size = 4;
  s.seq_len = 4;
  s.reserved_token = 2;
  s.bias_strength = b;
  s.identical_prob = q;
  return s;
}

Example example_with(const TaskSpec& spec, bool i, bool f, std::uint64_t seed = 1) {
  Rng rng(seed);
  return realize_example(spec, Latent{i, f}, rng);
}

} // namespace

TEST_SUITE("oracle") {

TEST_CASE("brute-force weights form a distribution") {
  for (TaskId task : {TaskId::A, TaskId::B, TaskId::C}) {
    Brute brute{tiny(task, 0.8)};
    double total = 0;
    brute.for_each_sequence([&](const std::vector<Token>& t) { total += brute.weight(t); });
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("exact marginals agree with brute-force enumeration") {
  for (TaskId task : {TaskId::A, TaskId::B, TaskId::C})
    for (double b : {0.5, 0.7, 1.0})
      for (double q : {0.0, 0.3, 0.9}) {
        const TaskSpec spec = tiny(task, b, q);
        const FeatureHandle f(spec);
        const Brute brute{spec};
        for (int y = 0; y < spec.num_classes(); ++y) {
          CAPTURE(to_string(task));
          CAPTURE(b);
          CAPTURE(q);
          CAPTURE(y);
          const auto pn = brute.pn_marginal(y);
          if (pn) {
            const auto est = pn_marginal(spec, f, y);
            CHECK(est.value == doctest::Approx(*pn).epsilon(1e-12));
            CHECK(est.std_error == 0.0);
          } else {
            CHECK_THROWS_AS(pn_marginal(spec, f, y), UndefinedEstimateError);
          }
          const auto ps = brute.ps_marginal(y);
          if (ps) {
            CHECK(ps_marginal(spec, f, y).value == doctest::Approx(*ps).epsilon(1e-12));
            CHECK(spuriousness(spec, f, y) == 1.0 - ps_marginal(spec, f, y).value);
          } else {
            CHECK_THROWS_AS(ps_marginal(spec, f, y), UndefinedEstimateError);
          }
        }
      }
}

TEST_CASE("context PN/PS agree with brute-force do-operators") {
  for (TaskId task : {TaskId::A, TaskId::B, TaskId::C}) {
    const TaskSpec spec = tiny(task, 0.7);
    const FeatureHandle f(spec);
    const Brute brute{spec};
    brute.for_each_sequence([&](const std::vector<Token>& t) {
      if (brute.weight(t) == 0) return;
      Example e;
      e.tokens = t;
      refresh(spec, e);
      REQUIRE(e.label == brute.label_of(t));
      if (brute.has_reserved(t)) {
        CHECK(pn_context(spec, e, f).value == brute.pn_context(t));
      } else {
        for (int y = 0; y < spec.num_classes(); ++y)
          if (y != e.label) CHECK(ps_context(spec, e, f, y).value == brute.ps_context(t, y));
      }
    });
  }
}

TEST_CASE("headline oracle values at default sizes") {
  for (double b : {0.5, 0.9}) {
    TaskSpec a;
    a.bias_strength = b;
    const FeatureHandle fa(a);
    TaskSpec bb = a;
    bb.task_id = TaskId::B;
    const FeatureHandle fb(bb);
    for (int y = 0; y < 2; ++y) {
      CHECK(pn_marginal(a, fa, y).value == 0.0);
      CHECK(ps_marginal(a, fa, y).value == 0.0);
      CHECK(spuriousness(a, fa, y) == 1.0);
      CHECK(pn_marginal(bb, fb, y).value == 1.0);
      CHECK(ps_marginal(bb, fb, y).value == 1.0);
      CHECK(spuriousness(bb, fb, y) == 0.0);
    }
  }
  TaskSpec c;
  c.task_id = TaskId::C;
  const FeatureHandle fc(c);
  CHECK(pn_marginal(c, fc, 2).value == 1.0);
  CHECK(pn_marginal(c, fc, 1).value == 1.0);
  CHECK(ps_marginal(c, fc, 2).value == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(spuriousness(c, fc, 2) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(categorize(pn_marginal(c, fc, 2).value, ps_marginal(c, fc, 2).value) == Category::NecessaryNotSufficient);
}

TEST_CASE("counterfactual label examples") {
  TaskSpec b;
  b.task_id = TaskId::B;
  const FeatureHandle fb(b);
  const Example e = example_with(b, true, true);
  REQUIRE(e.label == 0);
  const auto dist = counterfactual_label(b, e, Intervention::force_absent(fb));
  CHECK(dist.size() == 2);
  CHECK(dist(1) == 1.0);

  TaskSpec a;
  const FeatureHandle fa(a);
  for (bool i : {false, true})
    for (bool f : {false, true}) {
      const Example x = example_with(a, i, f);
      CHECK(counterfactual_label(a, x, Intervention::force_absent(fa))(x.label) == 1.0);
      CHECK(counterfactual_label(a, x, Intervention::force_present(fa))(x.label) == 1.0);
    }

  TaskSpec c;
  c.task_id = TaskId::C;
  const FeatureHandle fc(c);
  const Example y1 = example_with(c, false, true);
  REQUIRE(y1.label == 1);
  CHECK(counterfactual_label(c, y1, Intervention::force_absent(fc))(0) == 1.0);

  // Replacing the only reserved occurrence removes the feature; any other
  // window position leaves the label alone.
  std::size_t at = 0;
  for (std::size_t k = 2; k < y1.tokens.size(); ++k)
    if (y1.tokens[k] == c.reserved_token) at = k;
  REQUIRE(at >= 2);
  CHECK(counterfactual_label(c, y1, Intervention::replace_token(fc, at))(0) == 1.0);
  const std::size_t other = at == 2 ? 3 : 2;
  CHECK(counterfactual_label(c, y1, Intervention::replace_token(fc, other))(1) == 1.0);
  CHECK_THROWS_AS(counterfactual_label(c, y1, Intervention::replace_token(fc, 0)), ArgumentError);
  CHECK_THROWS_AS(counterfactual_label(c, y1, Intervention::replace_token(fc, 10)), ArgumentError);
}

TEST_CASE("sampled counterfactual labels follow the exact distribution") {
  TaskSpec c;
  c.task_id = TaskId::C;
  const FeatureHandle fc(c);
  Rng rng(8);
  for (bool i : {false, true})
    for (bool f : {false, true}) {
      const Example e = example_with(c, i, f);
      for (auto iv : {Intervention::force_absent(fc), Intervention::force_present(fc)}) {
        const auto dist = counterfactual_label(c, e, iv);
        CHECK(dist.sum() == doctest::Approx(1.0));
        for (int k = 0; k < 20; ++k) CHECK(dist(sample_counterfactual_label(c, e, iv, rng)) == 1.0);
      }
    }
}

TEST_CASE("context preconditions") {
  TaskSpec c;
  c.task_id = TaskId::C;
  const FeatureHandle fc(c);
  const Example absent = example_with(c, true, false);
  const Example present = example_with(c, true, true);
  CHECK_THROWS_AS(pn_context(c, absent, fc), PreconditionError);
  CHECK_THROWS_AS(ps_context(c, present, fc, 1), PreconditionError);
  CHECK_THROWS_AS(ps_context(c, absent, fc, 0), PreconditionError);

  CHECK(pn_context(c, present, fc).value == 1.0);
  CHECK(ps_context(c, absent, fc, 2).value == 1.0);
  CHECK(ps_context(c, example_with(c, false, false), fc, 2).value == 0.0);
  TaskSpec a;
  const FeatureHandle fa(a);
  const Example ea = example_with(a, true, false);
  CHECK(ps_context(a, ea, fa, 0).value == 0.0);
  CHECK(pn_context(a, example_with(a, false, true), fa).value == 0.0);
  TaskSpec b;
  b.task_id = TaskId::B;
  CHECK(pn_context(b, example_with(b, false, true), FeatureHandle(b)).value == 1.0);
}

TEST_CASE("context estimates ignore permutations of non-feature window positions") {
  TaskSpec c;
  c.task_id = TaskId::C;
  const FeatureHandle fc(c);
  Rng rng(12);
  const Dataset d = sample_dataset(c, 200, Split::Train);
  for (const auto& e : d.examples()) {
    Example p = e;
    std::shuffle(p.tokens.begin() + 2, p.tokens.end(), rng);
    refresh(c, p);
    if (fc.detect(e) == 1) {
      CHECK(pn_context(c, p, fc).value == pn_context(c, e, fc).value);
    } else {
      for (int y = 0; y < 3; ++y)
        if (y != e.label) CHECK(ps_context(c, p, fc, y).value == ps_context(c, e, fc, y).value);
    }
  }
}

TEST_CASE("Monte-Carlo marginals within 4 standard errors over 20 seeds") {
  for (TaskId task : {TaskId::A, TaskId::B, TaskId::C}) {
    TaskSpec spec;
    spec.task_id = task;
    spec.bias_strength = 0.8;
    const FeatureHandle f(spec);
    for (int y = 0; y < spec.num_classes(); ++y)
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const MarginalOptions mc{EstimateMethod::MonteCarlo, 10000, seed};
        for (bool pn : {true, false}) {
          auto run = [&](const MarginalOptions& o) {
            return pn ? pn_marginal(spec, f, y, o) : ps_marginal(spec, f, y, o);
          };
          PnPsEstimate exact;
          try {
            exact = run({});
          } catch (const UndefinedEstimateError&) {
            CHECK_THROWS_AS(run(mc), UndefinedEstimateError);
            continue;
          }
          const auto est = run(mc);
          CHECK(est.method == EstimateMethod::MonteCarlo);
          CHECK(est.n_samples == 10000);
          CHECK(std::abs(est.value - exact.value) <= 4 * est.std_error + 1e-12);
          CHECK(est.value >= 0.0);
          CHECK(est.value <= 1.0);
        }
      }
  }
}

TEST_CASE("exact estimates are bit-identical across calls") {
  TaskSpec spec;
  spec.task_id = TaskId::C;
  spec.identical_prob = 0.37;
  const FeatureHandle f(spec);
  CHECK(ps_marginal(spec, f, 2).value == ps_marginal(spec, f, 2).value);
  CHECK(ps_marginal(spec, f, 1).value == ps_marginal(spec, f, 1).value);
}

TEST_CASE("categorize quadrants") {
  CHECK(categorize(0.0, 0.0) == Category::Irrelevant);
  CHECK(categorize(1.0, 0.3) == Category::NecessaryNotSufficient);
  CHECK(categorize(0.2, 0.9) == Category::SufficientNotNecessary);
  CHECK(categorize(1.0, 1.0) == Category::NecessaryAndSufficient);
  CHECK(categorize(0.5, 0.5) == Category::NecessaryAndSufficient);
  CHECK(categorize(0.5, 0.5, 0.6) == Category::Irrelevant);
}

} // TEST_SUITE
