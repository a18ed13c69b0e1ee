#include "doctest.h"
#include "helpers.hpp"
#include "passive/error.hpp"
#include "passive/scm.hpp"

using namespace passive;
using passive::testing::make_dag;

TEST_CASE("propagate: hand-computed values") {
  SUBCASE("isolated node, zero noise is 0") {
    auto dag = make_dag(2, {});
    auto v = propagate(dag, std::nullopt, NoiseMode::Zero);
    CHECK(v[0] == 0.0);
    CHECK(v[1] == 0.0);
  }
  SUBCASE("positive branch is identity") {
    auto dag = make_dag(2, {{0, 1, 0.5}});
    auto v = propagate(dag, Intervention{0, 4.0}, NoiseMode::Zero);
    CHECK(v[1] == doctest::Approx(2.0));
  }
  SUBCASE("negative branch is leaked") {
    auto dag = make_dag(2, {{0, 1, 1.0}});
    auto v = propagate(dag, Intervention{0, -4.0}, NoiseMode::Zero);
    CHECK(v[1] == doctest::Approx(-0.8));
  }
  SUBCASE("linear mode passes negatives through") {
    auto dag = make_dag(2, {{0, 1, 1.0}}, {}, false);
    CHECK(propagate(dag, Intervention{0, -4.0}, NoiseMode::Zero)[1] == doctest::Approx(-4.0));
  }
}

TEST_CASE("propagate: clamping bypasses noise and nonlinearity") {
  auto dag = make_dag(3, {{0, 1, 2.0}, {1, 2, -1.5}});
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int node = trial % 3;
    const double value = (trial % 2 ? -4.0 : 4.0) * (1 + trial % 5);
    auto v = propagate(dag, Intervention{node, value}, NoiseMode::Sampled, &rng);
    CHECK(v[node] == value);
  }
}

TEST_CASE("propagate: sampled noise is reproducible from the seed") {
  auto dag = make_dag(3, {{0, 1, 2.0}, {1, 2, -1.5}});
  Rng a(99), b(99);
  CHECK(propagate(dag, std::nullopt, NoiseMode::Sampled, &a) ==
        propagate(dag, std::nullopt, NoiseMode::Sampled, &b));
}

TEST_CASE("is_ancestor on a chain") {
  auto dag = make_dag(3, {{0, 1, 1.0}, {1, 2, 1.0}});
  CHECK(is_ancestor(dag, 0, 2));
  CHECK_FALSE(is_ancestor(dag, 2, 0));
  for (int x = 0; x < 3; ++x) CHECK_FALSE(is_ancestor(dag, x, x));
}

TEST_CASE("optimal_intervention: enumerated examples") {
  SUBCASE("positive edge") {
    // do(A=+4) -> B=8; do(A=-4) -> B=-1.6; do(B=+4) -> 4; do(B=-4) -> -4
    auto dag = make_dag(2, {{0, 1, 2.0}});
    CHECK(optimal_intervention(dag, 1) == Intervention{0, 4.0});
  }
  SUBCASE("negative edge") {
    // do(A=+4) -> B=-1.6; do(A=-4) -> B=8
    auto dag = make_dag(2, {{0, 1, -2.0}});
    CHECK(optimal_intervention(dag, 1) == Intervention{0, -4.0});
  }
  SUBCASE("goal without ancestors") {
    auto dag = make_dag(3, {{0, 1, 1.0}});
    CHECK(optimal_intervention(dag, 2) == Intervention{2, 4.0});
  }
  SUBCASE("tie resolves to lowest index, then positive sign") {
    // do(A=+4) and do(B=+4) both give C=4; A wins.
    auto dag = make_dag(3, {{0, 2, 1.0}, {1, 2, 1.0}});
    CHECK(optimal_intervention(dag, 2) == Intervention{0, 4.0});
  }
  SUBCASE("irrelevant nodes are never chosen") {
    auto dag = make_dag(3, {{0, 2, 1.5}});
    dag.relevant = {false, true, true};
    dag.parents[2].clear();
    dag.weights[2].clear();
    CHECK(optimal_intervention(dag, 2) == Intervention{2, 4.0});
  }
}

TEST_CASE("sample_dag: forced two-node structure") {
  // With n=2 and an EvalTarget constraint D=0,E=1 the only admissible graph is 0 -> 1.
  DagConfig config;
  config.n = 2;
  ConstraintSpec c = make_constraint(ConstraintKind::EvalTarget, 2);
  Rng rng(3);
  auto dag = sample_dag(config, c, rng);
  CHECK(dag.order == std::vector<int>{0, 1});
  CHECK(dag.parents[1] == std::vector<int>{0});
  CHECK(dag.parents[0].empty());
}

TEST_CASE("sample_dag: structural invariants hold across constraints") {
  DagConfig config;
  Rng rng(11);
  for (auto kind : {ConstraintKind::Unconstrained, ConstraintKind::TrainStandard, ConstraintKind::EvalTarget,
                    ConstraintKind::EvalPath}) {
    auto c = make_constraint(kind, config.n);
    for (int trial = 0; trial < 300; ++trial) {
      auto dag = sample_dag(config, c, rng);
      CHECK_NOTHROW(dag.validate());
      for (int i = 0; i < dag.size(); ++i) {
        for (int j = 0; j < dag.size(); ++j) {
          CHECK_FALSE((is_ancestor(dag, i, j) && is_ancestor(dag, j, i)));
        }
      }
      // The first node in the order is always independent; others have 1-2 parents.
      CHECK(dag.parents[dag.order.front()].empty());
      CHECK(satisfies(dag, c));
    }
  }
}

TEST_CASE("sample_dag: train and eval constraints") {
  DagConfig config;
  Rng rng(5);
  const int d = 3, e = 4;
  auto train = make_constraint(ConstraintKind::TrainStandard, 5);
  auto target = make_constraint(ConstraintKind::EvalTarget, 5);
  auto path = make_constraint(ConstraintKind::EvalPath, 5);
  for (int trial = 0; trial < 500; ++trial) {
    CHECK_FALSE(is_ancestor(sample_dag(config, train, rng), d, e));
    auto t = sample_dag(config, target, rng);
    CHECK(is_ancestor(t, d, e));
    CHECK(t.order.back() == e);
    CHECK(optimal_intervention(t, e).node == d);
    auto p = sample_dag(config, path, rng);
    const int best = optimal_intervention(p, e).node;
    CHECK((best == d || is_ancestor(p, best, d)));
  }
}

TEST_CASE("sample_dag: adaptive masks") {
  DagConfig config;
  config.n = 10;
  config.num_relevant = 5;
  Rng rng(21);
  ConstraintSpec eval = make_constraint(ConstraintKind::AdaptiveEval, 10);
  eval.heldout_subsets = {0b0101010101, 0b1111100000};
  ConstraintSpec train = make_constraint(ConstraintKind::AdaptiveTrain, 10);
  train.heldout_subsets = eval.heldout_subsets;
  for (int trial = 0; trial < 300; ++trial) {
    auto dag = sample_dag(config, eval, rng);
    CHECK(eval.heldout_subsets.count(dag.relevance_mask()) == 1);
    CHECK(dag.adaptive);
    for (int v = 0; v < 10; ++v) {
      if (!dag.relevant[v]) CHECK(dag.parents[v].empty());
      for (int p : dag.parents[v]) CHECK(dag.relevant[p]);
    }
    auto tdag = sample_dag(config, train, rng);
    CHECK(train.heldout_subsets.count(tdag.relevance_mask()) == 0);
    CHECK(tdag.relevant_nodes().size() == 5);
  }
}

TEST_CASE("sample_dag: unsatisfiable constraints report the attempt count") {
  // Every 2-of-4 mask is held out, so AdaptiveTrain can never succeed.
  Rng rng(1);
  DagConfig adaptive;
  adaptive.n = 4;
  adaptive.num_relevant = 2;
  ConstraintSpec eval = make_constraint(ConstraintKind::AdaptiveEval, 4);
  eval.heldout_subsets = {0b0011};
  ConstraintSpec train = make_constraint(ConstraintKind::AdaptiveTrain, 4);
  for (std::uint64_t m : {0b0011, 0b0101, 0b0110, 0b1001, 0b1010, 0b1100}) train.heldout_subsets.insert(m);
  try {
    sample_dag(adaptive, train, rng);
    FAIL("expected ConstraintError");
  } catch (const ConstraintError& err) {
    CHECK(err.attempts() == kMaxSampleAttempts);
  }
  CHECK_NOTHROW(sample_dag(adaptive, eval, rng));
}

TEST_CASE("config validation") {
  DagConfig bad;
  bad.n = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  DagConfig weights;
  weights.weight_low = 2;
  weights.weight_high = -2;
  CHECK_THROWS_AS(weights.validate(), ConfigError);
  auto c = make_constraint(ConstraintKind::TrainStandard, 5);
  c.test_goal_node = c.test_intervention_node;
  CHECK_THROWS_AS(c.validate(DagConfig{}), ConfigError);
  CHECK(constraint_kind_from_string("eval_target") == ConstraintKind::EvalTarget);
  CHECK(constraint_kind_from_string("EvalPath") == ConstraintKind::EvalPath);
  CHECK_THROWS_AS(constraint_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("property: oracle agrees with the reference enumeration") {
  Rng rng(2024);
  for (bool nonlinear : {true, false}) {
    DagConfig config;
    config.nonlinear = nonlinear;
    for (int trial = 0; trial < 500; ++trial) {
      config.n = 2 + trial % 6;
      auto dag = sample_dag(config, make_constraint(ConstraintKind::Unconstrained, config.n), rng);
      const int goal = trial % config.n;
      CHECK(optimal_intervention(dag, goal) == passive::testing::reference_oracle(dag, goal));
      for (int v = 0; v < config.n; ++v) {
        const Intervention iv{trial % config.n, 4.0};
        CHECK(propagate(dag, iv, NoiseMode::Zero)[v] ==
              doctest::Approx(passive::testing::reference_value(dag, v, iv)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("property: linear mode superposition") {
  DagConfig config;
  config.nonlinear = false;
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    auto dag = sample_dag(config, ConstraintSpec{}, rng);
    const int node = trial % 5;
    const double alpha = 0.25 + (trial % 7);
    auto base = propagate(dag, Intervention{node, 4.0}, NoiseMode::Zero);
    auto scaled = propagate(dag, Intervention{node, 4.0 * alpha}, NoiseMode::Zero);
    for (int v = 0; v < 5; ++v) CHECK(scaled[v] == doctest::Approx(alpha * base[v]).epsilon(1e-12));
  }
}
