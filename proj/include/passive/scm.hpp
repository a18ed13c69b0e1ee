#pragma once

// Structural causal models over a small set of real-valued variables:
// constrained DAG sampling, do-intervention propagation and the
// optimal-intervention oracle used by the expert.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "passive/rng.hpp"

namespace passive {

struct DagConfig {
  int n = 5;
  std::optional<int> num_relevant;  // adaptive mode when set
  bool nonlinear = true;
  double leak = 0.2;
  double weight_low = -2.0;
  double weight_high = 2.0;
  double noise_mean = 0.5;
  double noise_std = 0.25;
  double intervention_magnitude = 4.0;

  bool adaptive() const { return num_relevant.has_value(); }
  /// Throws ConfigError on invalid fields.
  void validate() const;
  bool operator==(const DagConfig&) const = default;
};

struct Intervention {
  int node = 0;
  double value = 0.0;
  bool operator==(const Intervention&) const = default;
};

struct CausalDag {
  std::vector<int> order;                  // topological order, a permutation of 0..n-1
  std::vector<std::vector<int>> parents;   // parents[child]
  std::vector<std::vector<double>> weights;  // aligned with parents[child]
  std::vector<double> noise_var;
  std::vector<bool> relevant;

  // Propagation parameters carried along so a serialized DAG is self-contained.
  bool nonlinear = true;
  double leak = 0.2;
  double magnitude = 4.0;
  bool adaptive = false;  // observations carry a relevance cue

  int size() const { return static_cast<int>(order.size()); }
  std::uint64_t relevance_mask() const;
  std::vector<int> relevant_nodes() const;
  double activate(double x) const { return (nonlinear && x < 0.0) ? leak * x : x; }

  /// Checks the structural invariants; throws DataError describing the first violation.
  void validate() const;
  bool operator==(const CausalDag&) const = default;
};

enum class ConstraintKind { TrainStandard, EvalTarget, EvalPath, AdaptiveTrain, AdaptiveEval, Unconstrained };

std::string to_string(ConstraintKind kind);
/// Accepts both the CamelCase name and the snake_case condition name ("eval_target").
ConstraintKind constraint_kind_from_string(const std::string& name);
std::string condition_name(ConstraintKind kind);

struct ConstraintSpec {
  ConstraintKind kind = ConstraintKind::Unconstrained;
  int test_intervention_node = 3;  // D
  int test_goal_node = 4;          // E
  std::set<std::uint64_t> heldout_subsets;  // relevance masks (bit i = node i)

  bool is_eval() const {
    return kind == ConstraintKind::EvalTarget || kind == ConstraintKind::EvalPath;
  }
  void validate(const DagConfig& config) const;
  bool operator==(const ConstraintSpec&) const = default;
};

/// Default test nodes for n variables: D = n-2, E = n-1 (D and E for n = 5).
ConstraintSpec make_constraint(ConstraintKind kind, int n);

enum class NoiseMode { Sampled, Zero };

constexpr int kMaxSampleAttempts = 10000;

/// Draws a DAG satisfying `constraint`; throws ConstraintError after kMaxSampleAttempts rejections.
CausalDag sample_dag(const DagConfig& config, const ConstraintSpec& constraint, Rng& rng);

/// Values after applying `interventions`. `rng` is only consulted when mode is Sampled.
std::vector<double> propagate(const CausalDag& dag, std::span<const Intervention> interventions,
                              NoiseMode mode, Rng* rng = nullptr);
std::vector<double> propagate(const CausalDag& dag, const std::optional<Intervention>& intervention,
                              NoiseMode mode, Rng* rng = nullptr);

/// True iff a directed path a -> ... -> b exists. Irreflexive.
bool is_ancestor(const CausalDag& dag, int a, int b);
/// Nodes reachable from `node` (excluding itself).
std::vector<bool> descendants(const CausalDag& dag, int node);

/// argmax over do(X_i = +-magnitude) for relevant i of the noise-free goal value.
/// Ties: lowest node index, then positive sign.
Intervention optimal_intervention(const CausalDag& dag, int goal);

/// Whether `dag` satisfies `constraint` (structure and, for eval kinds, the oracle check).
bool satisfies(const CausalDag& dag, const ConstraintSpec& constraint);

}  // namespace passive
