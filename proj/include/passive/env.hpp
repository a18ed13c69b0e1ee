#pragma once

// Two-phase intervention episodes over a sampled causal DAG: an exploration
// phase of unrewarded experiments followed by a goal-cued exploitation phase.

#include <optional>
#include <vector>

#include "passive/rng.hpp"
#include "passive/scm.hpp"

namespace passive {

struct EpisodeConfig {
  int exploration_steps = 0;  // 0 resolves to the number of relevant variables
  int exploitation_steps = 1;

  int resolved_exploration(const CausalDag& dag) const;
  int resolved_exploration(const DagConfig& dag) const;
  void validate() const;
  bool operator==(const EpisodeConfig&) const = default;
};

struct Observation {
  std::vector<double> prev_values;
  std::vector<double> prev_intervention;
  std::vector<double> post_values;
  std::vector<double> init_values;
  std::vector<double> goal_cue;
  std::vector<double> relevance_cue;  // empty outside adaptive mode

  int size() const { return static_cast<int>(prev_values.size()); }
  /// Goal index from the cue, or -1 before the goal is presented.
  int goal() const;
  /// The intervention echoed in prev_intervention, if any.
  std::optional<Intervention> last_intervention() const;
  bool operator==(const Observation&) const = default;
};

/// Flat network input: the observation fields concatenated in declaration order.
std::vector<double> features(const Observation& obs);
int feature_width(int n, bool adaptive);

/// Index in [0, 2n): node = index / 2, positive sign when even.
struct Action {
  int index = 0;

  int node() const { return index / 2; }
  bool positive() const { return index % 2 == 0; }
  Intervention intervention(double magnitude) const {
    return {node(), positive() ? magnitude : -magnitude};
  }
  static Action from(int node, bool positive) { return {2 * node + (positive ? 0 : 1)}; }
  static Action from(const Intervention& iv) { return from(iv.node, iv.value >= 0.0); }
  bool operator==(const Action&) const = default;
};

enum class Phase { Explore, Exploit };

struct StepResult {
  Observation observation;
  double reward = 0.0;
  Phase phase = Phase::Explore;
  bool done = false;
};

class Environment {
 public:
  explicit Environment(EpisodeConfig config, NoiseMode noise = NoiseMode::Sampled)
      : config_(config), noise_(noise) {}

  /// Starts an episode; throws DataError for an invalid (or, in adaptive mode, irrelevant) goal.
  Observation reset(const CausalDag& dag, int goal, Rng rng);
  /// Throws std::logic_error when the episode is already done.
  StepResult step(Action action);

  bool done() const { return t_ >= total_steps(); }
  int steps_taken() const { return t_; }
  int total_steps() const { return exploration_ + config_.exploitation_steps; }
  int exploration_steps() const { return exploration_; }
  Phase phase() const { return t_ < exploration_ ? Phase::Explore : Phase::Exploit; }
  /// Exploration-phase intervention count per node.
  const std::vector<int>& exploration_counts() const { return explore_counts_; }
  /// Exploration interventions on irrelevant nodes.
  int violations() const { return violations_; }
  /// Each relevant node intervened on exactly once during exploration and no irrelevant one.
  bool exploration_correct() const;
  const CausalDag& dag() const { return dag_; }
  int goal() const { return goal_; }

 private:
  Observation make_observation(std::vector<double> prev, std::vector<double> intervention,
                               std::vector<double> post, bool goal_visible);

  EpisodeConfig config_;
  NoiseMode noise_;
  CausalDag dag_;
  int goal_ = 0;
  int exploration_ = 0;
  int t_ = 0;
  Rng rng_;
  std::vector<double> init_values_;
  std::vector<int> explore_counts_;
  int violations_ = 0;
};

/// exploitation_steps x noise-free goal value under the optimal intervention.
double optimal_episode_reward(const CausalDag& dag, int goal, const EpisodeConfig& config);

}  // namespace passive
