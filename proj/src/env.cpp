#include "passive/env.hpp"

#include <stdexcept>

#include "passive/error.hpp"

namespace passive {

int EpisodeConfig::resolved_exploration(const CausalDag& dag) const {
  if (exploration_steps > 0) return exploration_steps;
  return static_cast<int>(dag.relevant_nodes().size());
}

int EpisodeConfig::resolved_exploration(const DagConfig& dag) const {
  if (exploration_steps > 0) return exploration_steps;
  return dag.num_relevant.value_or(dag.n);
}

void EpisodeConfig::validate() const {
  if (exploration_steps < 0) throw ConfigError("episode.exploration_steps must be >= 1 (0 = auto)");
  if (exploitation_steps < 1) throw ConfigError("episode.exploitation_steps must be >= 1");
}

int Observation::goal() const {
  for (int i = 0; i < static_cast<int>(goal_cue.size()); ++i) {
    if (goal_cue[i] != 0.0) return i;
  }
  return -1;
}

std::optional<Intervention> Observation::last_intervention() const {
  for (int i = 0; i < static_cast<int>(prev_intervention.size()); ++i) {
    if (prev_intervention[i] != 0.0) return Intervention{i, prev_intervention[i]};
  }
  return std::nullopt;
}

std::vector<double> features(const Observation& obs) {
  std::vector<double> out;
  out.reserve(6 * obs.prev_values.size());
  for (const auto* part : {&obs.prev_values, &obs.prev_intervention, &obs.post_values, &obs.init_values,
                           &obs.goal_cue, &obs.relevance_cue}) {
    out.insert(out.end(), part->begin(), part->end());
  }
  return out;
}

int feature_width(int n, bool adaptive) { return (adaptive ? 6 : 5) * n; }

Observation Environment::reset(const CausalDag& dag, int goal, Rng rng) {
  config_.validate();
  if (goal < 0 || goal >= dag.size()) throw DataError("goal index out of range");
  if (!dag.relevant[goal]) throw DataError("goal must be a relevant variable");
  dag_ = dag;
  goal_ = goal;
  rng_ = std::move(rng);
  t_ = 0;
  violations_ = 0;
  exploration_ = config_.resolved_exploration(dag_);
  explore_counts_.assign(dag_.size(), 0);
  const auto zeros = std::vector<double>(dag_.size(), 0.0);
  init_values_ = propagate(dag_, std::nullopt, noise_, &rng_);
  return make_observation(zeros, zeros, zeros, false);
}

Observation Environment::make_observation(std::vector<double> prev, std::vector<double> intervention,
                                          std::vector<double> post, bool goal_visible) {
  const int n = dag_.size();
  Observation obs;
  obs.prev_values = std::move(prev);
  obs.prev_intervention = std::move(intervention);
  obs.post_values = std::move(post);
  obs.init_values = init_values_;
  obs.goal_cue.assign(n, 0.0);
  if (goal_visible) obs.goal_cue[goal_] = 1.0;
  if (dag_.adaptive) {
    obs.relevance_cue.resize(n);
    for (int i = 0; i < n; ++i) obs.relevance_cue[i] = dag_.relevant[i] ? 1.0 : 0.0;
  }
  return obs;
}

StepResult Environment::step(Action action) {
  if (done()) throw std::logic_error("step() called on a finished episode");
  const int n = dag_.size();
  if (action.index < 0 || action.index >= 2 * n) throw std::out_of_range("action index out of range");

  const Phase current = phase();
  const Intervention iv = action.intervention(dag_.magnitude);
  if (current == Phase::Explore) {
    ++explore_counts_[iv.node];
    if (!dag_.relevant[iv.node]) ++violations_;
  }

  std::vector<double> pre = init_values_;
  std::vector<double> post = propagate(dag_, iv, noise_, &rng_);
  std::vector<double> echo(n, 0.0);
  echo[iv.node] = iv.value;
  ++t_;
  init_values_ = propagate(dag_, std::nullopt, noise_, &rng_);

  StepResult result;
  result.phase = current;
  result.reward = current == Phase::Exploit ? post[goal_] : 0.0;
  result.done = done();
  result.observation = make_observation(std::move(pre), std::move(echo), std::move(post), t_ >= exploration_);
  return result;
}

bool Environment::exploration_correct() const {
  for (int i = 0; i < dag_.size(); ++i) {
    if (explore_counts_[i] != (dag_.relevant[i] ? 1 : 0)) return false;
  }
  return true;
}

double optimal_episode_reward(const CausalDag& dag, int goal, const EpisodeConfig& config) {
  const auto best = optimal_intervention(dag, goal);
  return config.exploitation_steps * propagate(dag, best, NoiseMode::Zero)[goal];
}

}  // namespace passive
