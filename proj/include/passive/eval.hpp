#pragma once

// Interactive evaluation of a policy on constraint-split environments:
// reward fraction of optimal, exploit-step action agreement with the expert
// and the four baselines, and exploration correctness. CSV and SVG export.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "passive/dataset.hpp"
#include "passive/env.hpp"
#include "passive/policies.hpp"
#include "passive/scm.hpp"

namespace passive {

/// Builds a fresh per-episode policy. Called once per episode, possibly from worker threads.
using PolicyFactory = std::function<std::unique_ptr<Policy>(const EpisodeSpec&)>;

/// "expert", "value", "change", "total_corr", "partial_corr" or "random"; ConfigError otherwise.
PolicyFactory builtin_policy(const std::string& name);
const std::vector<std::string>& builtin_policy_names();
/// Reference policies for action matching, in report order.
const std::vector<std::string>& reference_names();

struct EvalCondition {
  std::string name;
  DagConfig dag;
  EpisodeConfig episode;
  ConstraintSpec constraint;
  NoiseMode noise = NoiseMode::Sampled;

  void validate() const;
};

/// Condition with default test nodes for `kind`, named after it.
EvalCondition make_condition(ConstraintKind kind, const DagConfig& dag = {}, const EpisodeConfig& episode = {});

struct EpisodeOutcome {
  double reward = 0.0;          // summed over exploitation steps
  double optimal_reward = 0.0;  // noise-free optimum over the same steps
  int exploit_steps = 0;
  std::vector<int> matches;     // per reference, exploit steps agreeing with it
  bool exploration_correct = false;
};

/// One episode; references see exactly the observations the evaluated policy saw.
EpisodeOutcome run_eval_episode(const PolicyFactory& policy, const EvalCondition& condition, std::uint64_t seed);

struct MetricValue {
  double value = 0.0;
  double ci_half_width = 0.0;  // 95% normal approximation over episodes
};

/// Mean with a 1.96 * sd / sqrt(N) half width; DataError when empty.
MetricValue mean_interval(const std::vector<double>& xs);

struct ConditionReport {
  std::string condition;
  std::int64_t n_episodes = 0;
  std::vector<std::pair<std::string, MetricValue>> metrics;

  const MetricValue& at(const std::string& metric) const;
  bool has(const std::string& metric) const;
  /// Reward fraction above 1 can only come from noise; callers may want to flag it.
  bool reward_fraction_above_one() const { return has("reward_fraction") && at("reward_fraction").value > 1.0; }
};

struct EvalReport {
  std::string policy;
  std::vector<ConditionReport> conditions;
};

/// Reduces per-episode outcomes (in episode order) into metrics with half-widths.
ConditionReport summarize(const std::string& condition, const std::vector<EpisodeOutcome>& outcomes);

/// n_episodes fresh episodes with seeds derive_seed(seed, i).
ConditionReport rollout_eval(const PolicyFactory& policy, const EvalCondition& condition, std::int64_t n_episodes,
                             std::uint64_t seed, int jobs = 1);
EvalReport rollout_eval(const std::string& policy_name, const PolicyFactory& policy,
                        const std::vector<EvalCondition>& conditions, std::int64_t n_episodes, std::uint64_t seed,
                        int jobs = 1);

struct ComparisonTable {
  std::vector<std::string> conditions;
  std::vector<std::string> metrics;
  std::vector<std::vector<MetricValue>> values;  // [metric][condition]

  /// values[m][c] minus the first condition's value.
  double difference(std::size_t metric, std::size_t condition) const {
    return values[metric][condition].value - values[metric][0].value;
  }
};

/// Aligns reports over their shared metric keys; DataError if the key sets differ.
ComparisonTable compare_conditions(const std::vector<ConditionReport>& reports);
std::string to_csv(const ComparisonTable& table);

/// condition,metric,value,ci_half_width,n_episodes. DataError if there is nothing to write.
std::string to_csv(const std::vector<ConditionReport>& reports);
void write_csv(const std::vector<ConditionReport>& reports, const std::string& path);

/// Grouped bar chart: one group per condition, one bar per metric, with error bars.
std::string render_bar_svg(const std::vector<ConditionReport>& reports, const std::vector<std::string>& metrics,
                           const std::string& title);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};
/// Line chart, e.g. a metric over training steps.
std::string render_line_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                            const std::string& y_label);

void write_text_file(const std::string& path, const std::string& text);

/// Writes <stem>.csv plus reward / actions / exploration SVGs into `dir`.
void export_report(const EvalReport& report, const std::string& dir, const std::string& stem);

}  // namespace passive
