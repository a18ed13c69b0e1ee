#pragma once

// Run configuration (sectioned key = value files with typed fields) and the
// gen / train / eval / ooo / analyze commands built on it.

#include <cstdint>
#include <exception>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "passive/bc.hpp"
#include "passive/dataset.hpp"
#include "passive/eval.hpp"
#include "passive/ooo.hpp"

namespace passive::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigFailure = 2, kDataFailure = 3, kNumericFailure = 4, kTransportFailure = 5 };

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

/// Parsed file: section -> key -> raw value, in file order of first appearance.
using RawConfig = std::map<std::string, std::map<std::string, std::string>>;

/// `[section]` headers, `key = value` lines, `#` or `;` comments. ConfigError names the line.
RawConfig parse_ini(const std::string& text);

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  std::string out = "run";
  int jobs = 1;

  // [dag], [episode], [constraint]
  DagConfig dag;
  EpisodeConfig episode;
  ConstraintKind constraint = ConstraintKind::TrainStandard;
  int test_intervention_node = -1;  // -1 resolves to n - 2
  int test_goal_node = -1;          // -1 resolves to n - 1
  double heldout_fraction = 0.2;    // share of relevance masks held out in adaptive mode
  std::uint64_t heldout_seed = 0;

  // [gen]
  std::int64_t episodes = 1000;

  // [net], [train]
  NetConfig net;
  TrainConfig train;
  std::string dataset;              // empty trains on the unbounded expert stream
  std::string resume;               // checkpoint to continue from
  std::int64_t train_eval_episodes = 200;

  // [eval]
  std::vector<std::string> policies = {"expert"};
  std::string checkpoint;           // evaluates a trained policy when set
  std::vector<std::string> conditions = {"train", "eval_target", "eval_path"};
  std::int64_t eval_episodes = 1000;
  NoiseMode noise = NoiseMode::Sampled;

  // [ooo]
  ooo::ExperimentConfig ooo;
  bool oracle = false;

  // [analyze]
  std::vector<std::string> inputs;

  /// Fills the derived fields (test nodes, held-out masks, network shape) and validates.
  void resolve();
  ConstraintSpec constraint_spec() const;
  DatasetManifest manifest() const;
  std::vector<EvalCondition> eval_conditions() const;
};

/// Applies one `section.key = value`; ConfigError names the field on unknown keys or bad values.
void set_field(RunConfig& config, const std::string& section, const std::string& key, const std::string& value);
/// `section.key=value` as given on the command line.
void apply_override(RunConfig& config, const std::string& assignment);
RunConfig config_from_raw(const RawConfig& raw);
RunConfig load_config(const std::string& path);
/// Every field, in schema order; parsing the result reproduces the config.
std::string render_config(const RunConfig& config);

/// Honors PASSIVE_DETERMINISTIC=1 by forcing a single worker.
int effective_jobs(int requested);

// Commands. Each writes resolved.ini into config.out next to its outputs.
GenerationSummary cmd_gen(RunConfig config, std::ostream& log);
std::vector<MetricRow> cmd_train(RunConfig config, std::ostream& log);
std::vector<EvalReport> cmd_eval(RunConfig config, std::ostream& log);
ooo::ExperimentResult cmd_ooo(RunConfig config, std::ostream& log);
ComparisonTable cmd_analyze(RunConfig config, std::ostream& log);

/// Reads condition,metric,value,ci_half_width,n_episodes rows back into reports.
std::vector<ConditionReport> read_report_csv(const std::string& path);

}  // namespace passive::cli
