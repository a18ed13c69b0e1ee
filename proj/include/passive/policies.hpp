#pragma once

// The expert demonstrator and the heuristic / correlational comparison
// policies. Every policy consumes the observation stream of one episode and
// keeps its own per-episode memory.

#include <memory>
#include <string>
#include <vector>

#include "passive/env.hpp"
#include "passive/rng.hpp"
#include "passive/scm.hpp"

namespace passive {

struct LogEntry {
  Intervention intervention;
  std::vector<double> pre_values;
  std::vector<double> post_values;
  bool exploration = true;  // taken before the goal cue appeared
};

/// Per-episode memory rebuilt from observations: every observation after the
/// first echoes the previous intervention with its before/after values.
class EpisodeLog {
 public:
  void observe(const Observation& obs);
  const std::vector<LogEntry>& entries() const { return entries_; }
  std::vector<LogEntry> exploration_entries() const;
  void clear();

 private:
  std::vector<LogEntry> entries_;
  bool pending_exploration_ = true;
  bool started_ = false;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual Action act(const Observation& obs) = 0;
  virtual std::string name() const = 0;
};

/// Random start among the relevant nodes, then the following relevant nodes in
/// index order (wrapping around), each with a random sign.
class SweepExplorer {
 public:
  explicit SweepExplorer(Rng rng) : rng_(std::move(rng)) {}
  Action next(const Observation& obs);

 private:
  Rng rng_;
  int start_ = -1;
  int step_ = 0;
};

std::vector<int> relevant_from_cue(const Observation& obs);

class ExpertPolicy final : public Policy {
 public:
  ExpertPolicy(CausalDag dag, int goal, Rng rng) : dag_(std::move(dag)), goal_(goal), explorer_(std::move(rng)) {}
  Action act(const Observation& obs) override;
  std::string name() const override { return "expert"; }

 private:
  CausalDag dag_;
  int goal_;
  SweepExplorer explorer_;
};

// Baselines explore like the expert and apply their rule only once the goal
// is cued. They see observations only, never the DAG.
class BaselinePolicy : public Policy {
 public:
  explicit BaselinePolicy(Rng rng) : explorer_(std::move(rng)) {}
  Action act(const Observation& obs) final;
  const EpisodeLog& log() const { return log_; }

 protected:
  virtual Action exploit(const EpisodeLog& log, int goal) const = 0;

 private:
  EpisodeLog log_;
  SweepExplorer explorer_;
};

/// Repeats the exploration intervention that gave the highest goal value.
class ValueBaseline final : public BaselinePolicy {
 public:
  using BaselinePolicy::BaselinePolicy;
  std::string name() const override { return "value"; }
  Action exploit(const EpisodeLog& log, int goal) const override;
};

/// Takes the intervention with the largest |change| in the goal, sign-flipped if the change was negative.
class ChangeBaseline final : public BaselinePolicy {
 public:
  using BaselinePolicy::BaselinePolicy;
  std::string name() const override { return "change"; }
  Action exploit(const EpisodeLog& log, int goal) const override;
};

/// Univariate least-squares slope of the goal on each other node; largest |slope| wins.
class TotalCorrelationBaseline final : public BaselinePolicy {
 public:
  using BaselinePolicy::BaselinePolicy;
  std::string name() const override { return "total_corr"; }
  Action exploit(const EpisodeLog& log, int goal) const override;
};

/// One multivariate regression of the goal on all other nodes; largest |coefficient| wins.
class PartialCorrelationBaseline final : public BaselinePolicy {
 public:
  using BaselinePolicy::BaselinePolicy;
  std::string name() const override { return "partial_corr"; }
  Action exploit(const EpisodeLog& log, int goal) const override;
};

class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(Rng rng) : rng_(std::move(rng)) {}
  Action act(const Observation& obs) override;
  std::string name() const override { return "random"; }

 private:
  Rng rng_;
};

constexpr double kRidgeLambda = 1e-6;

/// Samples for the correlation baselines: pre and post vectors of every exploration entry.
std::vector<std::vector<double>> regression_samples(const std::vector<LogEntry>& entries);
/// Per-node univariate slope of column `goal` on each column (goal's own slot is 0).
std::vector<double> univariate_slopes(const std::vector<std::vector<double>>& samples, int goal);
/// Joint least-squares coefficients (with intercept) of `goal` on all other columns,
/// falling back to ridge regularization when the normal equations are singular.
std::vector<double> multivariate_coefficients(const std::vector<std::vector<double>>& samples, int goal);
/// Node with the largest |coefficient| (lowest index among near-ties), sign from the coefficient.
Action pick_by_coefficient(const std::vector<double>& coefficients, int goal);

}  // namespace passive
