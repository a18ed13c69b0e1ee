#include "passive/policies.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace passive {

void EpisodeLog::observe(const Observation& obs) {
  if (started_) {
    if (auto iv = obs.last_intervention()) {
      entries_.push_back({*iv, obs.prev_values, obs.post_values, pending_exploration_});
    }
  }
  started_ = true;
  pending_exploration_ = obs.goal() < 0;
}

std::vector<LogEntry> EpisodeLog::exploration_entries() const {
  std::vector<LogEntry> out;
  for (const auto& e : entries_) {
    if (e.exploration) out.push_back(e);
  }
  return out;
}

void EpisodeLog::clear() {
  entries_.clear();
  pending_exploration_ = true;
  started_ = false;
}

std::vector<int> relevant_from_cue(const Observation& obs) {
  std::vector<int> nodes;
  for (int i = 0; i < obs.size(); ++i) {
    if (obs.relevance_cue.empty() || obs.relevance_cue[i] != 0.0) nodes.push_back(i);
  }
  return nodes;
}

Action SweepExplorer::next(const Observation& obs) {
  const auto nodes = relevant_from_cue(obs);
  const int m = static_cast<int>(nodes.size());
  if (start_ < 0) start_ = std::uniform_int_distribution<int>(0, m - 1)(rng_);
  const int node = nodes[(start_ + step_) % m];
  ++step_;
  const bool positive = std::bernoulli_distribution(0.5)(rng_);
  return Action::from(node, positive);
}

Action ExpertPolicy::act(const Observation& obs) {
  if (obs.goal() < 0) return explorer_.next(obs);
  return Action::from(optimal_intervention(dag_, goal_));
}

Action BaselinePolicy::act(const Observation& obs) {
  log_.observe(obs);
  const int goal = obs.goal();
  if (goal < 0) return explorer_.next(obs);
  return exploit(log_, goal);
}

namespace {

std::vector<LogEntry> require_exploration(const EpisodeLog& log, const char* who) {
  auto entries = log.exploration_entries();
  if (entries.empty()) throw std::logic_error(std::string(who) + ": empty exploration log");
  return entries;
}

}  // namespace

Action ValueBaseline::exploit(const EpisodeLog& log, int goal) const {
  const auto entries = require_exploration(log, "value baseline");
  std::size_t best = 0;
  for (std::size_t k = 1; k < entries.size(); ++k) {
    if (entries[k].post_values[goal] > entries[best].post_values[goal]) best = k;
  }
  return Action::from(entries[best].intervention);
}

Action ChangeBaseline::exploit(const EpisodeLog& log, int goal) const {
  const auto entries = require_exploration(log, "change baseline");
  auto change = [&](const LogEntry& e) { return e.post_values[goal] - e.pre_values[goal]; };
  std::size_t best = 0;
  for (std::size_t k = 1; k < entries.size(); ++k) {
    if (std::abs(change(entries[k])) > std::abs(change(entries[best]))) best = k;
  }
  const auto& iv = entries[best].intervention;
  const bool positive = iv.value >= 0.0;
  return Action::from(iv.node, change(entries[best]) < 0.0 ? !positive : positive);
}

std::vector<std::vector<double>> regression_samples(const std::vector<LogEntry>& entries) {
  std::vector<std::vector<double>> samples;
  for (const auto& e : entries) {
    if (!e.exploration) continue;
    samples.push_back(e.pre_values);
    samples.push_back(e.post_values);
  }
  return samples;
}

std::vector<double> univariate_slopes(const std::vector<std::vector<double>>& samples, int goal) {
  if (samples.size() < 2) throw std::logic_error("correlation baseline needs at least 2 samples");
  const int n = static_cast<int>(samples.front().size());
  const double count = static_cast<double>(samples.size());
  std::vector<double> mean(n, 0.0);
  for (const auto& s : samples) {
    for (int j = 0; j < n; ++j) mean[j] += s[j] / count;
  }
  std::vector<double> slopes(n, 0.0);
  for (int j = 0; j < n; ++j) {
    if (j == goal) continue;
    double sxx = 0.0;
    double sxy = 0.0;
    for (const auto& s : samples) {
      sxx += (s[j] - mean[j]) * (s[j] - mean[j]);
      sxy += (s[j] - mean[j]) * (s[goal] - mean[goal]);
    }
    slopes[j] = sxx > 1e-12 ? sxy / sxx : 0.0;  // constant predictor
  }
  return slopes;
}

std::vector<double> multivariate_coefficients(const std::vector<std::vector<double>>& samples, int goal) {
  if (samples.size() < 2) throw std::logic_error("correlation baseline needs at least 2 samples");
  const int n = static_cast<int>(samples.front().size());
  const int rows = static_cast<int>(samples.size());
  std::vector<int> predictors;
  for (int j = 0; j < n; ++j) {
    if (j != goal) predictors.push_back(j);
  }
  const int p = static_cast<int>(predictors.size());
  Eigen::MatrixXd x(rows, p);
  Eigen::VectorXd y(rows);
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < p; ++k) x(r, k) = samples[r][predictors[k]];
    y(r) = samples[r][goal];
  }
  x.rowwise() -= x.colwise().mean();
  y.array() -= y.mean();

  const Eigen::MatrixXd gram = x.transpose() * x;
  const Eigen::VectorXd rhs = x.transpose() * y;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  Eigen::VectorXd beta;
  const double scale = std::max(1.0, gram.diagonal().maxCoeff());
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-12 &&
      ldlt.vectorD().minCoeff() > 1e-12 * scale) {
    beta = ldlt.solve(rhs);
  } else {
    const Eigen::MatrixXd ridge = gram + kRidgeLambda * Eigen::MatrixXd::Identity(p, p);
    beta = ridge.ldlt().solve(rhs);
  }
  std::vector<double> coefficients(n, 0.0);
  for (int k = 0; k < p; ++k) coefficients[predictors[k]] = beta(k);
  return coefficients;
}

Action pick_by_coefficient(const std::vector<double>& coefficients, int goal) {
  int best = -1;
  double best_abs = 0.0;
  for (int j = 0; j < static_cast<int>(coefficients.size()); ++j) {
    if (j == goal) continue;
    const double a = std::abs(coefficients[j]);
    // Near-equal magnitudes count as ties so that symmetric fits resolve to the lowest index.
    if (best < 0 || a > best_abs * (1.0 + 1e-9) + 1e-300) {
      best = j;
      best_abs = a;
    }
  }
  return Action::from(best, coefficients[best] >= 0.0);
}

Action TotalCorrelationBaseline::exploit(const EpisodeLog& log, int goal) const {
  const auto samples = regression_samples(require_exploration(log, "total correlation baseline"));
  return pick_by_coefficient(univariate_slopes(samples, goal), goal);
}

Action PartialCorrelationBaseline::exploit(const EpisodeLog& log, int goal) const {
  const auto samples = regression_samples(require_exploration(log, "partial correlation baseline"));
  return pick_by_coefficient(multivariate_coefficients(samples, goal), goal);
}

Action RandomPolicy::act(const Observation& obs) {
  return {std::uniform_int_distribution<int>(0, 2 * obs.size() - 1)(rng_)};
}

}  // namespace passive
