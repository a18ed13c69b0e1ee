#include "passive/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "passive/error.hpp"

namespace passive {

void DagConfig::validate() const {
  if (n < 2) throw ConfigError("dag.n must be >= 2, got " + std::to_string(n));
  if (n > 64) throw ConfigError("dag.n must be <= 64 (relevance masks are 64-bit)");
  if (!(weight_low < weight_high)) throw ConfigError("dag.weight_low must be < dag.weight_high");
  if (!(noise_std >= 0.0)) throw ConfigError("dag.noise_std must be >= 0");
  if (!(intervention_magnitude > 0.0)) throw ConfigError("dag.intervention_magnitude must be > 0");
  if (!(leak >= 0.0)) throw ConfigError("dag.leak must be >= 0");
  if (num_relevant && (*num_relevant <= 0 || *num_relevant > n)) {
    throw ConfigError("dag.num_relevant must be in (0, n]");
  }
}

std::uint64_t CausalDag::relevance_mask() const {
  std::uint64_t mask = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (relevant[i]) mask |= (std::uint64_t{1} << i);
  }
  return mask;
}

std::vector<int> CausalDag::relevant_nodes() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (relevant[i]) out.push_back(i);
  }
  return out;
}

void CausalDag::validate() const {
  const int n = size();
  auto fail = [](const std::string& msg) { throw DataError("invalid dag: " + msg); };
  if (n < 2) fail("fewer than 2 nodes");
  if (static_cast<int>(parents.size()) != n || static_cast<int>(weights.size()) != n ||
      static_cast<int>(noise_var.size()) != n || static_cast<int>(relevant.size()) != n) {
    fail("field lengths disagree with order");
  }
  std::vector<int> position(n, -1);
  for (int k = 0; k < n; ++k) {
    const int v = order[k];
    if (v < 0 || v >= n || position[v] != -1) fail("order is not a permutation");
    position[v] = k;
  }
  for (int v = 0; v < n; ++v) {
    if (!(noise_var[v] >= 0.0) || !std::isfinite(noise_var[v])) fail("negative noise variance");
    if (parents[v].size() != weights[v].size()) fail("weights not aligned with parents");
    if (parents[v].size() > 2) fail("node with more than 2 parents");
    if (!relevant[v] && !parents[v].empty()) fail("irrelevant node with parents");
    for (std::size_t j = 0; j < parents[v].size(); ++j) {
      const int p = parents[v][j];
      if (p < 0 || p >= n) fail("parent index out of range");
      if (position[p] >= position[v]) fail("parent does not precede child");
      if (!relevant[p]) fail("irrelevant node used as parent");
      if (!std::isfinite(weights[v][j])) fail("non-finite weight");
    }
  }
}

std::string to_string(ConstraintKind kind) {
  switch (kind) {
    case ConstraintKind::TrainStandard: return "TrainStandard";
    case ConstraintKind::EvalTarget: return "EvalTarget";
    case ConstraintKind::EvalPath: return "EvalPath";
    case ConstraintKind::AdaptiveTrain: return "AdaptiveTrain";
    case ConstraintKind::AdaptiveEval: return "AdaptiveEval";
    case ConstraintKind::Unconstrained: return "Unconstrained";
  }
  return "Unconstrained";
}

std::string condition_name(ConstraintKind kind) {
  switch (kind) {
    case ConstraintKind::TrainStandard: return "train";
    case ConstraintKind::EvalTarget: return "eval_target";
    case ConstraintKind::EvalPath: return "eval_path";
    case ConstraintKind::AdaptiveTrain: return "adaptive_train";
    case ConstraintKind::AdaptiveEval: return "adaptive_eval";
    case ConstraintKind::Unconstrained: return "unconstrained";
  }
  return "unconstrained";
}

ConstraintKind constraint_kind_from_string(const std::string& name) {
  for (auto kind : {ConstraintKind::TrainStandard, ConstraintKind::EvalTarget, ConstraintKind::EvalPath,
                    ConstraintKind::AdaptiveTrain, ConstraintKind::AdaptiveEval,
                    ConstraintKind::Unconstrained}) {
    if (name == to_string(kind) || name == condition_name(kind)) return kind;
  }
  throw ConfigError("unknown constraint kind '" + name + "'");
}

void ConstraintSpec::validate(const DagConfig& config) const {
  const int n = config.n;
  if (test_intervention_node < 0 || test_intervention_node >= n || test_goal_node < 0 ||
      test_goal_node >= n) {
    throw ConfigError("constraint test nodes out of range for n = " + std::to_string(n));
  }
  if (test_intervention_node == test_goal_node) throw ConfigError("constraint test nodes must differ");
  const bool adaptive_kind = kind == ConstraintKind::AdaptiveTrain || kind == ConstraintKind::AdaptiveEval;
  if (adaptive_kind && !config.adaptive()) {
    throw ConfigError("adaptive constraint requires dag.num_relevant");
  }
  if (kind == ConstraintKind::AdaptiveEval && heldout_subsets.empty()) {
    throw ConfigError("AdaptiveEval requires a non-empty held-out mask set");
  }
  for (auto mask : heldout_subsets) {
    if (n < 64 && (mask >> n) != 0) throw ConfigError("held-out mask has bits beyond n");
  }
}

ConstraintSpec make_constraint(ConstraintKind kind, int n) {
  ConstraintSpec spec;
  spec.kind = kind;
  spec.test_intervention_node = n - 2;
  spec.test_goal_node = n - 1;
  return spec;
}

bool is_ancestor(const CausalDag& dag, int a, int b) {
  if (a == b) return false;
  std::vector<bool> seen(dag.size(), false);
  std::vector<int> stack(dag.parents[b].begin(), dag.parents[b].end());
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (v == a) return true;
    if (seen[v]) continue;
    seen[v] = true;
    stack.insert(stack.end(), dag.parents[v].begin(), dag.parents[v].end());
  }
  return false;
}

std::vector<bool> descendants(const CausalDag& dag, int node) {
  std::vector<bool> reach(dag.size(), false);
  std::vector<bool> marked(dag.size(), false);
  marked[node] = true;
  for (int v : dag.order) {
    if (v == node) continue;
    for (int p : dag.parents[v]) {
      if (marked[p]) {
        marked[v] = true;
        reach[v] = true;
        break;
      }
    }
  }
  return reach;
}

std::vector<double> propagate(const CausalDag& dag, std::span<const Intervention> interventions,
                              NoiseMode mode, Rng* rng) {
  const int n = dag.size();
  std::vector<double> values(n, 0.0);
  std::vector<bool> clamped(n, false);
  for (const auto& iv : interventions) {
    values[iv.node] = iv.value;
    clamped[iv.node] = true;
  }
  std::normal_distribution<double> standard(0.0, 1.0);
  for (int v : dag.order) {
    if (clamped[v]) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < dag.parents[v].size(); ++j) {
      total += dag.weights[v][j] * values[dag.parents[v][j]];
    }
    if (mode == NoiseMode::Sampled) total += std::sqrt(dag.noise_var[v]) * standard(*rng);
    values[v] = dag.activate(total);
  }
  return values;
}

std::vector<double> propagate(const CausalDag& dag, const std::optional<Intervention>& intervention,
                              NoiseMode mode, Rng* rng) {
  if (intervention) return propagate(dag, std::span<const Intervention>(&*intervention, 1), mode, rng);
  return propagate(dag, std::span<const Intervention>{}, mode, rng);
}

Intervention optimal_intervention(const CausalDag& dag, int goal) {
  Intervention best{-1, 0.0};
  double best_value = 0.0;
  for (int i = 0; i < dag.size(); ++i) {
    if (!dag.relevant[i]) continue;
    for (double sign : {1.0, -1.0}) {
      const Intervention candidate{i, sign * dag.magnitude};
      const double value = propagate(dag, candidate, NoiseMode::Zero)[goal];
      if (best.node < 0 || value > best_value) {
        best = candidate;
        best_value = value;
      }
    }
  }
  return best;
}

namespace {

// Nodes lying on some directed path from `source` to `sink`, both included.
std::vector<bool> path_nodes(const CausalDag& dag, int source, int sink) {
  auto down = descendants(dag, source);
  down[source] = true;
  std::vector<bool> on_path(dag.size(), false);
  for (int v = 0; v < dag.size(); ++v) {
    on_path[v] = down[v] && (v == sink || is_ancestor(dag, v, sink));
  }
  return on_path;
}

bool eval_structure_ok(const CausalDag& dag, const ConstraintSpec& c) {
  const int d = c.test_intervention_node;
  const int e = c.test_goal_node;
  if (dag.order.back() != e || !is_ancestor(dag, d, e)) return false;
  const auto below_d = descendants(dag, d);
  for (int p : dag.parents[e]) {
    if (p != d && !below_d[p]) return false;
  }
  const auto on_path = path_nodes(dag, d, e);
  for (int v = 0; v < dag.size(); ++v) {
    if (!on_path[v] || v == d) continue;
    for (std::size_t j = 0; j < dag.parents[v].size(); ++j) {
      const double w = std::abs(dag.weights[v][j]);
      if (on_path[dag.parents[v][j]] ? !(w > 1.0) : !(w < 1.0)) return false;
    }
  }
  return true;
}

bool mask_in(const std::set<std::uint64_t>& masks, std::uint64_t mask) { return masks.count(mask) > 0; }

}  // namespace

bool satisfies(const CausalDag& dag, const ConstraintSpec& c) {
  const int d = c.test_intervention_node;
  const int e = c.test_goal_node;
  switch (c.kind) {
    case ConstraintKind::Unconstrained:
      return true;
    case ConstraintKind::TrainStandard:
      return !is_ancestor(dag, d, e);
    case ConstraintKind::EvalTarget:
      return eval_structure_ok(dag, c) && optimal_intervention(dag, e).node == d;
    case ConstraintKind::EvalPath: {
      if (!eval_structure_ok(dag, c)) return false;
      const int best = optimal_intervention(dag, e).node;
      return best == d || is_ancestor(dag, best, d);
    }
    case ConstraintKind::AdaptiveTrain:
      if (mask_in(c.heldout_subsets, dag.relevance_mask())) return false;
      return !(dag.relevant[d] && dag.relevant[e] && is_ancestor(dag, d, e));
    case ConstraintKind::AdaptiveEval:
      return mask_in(c.heldout_subsets, dag.relevance_mask());
  }
  return false;
}

namespace {

double with_magnitude(double w, double magnitude) { return std::signbit(w) ? -magnitude : magnitude; }

std::optional<CausalDag> sample_once(const DagConfig& config, const ConstraintSpec& c, Rng& rng) {
  const int n = config.n;
  const int d = c.test_intervention_node;
  const int e = c.test_goal_node;
  const bool eval = c.is_eval();

  CausalDag dag;
  dag.nonlinear = config.nonlinear;
  dag.leak = config.leak;
  dag.magnitude = config.intervention_magnitude;
  dag.adaptive = config.adaptive();
  dag.parents.assign(n, {});
  dag.weights.assign(n, {});

  dag.order.resize(n);
  std::iota(dag.order.begin(), dag.order.end(), 0);
  std::shuffle(dag.order.begin(), dag.order.end(), rng);
  if (eval) {
    dag.order.erase(std::find(dag.order.begin(), dag.order.end(), e));
    dag.order.push_back(e);
  }

  // Variances come from a normal clipped at zero.
  std::normal_distribution<double> standard(0.0, 1.0);
  dag.noise_var.resize(n);
  for (auto& var : dag.noise_var) {
    var = std::max(0.0, config.noise_mean + config.noise_std * standard(rng));
  }

  dag.relevant.assign(n, true);
  if (config.adaptive()) {
    std::uint64_t mask = 0;
    if (c.kind == ConstraintKind::AdaptiveEval) {
      std::vector<std::uint64_t> pool(c.heldout_subsets.begin(), c.heldout_subsets.end());
      mask = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    } else {
      std::vector<int> nodes(n);
      std::iota(nodes.begin(), nodes.end(), 0);
      std::shuffle(nodes.begin(), nodes.end(), rng);
      for (int k = 0; k < *config.num_relevant; ++k) mask |= std::uint64_t{1} << nodes[k];
    }
    for (int v = 0; v < n; ++v) dag.relevant[v] = (mask >> v) & 1U;
  }

  std::vector<int> rel_order;
  for (int v : dag.order) {
    if (dag.relevant[v]) rel_order.push_back(v);
  }
  const int m = static_cast<int>(rel_order.size());
  const int num_independent = std::uniform_int_distribution<int>(1, std::max(1, m / 2))(rng);

  const bool guard_train = (c.kind == ConstraintKind::TrainStandard ||
                            c.kind == ConstraintKind::AdaptiveTrain) &&
                           dag.relevant[d] && dag.relevant[e];
  std::uniform_real_distribution<double> weight(config.weight_low, config.weight_high);

  for (int k = num_independent; k < m; ++k) {
    const int v = rel_order[k];
    std::vector<int> candidates(rel_order.begin(), rel_order.begin() + k);
    if (v == e && (guard_train || eval)) {
      // D itself or anything downstream of D among the nodes placed so far.
      std::vector<bool> below(n, false);
      for (int u : candidates) {
        if (u == d) {
          below[u] = true;
          continue;
        }
        for (int p : dag.parents[u]) below[u] = below[u] || below[p];
      }
      std::erase_if(candidates, [&](int u) { return eval ? !below[u] : below[u]; });
      if (candidates.empty()) return std::nullopt;
    }
    const int max_parents = std::min<int>(2, static_cast<int>(candidates.size()));
    const int count = std::uniform_int_distribution<int>(1, max_parents)(rng);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (int j = 0; j < count; ++j) {
      dag.parents[v].push_back(candidates[j]);
      dag.weights[v].push_back(weight(rng));
    }
  }

  if (eval) {
    const auto on_path = path_nodes(dag, d, e);
    const double high = std::max(std::abs(config.weight_low), std::abs(config.weight_high));
    std::uniform_real_distribution<double> strong(std::nextafter(1.0, 2.0), std::max(high, std::nextafter(1.0, 2.0)));
    std::uniform_real_distribution<double> weak(std::nextafter(0.0, 1.0), 1.0);
    for (int v : dag.order) {
      if (!on_path[v] || v == d) continue;
      for (std::size_t j = 0; j < dag.parents[v].size(); ++j) {
        double& w = dag.weights[v][j];
        w = with_magnitude(w, on_path[dag.parents[v][j]] ? strong(rng) : weak(rng));
      }
    }
  }

  if (!satisfies(dag, c)) return std::nullopt;
  return dag;
}

}  // namespace

CausalDag sample_dag(const DagConfig& config, const ConstraintSpec& constraint, Rng& rng) {
  config.validate();
  constraint.validate(config);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    if (auto dag = sample_once(config, constraint, rng)) return std::move(*dag);
  }
  throw ConstraintError("could not satisfy constraint " + to_string(constraint.kind), kMaxSampleAttempts);
}

}  // namespace passive
