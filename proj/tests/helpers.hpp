#pragma once

// Test-only utilities: hand-built DAGs and an independent reference
// implementation of noise-free propagation and the intervention oracle.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "passive/scm.hpp"

namespace passive::testing {

struct Edge {
  int parent;
  int child;
  double weight;
};

inline CausalDag make_dag(int n, const std::vector<Edge>& edges, std::vector<int> order = {},
                          bool nonlinear = true) {
  CausalDag dag;
  if (order.empty()) {
    for (int i = 0; i < n; ++i) order.push_back(i);
  }
  dag.order = order;
  dag.parents.assign(n, {});
  dag.weights.assign(n, {});
  dag.noise_var.assign(n, 0.5);
  dag.relevant.assign(n, true);
  dag.nonlinear = nonlinear;
  for (const auto& e : edges) {
    dag.parents[e.child].push_back(e.parent);
    dag.weights[e.child].push_back(e.weight);
  }
  return dag;
}

/// Recursive evaluation by parent lookup; never touches dag.order.
inline double reference_value(const CausalDag& dag, int node, std::optional<Intervention> iv) {
  if (iv && iv->node == node) return iv->value;
  double total = 0.0;
  for (std::size_t j = 0; j < dag.parents[node].size(); ++j) {
    total += dag.weights[node][j] * reference_value(dag, dag.parents[node][j], iv);
  }
  if (dag.nonlinear && total < 0.0) return dag.leak * total;
  return total;
}

/// Enumerates all 2n candidates into a table, then scans it for the first maximum.
inline Intervention reference_oracle(const CausalDag& dag, int goal) {
  struct Row {
    int node;
    double value;
    double outcome;
  };
  std::vector<Row> table;
  for (int i = 0; i < dag.size(); ++i) {
    if (!dag.relevant[i]) continue;
    table.push_back({i, +dag.magnitude, reference_value(dag, goal, Intervention{i, +dag.magnitude})});
    table.push_back({i, -dag.magnitude, reference_value(dag, goal, Intervention{i, -dag.magnitude})});
  }
  double top = -INFINITY;
  for (const auto& r : table) top = std::max(top, r.outcome);
  for (const auto& r : table) {
    if (r.outcome == top) return {r.node, r.value};
  }
  return {-1, 0.0};
}

}  // namespace passive::testing
