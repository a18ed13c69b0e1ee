// One PASS/FAIL line per acceptance criterion. Arguments select criteria by number.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "passive/bc.hpp"
#include "passive/cli.hpp"
#include "passive/dataset.hpp"
#include "passive/error.hpp"
#include "passive/eval.hpp"
#include "passive/ooo.hpp"
#include "passive/scm.hpp"

// After Eigen: resolv.h defines a macro that collides with Eigen parameter names.
#include "httplib.h"

using namespace passive;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Independent structural-equation evaluator: memoized recursion over parents rather than a
// topological sweep. `z` supplies the standard normal draw per node, or nothing when noise-free.
class Evaluator {
 public:
  explicit Evaluator(const CausalDag& dag) : dag_(dag) {}

  double value(int node, int clamp, double clamp_value, const std::vector<double>* z) {
    cache_.assign(dag_.size(), std::nan(""));
    clamp_ = clamp;
    clamp_value_ = clamp_value;
    z_ = z;
    return eval(node);
  }

 private:
  double eval(int v) {
    if (v == clamp_) return clamp_value_;
    if (!std::isnan(cache_[v])) return cache_[v];
    double sum = 0.0;
    for (std::size_t j = 0; j < dag_.parents[v].size(); ++j) sum += dag_.weights[v][j] * eval(dag_.parents[v][j]);
    if (z_) sum += std::sqrt(dag_.noise_var[v]) * (*z_)[v];
    const double out = (dag_.nonlinear && sum < 0) ? dag_.leak * sum : sum;
    return cache_[v] = out;
  }

  const CausalDag& dag_;
  std::vector<double> cache_;
  int clamp_ = -1;
  double clamp_value_ = 0.0;
  const std::vector<double>* z_ = nullptr;
};

struct Candidate {
  int node;
  double sign;
  double value;
};

// All do(X_i = +-magnitude) on relevant nodes, in (node, +, -) order, with noise-free goal values.
std::vector<Candidate> enumerate(const CausalDag& dag, int goal) {
  Evaluator ev(dag);
  std::vector<Candidate> out;
  for (int i = 0; i < dag.size(); ++i) {
    if (!dag.relevant[i]) continue;
    for (double sign : {1.0, -1.0}) out.push_back({i, sign, ev.value(goal, i, sign * dag.magnitude, nullptr)});
  }
  return out;
}

// First strict maximum, which reproduces the lowest-node, positive-first tie rule.
std::size_t argmax(const std::vector<double>& xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return best;
}

std::vector<double> values_of(const std::vector<Candidate>& cs) {
  std::vector<double> v;
  for (const auto& c : cs) v.push_back(c.value);
  return v;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const DagConfig config;
  const auto train = make_constraint(ConstraintKind::TrainStandard, config.n);
  const auto target = make_constraint(ConstraintKind::EvalTarget, config.n);
  const int D = train.test_intervention_node, E = train.test_goal_node;
  int violations = 0, not_d = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    Rng rng(derive_seed(101, i));
    const auto dag = sample_dag(config, train, rng);
    violations += is_ancestor(dag, D, E);
  }
  for (std::uint64_t i = 0; i < 10000; ++i) {
    Rng rng(derive_seed(202, i));
    const auto dag = sample_dag(config, target, rng);
    const auto cs = enumerate(dag, E);
    not_d += cs[argmax(values_of(cs))].node != D;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {violations == 0 && not_d == 0 && secs < 60,
          fmt("train_standard violations %.0f/10000, eval_target optimum != D %.0f/10000, %.1fs", violations, not_d,
              secs)};
}

Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  int exact = 0, compared = 0, agree = 0, excluded = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    DagConfig config;
    config.n = 3 + static_cast<int>(i % 6);
    config.nonlinear = i % 4 != 0;
    Rng rng(derive_seed(303, i));
    const auto dag = sample_dag(config, make_constraint(ConstraintKind::Unconstrained, config.n), rng);
    const int goal = std::uniform_int_distribution<int>(0, config.n - 1)(rng);
    const auto cs = enumerate(dag, goal);
    const std::size_t best = argmax(values_of(cs));
    const auto oracle = optimal_intervention(dag, goal);
    exact += oracle.node == cs[best].node && oracle.value == cs[best].sign * dag.magnitude;

    auto sorted = values_of(cs);
    std::sort(sorted.rbegin(), sorted.rend());
    if (sorted[0] - sorted[1] < 0.05 * std::abs(sorted[0])) {
      ++excluded;
      continue;
    }
    // Monte-Carlo expected goal value per candidate, common random numbers across candidates.
    Evaluator ev(dag);
    std::vector<double> mean(cs.size(), 0.0);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> z(dag.size());
    for (int s = 0; s < 10000; ++s) {
      for (auto& x : z) x = g(rng);
      for (std::size_t c = 0; c < cs.size(); ++c) {
        mean[c] += ev.value(goal, cs[c].node, cs[c].sign * dag.magnitude, &z);
      }
    }
    ++compared;
    agree += argmax(mean) == best;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double rate = compared ? static_cast<double>(agree) / compared : 0.0;
  return {exact == 1000 && rate >= 0.9 && secs < 300,
          fmt("brute force exact %.0f/1000, Monte-Carlo agreement %.4f over %.0f DAGs", exact, rate, compared) +
              fmt(" (%.0f near-ties excluded), %.1fs", excluded, secs)};
}

Outcome criterion3() {
  auto expert = builtin_policy("expert");
  DagConfig adaptive;
  adaptive.n = 10;
  adaptive.num_relevant = 5;
  auto train = make_condition(ConstraintKind::AdaptiveTrain, adaptive);
  auto held = make_condition(ConstraintKind::AdaptiveEval, adaptive);
  const auto masks = heldout_masks(10, 5, 0.2, 0);
  train.constraint.heldout_subsets = held.constraint.heldout_subsets = masks;
  const double standard = rollout_eval(expert, make_condition(ConstraintKind::TrainStandard), 1000, 1)
                              .at("exploration_correctness").value;
  const double a = rollout_eval(expert, train, 1000, 2).at("exploration_correctness").value;
  const double b = rollout_eval(expert, held, 1000, 3).at("exploration_correctness").value;
  return {standard == 1.0 && a == 1.0 && b == 1.0,
          fmt("exploration_correctness standard %.4f, adaptive train %.4f, adaptive held-out %.4f", standard, a, b)};
}

struct Trained {
  std::shared_ptr<const PolicyNet> net;
  double cpu = 0.0;
  std::int64_t steps = 0;
  std::int64_t expert_steps = 0;
};

Trained train_bc(const DatasetManifest& manifest, std::int64_t updates, std::uint64_t seed) {
  StreamSource source(manifest);
  TrainConfig tc;
  tc.total_steps = updates;
  tc.eval_every = updates;
  tc.seed = seed;
  const double c0 = cpu_seconds();
  Trainer trainer(net_config_for(manifest), tc, manifest_hash(manifest));
  trainer.run(source);
  return {std::make_shared<const PolicyNet>(trainer.net()), cpu_seconds() - c0, updates,
          updates * tc.batch_size * manifest.steps_per_episode()};
}

PolicyFactory learned(std::shared_ptr<const PolicyNet> net) {
  return [net](const EpisodeSpec&) { return std::make_unique<LearnedPolicy>(net); };
}

const Trained& standard_agent() {
  static const Trained agent = [] {
    DatasetManifest m;
    m.constraint = make_constraint(ConstraintKind::TrainStandard, m.dag.n);
    m.master_seed = 41;
    return train_bc(m, 40000, 0);
  }();
  return agent;
}

Outcome criterion4() {
  const auto& agent = standard_agent();
  const double c0 = cpu_seconds();
  const auto policy = learned(agent.net);
  const double train = rollout_eval(policy, make_condition(ConstraintKind::TrainStandard), 2000, 51)
                           .at("reward_fraction").value;
  const double target = rollout_eval(policy, make_condition(ConstraintKind::EvalTarget), 2000, 52)
                            .at("reward_fraction").value;
  const double path = rollout_eval(policy, make_condition(ConstraintKind::EvalPath), 2000, 53)
                          .at("reward_fraction").value;
  const double cpu = agent.cpu + cpu_seconds() - c0;
  return {agent.expert_steps >= 200000 && train >= 0.9 && target >= 0.75 && path >= 0.75 && cpu <= 7200,
          fmt("reward_fraction train %.4f, eval_target %.4f, eval_path %.4f", train, target, path) +
              fmt(" after %.0f expert steps, %.0f CPU s", static_cast<double>(agent.expert_steps), cpu)};
}

Outcome criterion5() {
  const auto policy = learned(standard_agent().net);
  bool pass = true;
  std::string detail;
  for (auto kind : {ConstraintKind::EvalTarget, ConstraintKind::EvalPath}) {
    const auto r = rollout_eval(policy, make_condition(kind), 2000, 61);
    const double expert = r.at("match_expert").value;
    double best = 0.0;
    std::string best_name;
    for (const auto& name : {"value", "change", "total_corr", "partial_corr"}) {
      const double m = r.at(std::string("match_") + name).value;
      if (m > best) best = m, best_name = name;
    }
    const double margin = expert - best;
    pass = pass && margin >= 0.05;
    detail += condition_name(kind) + fmt(": match_expert %.4f vs ", expert) + best_name +
              fmt(" %.4f (margin %+.4f); ", best, margin);
  }
  return {pass, detail};
}

Outcome criterion6() {
  DatasetManifest m;
  m.dag.n = 10;
  m.dag.num_relevant = 5;
  m.constraint = make_constraint(ConstraintKind::AdaptiveTrain, 10);
  m.constraint.heldout_subsets = heldout_masks(10, 5, 0.2, 7);
  m.master_seed = 71;
  const auto agent = train_bc(m, 40000, 0);
  auto held = make_condition(ConstraintKind::AdaptiveEval, m.dag);
  held.constraint.heldout_subsets = m.constraint.heldout_subsets;
  const auto r = rollout_eval(learned(agent.net), held, 2000, 72);
  const double ec = r.at("exploration_correctness").value;
  return {ec >= 0.8, fmt("held-out masks exploration_correctness %.4f, reward_fraction %.4f, %.0f CPU s", ec,
                         r.at("reward_fraction").value, agent.cpu)};
}

Outcome criterion7() {
  auto partial = builtin_policy("partial_corr");
  bool pass = true;
  std::string detail;
  for (auto kind : {ConstraintKind::EvalTarget, ConstraintKind::EvalPath}) {
    DagConfig linear;
    linear.nonlinear = false;
    const double nl = rollout_eval(partial, make_condition(kind), 5000, 81).at("match_expert").value;
    const double li = rollout_eval(partial, make_condition(kind, linear), 5000, 81).at("match_expert").value;
    pass = pass && li > nl;
    detail += condition_name(kind) + fmt(": partial_corr match_expert nonlinear %.4f -> linear %.4f; ", nl, li);
  }
  return {pass, detail};
}

Outcome criterion8() {
  double worst = 0.0;
  int nets = 0;
  for (Memory mem : {Memory::Gru, Memory::Attention}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      NetConfig c;
      c.n = 2 + static_cast<int>(seed % 3);
      c.memory = mem;
      c.hidden = 8;
      c.encoder = 6;
      c.heads = 2;
      c.horizon = c.n + 1;
      c.head_init_scale = 1.0;
      PolicyNet net(c, seed);
      Rng rng(seed + 900);
      std::normal_distribution<double> g(0.0, 0.3);
      for (Eigen::Index i = 0; i < net.num_params(); ++i) net.params()[i] += g(rng);
      DatasetManifest m;
      m.dag.n = c.n;
      m.constraint = make_constraint(ConstraintKind::Unconstrained, c.n);
      m.master_seed = seed;
      std::vector<Example> xs;
      for (int i = 0; i < 3; ++i) xs.push_back(to_example(make_record(m, i)));
      const auto report = gradient_check(net, make_batch({&xs[0], &xs[1], &xs[2]}));
      worst = std::max(worst, report.max_relative_error);
      ++nets;
    }
  }
  return {nets == 10 && worst < 1e-4, fmt("max relative error %.3g over %.0f networks", worst, nets)};
}

// Relays the oracle over HTTP, as a language-model service would answer.
struct MockScorerServer {
  httplib::Server server;
  std::thread thread;
  ooo::OracleScorer oracle;
  std::atomic<int> calls{0};
  int port = 0;

  MockScorerServer() {
    server.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      const auto body = nlohmann::json::parse(req.body);
      const auto scores = oracle.score(body.at("prompt"), body.at("candidates").get<std::vector<std::string>>());
      res.set_content(nlohmann::json{{"scores", scores}}.dump(), "application/json");
    });
    server.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      const auto body = nlohmann::json::parse(req.body);
      res.set_content(nlohmann::json{{"text", oracle.generate(body.at("prompt"), body.at("stop"))}}.dump(),
                      "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~MockScorerServer() {
    server.stop();
    thread.join();
  }
};

Outcome criterion9() {
  using namespace ooo;
  const std::string golden = GOLDEN_DIR;
  int golden_ok = 0;
  {
    const std::string listing = slurp(golden + "/listing1.txt");
    golden_ok += render(episode_from_game(parse_transcript(listing).at(0)), flags_for(Variant::ExplanationsReasoning)) ==
                 listing;
    Rng r7(7);
    golden_ok += prompt_text(sample_prompt({Dim::Color, Dim::Shape, Dim::Texture}, {}, ExpertMode::Fixed, r7)) ==
                 slurp(golden + "/prompt_fixed_seed7.txt");
    Rng r11(11);
    golden_ok += prompt_text(sample_prompt({Dim::Color, Dim::Texture}, flags_for(Variant::Instruction),
                                           ExpertMode::Varied, r11)) ==
                 slurp(golden + "/prompt_varied_instruction_seed11.txt");
    OracleScorer oracle;
    Rng r5(5);
    const auto prompt = sample_prompt({Dim::Shape, Dim::Texture}, flags_for(Variant::Reasoning), ExpertMode::Fixed, r5);
    Rng r99(99);
    const auto skeleton = sample_episode(SampleConfig{{Dim::Color}}, r99);
    golden_ok += run_episode(prompt, skeleton, oracle).transcript == slurp(golden + "/oracle_game_seed5.txt");
  }

  OracleScorer oracle;
  ExperimentConfig config;
  config.episodes = 100;
  config.seed = 9;
  const auto result = run_experiment(config, oracle);
  double worst = 1.0;
  for (const auto& r : result.reports) {
    worst = std::min({worst, r.at("accuracy_heldout").value, r.at("accuracy_train_dims").value});
  }

  int intact = 0, prompts = 0;
  for (Dim held : kDims) {
    std::vector<Dim> allowed;
    for (Dim d : kDims) {
      if (d != held) allowed.push_back(d);
    }
    Rng rng(derive_seed(10, static_cast<std::uint64_t>(held)));
    for (int i = 0; i < 300; ++i) {
      for (auto v : all_variants()) {
        ++prompts;
        intact += holdout_intact(sample_prompt(allowed, flags_for(v), ExpertMode::Fixed, rng), held);
      }
    }
  }

  MockScorerServer mock;
  const auto log_path = (fs::temp_directory_path() / "passive_acceptance_scorer.jsonl").string();
  fs::remove(log_path);
  HttpScorerConfig http_config;
  http_config.url = "http://127.0.0.1:" + std::to_string(mock.port);
  http_config.log_path = log_path;
  HttpScorer http(http_config);
  ExperimentConfig small;
  small.episodes = 10;
  small.candidates = 2;
  small.validation = 3;
  small.heldout = {Dim::Texture};
  const auto remote = run_experiment(small, http);
  double remote_worst = 1.0;
  for (const auto& r : remote.reports) remote_worst = std::min(remote_worst, r.at("accuracy_heldout").value);
  int logged = 0;
  {
    std::ifstream log(log_path);
    std::string line;
    while (std::getline(log, line)) logged += nlohmann::json::parse(line).contains("request");
  }
  fs::remove(log_path);

  const bool pass = golden_ok == 4 && result.reports.size() == 15 && worst == 1.0 && intact == prompts &&
                    remote_worst == 1.0 && logged == mock.calls.load() && logged > 0;
  return {pass, fmt("golden %.0f/4, oracle min accuracy %.4f over %.0f conditions", golden_ok, worst,
                    static_cast<double>(result.reports.size())) +
                    fmt(", hold-out intact %.0f/%.0f, HTTP mock accuracy %.4f", intact, prompts, remote_worst) +
                    fmt(" with %.0f logged requests", logged)};
}

Outcome criterion10() {
  const fs::path root = fs::temp_directory_path() / "passive_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream log;
  cli::RunConfig gen;
  gen.out = (root / "gen_a").string();
  gen.episodes = 500;
  gen.seed = 5;
  cli::cmd_gen(gen, log);
  cli::RunConfig again = cli::load_config((root / "gen_a/resolved.ini").string());
  again.out = (root / "gen_b").string();
  again.jobs = 3;
  cli::cmd_gen(again, log);
  const bool gen_same = slurp((root / "gen_a/dataset.jsonl").string()) == slurp((root / "gen_b/dataset.jsonl").string());

  cli::RunConfig eval;
  eval.out = (root / "eval_a").string();
  eval.policies = {"expert", "value", "partial_corr"};
  eval.eval_episodes = 300;
  eval.seed = 6;
  cli::cmd_eval(eval, log);
  cli::RunConfig eval_again = cli::load_config((root / "eval_a/resolved.ini").string());
  eval_again.out = (root / "eval_b").string();
  eval_again.jobs = 3;
  cli::cmd_eval(eval_again, log);
  int same_csv = 0;
  for (const auto& p : eval.policies) {
    same_csv += slurp((root / "eval_a" / (p + ".csv")).string()) == slurp((root / "eval_b" / (p + ".csv")).string());
  }
  fs::remove_all(root);
  return {gen_same && same_csv == 3,
          fmt("dataset bytes identical %.0f, report CSVs identical %.0f/3", gen_same, same_csv)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"constraint soundness", criterion1},    {"oracle fidelity", criterion2},
      {"expert coverage", criterion3},         {"behavioral cloning reward", criterion4},
      {"expert-match margin", criterion5},     {"adaptive exploration", criterion6},
      {"linear partial_corr check", criterion7}, {"gradient correctness", criterion8},
      {"text harness", criterion9},            {"determinism", criterion10}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    failed += !o.pass;
    std::printf("CRITERION %d %s %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
