#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "passive/cli.hpp"
#include "passive/error.hpp"

using namespace passive;
using namespace passive::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("passive_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

int run_binary(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + PASSIVE_BIN + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig small_config(const std::string& out) {
  RunConfig c;
  c.out = out;
  c.dag.n = 3;
  c.episodes = 100;
  c.train.total_steps = 100;
  c.train.eval_every = 50;
  c.train.batch_size = 8;
  c.net.hidden = 16;
  c.net.encoder = 16;
  c.train_eval_episodes = 20;
  c.eval_episodes = 100;
  return c;
}

}  // namespace

TEST_CASE("ini parsing") {
  const auto raw = parse_ini("# comment\n[dag]\nn = 7\n; other\nnonlinear=false\n\n[run]\n out = x y \n");
  CHECK(raw.at("dag").at("n") == "7");
  CHECK(raw.at("dag").at("nonlinear") == "false");
  CHECK(raw.at("run").at("out") == "x y");
  CHECK_THROWS_WITH_AS(parse_ini("[dag]\nn\n"), doctest::Contains("config line 2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_ini("n = 3\n"), doctest::Contains("outside any section"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_ini("[dag]\nn = 3\nn = 4\n"), doctest::Contains("duplicate key dag.n"), ConfigError);
  CHECK_THROWS_AS(parse_ini("[dag\nn = 3\n"), ConfigError);
}

TEST_CASE("unknown keys and bad values name the field") {
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[dag]\nsize = 3\n")), doctest::Contains("dag.size"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[bogus]\nn = 3\n")), doctest::Contains("bogus.n"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[constraint]\nkind = sideways\n")),
                       doctest::Contains("constraint.kind"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[dag]\nn = five\n")), doctest::Contains("dag.n"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[dag]\nnonlinear = maybe\n")), doctest::Contains("dag.nonlinear"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(config_from_raw(parse_ini("[train]\nlearning_rate = 1e-3x\n")),
                       doctest::Contains("train.learning_rate"), ConfigError);
  RunConfig c;
  CHECK_THROWS_AS(apply_override(c, "dag.n"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "n=3"), ConfigError);
}

TEST_CASE("rendered configs parse back to the same config") {
  RunConfig c;
  c.seed = 99;
  c.dag.n = 10;
  c.dag.num_relevant = 5;
  c.dag.leak = 0.1 + 0.2;  // not exactly representable in short decimal
  c.constraint = ConstraintKind::AdaptiveTrain;
  c.net.memory = Memory::Gru;
  c.train.lr_schedule = LrSchedule::Constant;
  c.train.loss_mask = LossMask::ExploitOnly;
  c.policies = {"value", "change"};
  c.noise = NoiseMode::Zero;
  c.ooo.variants = {ooo::Variant::None, ooo::Variant::Instruction};
  c.ooo.heldout = {ooo::Dim::Texture};
  c.ooo.mode = ooo::ExpertMode::Varied;
  c.oracle = true;
  const std::string text = render_config(c);
  const RunConfig back = config_from_raw(parse_ini(text));
  CHECK(render_config(back) == text);
  CHECK(back.dag.leak == c.dag.leak);
  CHECK(back.dag.num_relevant == 5);
  CHECK(back.policies == c.policies);
  CHECK(back.ooo.heldout == c.ooo.heldout);
  CHECK(render_config(RunConfig{}).find("num_relevant = none") != std::string::npos);
}

TEST_CASE("overrides replace file values") {
  RunConfig c = config_from_raw(parse_ini("[dag]\nn = 4\n"));
  apply_override(c, "dag.n=6");
  apply_override(c, "eval.policies = value, change ,total_corr");
  CHECK(c.dag.n == 6);
  CHECK(c.policies == std::vector<std::string>{"value", "change", "total_corr"});
}

TEST_CASE("resolve derives test nodes and held-out masks") {
  RunConfig c;
  c.dag.n = 10;
  c.dag.num_relevant = 5;
  c.constraint = ConstraintKind::AdaptiveTrain;
  c.resolve();
  CHECK(c.test_intervention_node == 8);
  CHECK(c.test_goal_node == 9);
  const auto spec = c.constraint_spec();
  CHECK(spec.heldout_subsets.size() == static_cast<std::size_t>(std::ceil(0.2 * 252)));
  RunConfig bad;
  bad.conditions = {"nowhere"};
  CHECK_THROWS_AS(bad.resolve(), ConfigError);
}

TEST_CASE("gen writes the requested episodes reproducibly") {
  TempDir dir("gen");
  std::ostringstream log;
  RunConfig c = small_config(dir / "a");
  const auto summary = cmd_gen(c, log);
  CHECK(summary.records == 100);
  const std::string data = slurp(dir / "a/dataset.jsonl");
  CHECK(count_lines(data) == 101);  // header plus one line per episode
  CHECK(fs::exists(dir / "a/manifest.json"));
  CHECK(fs::exists(dir / "a/resolved.ini"));

  cmd_gen(c, log);
  CHECK(slurp(dir / "a/dataset.jsonl") == data);

  // The resolved config alone reproduces the run.
  RunConfig again = load_config(dir / "a/resolved.ini");
  again.out = dir / "b";
  cmd_gen(again, log);
  CHECK(slurp(dir / "b/dataset.jsonl") == data);

  c.jobs = 3;
  c.out = dir / "c";
  cmd_gen(c, log);
  CHECK(slurp(dir / "c/dataset.jsonl") == data);
}

TEST_CASE("train on a dataset, then resume") {
  TempDir dir("train");
  std::ostringstream log;
  RunConfig g = small_config(dir / "data");
  cmd_gen(g, log);

  RunConfig c = small_config(dir / "run");
  c.dataset = dir / "data/dataset.jsonl";
  c.conditions = {"train"};
  const auto rows = cmd_train(c, log);
  CHECK(rows.size() == 2);
  CHECK(fs::exists(dir / "run/checkpoint.json"));
  CHECK(fs::exists(dir / "run/learning_curve.svg"));
  const std::string metrics = slurp(dir / "run/metrics.csv");
  CHECK(count_lines(metrics) == 3);
  CHECK(metrics.find("train_reward_fraction") != std::string::npos);

  RunConfig r = c;
  r.resume = dir / "run/checkpoint.json";
  r.train.total_steps = 150;
  const auto more = cmd_train(r, log);
  REQUIRE(more.size() == 1);
  CHECK(more.front().step == 150);
  CHECK(load_checkpoint(dir / "run/checkpoint.json").step == 150);
  CHECK(count_lines(slurp(dir / "run/metrics.csv")) == 4);

  RunConfig other = r;
  other.dataset.clear();  // stream data has a different manifest
  CHECK_THROWS_AS(cmd_train(other, log), DataError);
}

TEST_CASE("eval reports builtins and is byte-identical on re-run") {
  TempDir dir("eval");
  std::ostringstream log;
  RunConfig c = small_config(dir / "a");
  c.dag.n = 5;
  c.conditions = {"train"};
  c.policies = {"expert"};
  const auto expert = cmd_eval(c, log);
  CHECK(expert.at(0).conditions.at(0).at("reward_fraction").value == doctest::Approx(1.0).epsilon(0.1));
  const std::string csv = slurp(dir / "a/expert.csv");
  cmd_eval(c, log);
  CHECK(slurp(dir / "a/expert.csv") == csv);

  c.policies = {"value", "change", "total_corr", "partial_corr"};
  c.conditions = {"train", "eval_target"};
  const auto baselines = cmd_eval(c, log);
  CHECK(baselines.size() == 4);
  for (const auto& name : c.policies) CHECK(fs::exists(dir / ("a/" + name + ".csv")));

  c.policies = {"nobody"};
  CHECK_THROWS_AS(cmd_eval(c, log), ConfigError);
  c.policies = {"learned"};
  CHECK_THROWS_AS(cmd_eval(c, log), ConfigError);
}

TEST_CASE("eval conditions follow the linear setting") {
  RunConfig c;
  c.dag.nonlinear = false;
  c.conditions = {"eval_target", "eval_path"};
  c.resolve();
  for (const auto& cond : c.eval_conditions()) CHECK_FALSE(cond.dag.nonlinear);
}

TEST_CASE("ooo with the oracle scorer") {
  TempDir dir("ooo");
  std::ostringstream log;
  RunConfig c;
  c.out = dir / "a";
  c.oracle = true;
  c.ooo.candidates = 2;
  c.ooo.validation = 5;
  c.ooo.episodes = 100;
  c.ooo.heldout = {ooo::Dim::Texture};
  const auto result = cmd_ooo(c, log);
  CHECK(result.reports.size() == 5);  // one row per prompt variant
  for (const auto& r : result.reports) {
    CHECK(r.at("accuracy_heldout").value == 1.0);
    CHECK(r.at("accuracy_train_dims").value == 1.0);
  }
  const std::string csv = slurp(dir / "a/ooo.csv");
  CHECK(csv.find("none/holdout_texture") != std::string::npos);
  CHECK(fs::exists(dir / "a/transcripts/none_holdout_texture.txt"));
  // Held-out dimension never appears as a shot's correct dimension.
  const auto games = ooo::parse_transcript(slurp(dir / "a/transcripts/none_holdout_texture.txt"), true);
  CHECK(!games.empty());
}

TEST_CASE("analyze compares report files") {
  TempDir dir("analyze");
  std::ostringstream log;
  RunConfig c = small_config(dir / "e");
  c.dag.n = 5;
  c.conditions = {"eval_target"};
  c.policies = {"value", "change"};
  cmd_eval(c, log);
  const auto back = read_report_csv(dir / "e/value.csv");
  CHECK(back.size() == 1);
  CHECK(back[0].condition == "eval_target");
  CHECK(back[0].n_episodes == 100);

  RunConfig a;
  a.out = dir / "cmp";
  a.inputs = {dir / "e/value.csv", dir / "e/change.csv"};
  const auto table = cmd_analyze(a, log);
  CHECK(table.conditions == std::vector<std::string>{"value:eval_target", "change:eval_target"});
  CHECK(fs::exists(dir / "cmp/comparison.csv"));
  CHECK(fs::exists(dir / "cmp/comparison.svg"));
  a.inputs = {dir / "e/missing.csv"};
  CHECK_THROWS_AS(cmd_analyze(a, log), DataError);
}

TEST_CASE("exit codes") {
  TempDir dir("exit");
  CHECK(exit_code_for(ConfigError("x")) == kConfigFailure);
  CHECK(exit_code_for(DataError("x")) == kDataFailure);
  CHECK(exit_code_for(NumericError("x")) == kNumericFailure);
  CHECK(exit_code_for(TransportError("x")) == kTransportFailure);
  CHECK(exit_code_for(std::runtime_error("x")) == kFailure);

  const std::string out = " --out " + (dir / "run");
  CHECK(run_binary("gen --set gen.episodes=5 --set dag.n=3" + out) == kOk);
  CHECK(run_binary("gen --set dag.colour=3" + out) == kConfigFailure);
  CHECK(run_binary("gen --set constraint.kind=sideways" + out) == kConfigFailure);
  CHECK(run_binary("frobnicate") == kConfigFailure);
  CHECK(run_binary("train --set train.dataset=" + (dir / "nope.jsonl") + out) == kDataFailure);

  // A divergent learning rate stops training with a numeric failure.
  CHECK(run_binary("train --set dag.n=3 --set net.hidden=8 --set train.batch_size=4 --set train.steps=50"
                   " --set train.eval_episodes=0 --set train.learning_rate=1e300" + out) == kNumericFailure);

  const std::string tiny = " --oracle --set ooo.episodes=1 --set ooo.candidates=1 --set ooo.validation=1"
                           " --set ooo.heldout=color --set ooo.variants=none" + out;
  CHECK(run_binary("ooo" + tiny) == kOk);
  const std::string http = " --set ooo.episodes=1 --set ooo.candidates=1 --set ooo.validation=1"
                           " --set ooo.heldout=color --set ooo.variants=none" + out;
  CHECK(run_binary("ooo" + http, "env -u PASSIVE_SCORER_URL") == kConfigFailure);
  CHECK(run_binary("ooo" + http, "PASSIVE_SCORER_URL=http://127.0.0.1:1") == kTransportFailure);
}
