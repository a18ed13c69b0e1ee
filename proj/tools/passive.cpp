#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "passive/cli.hpp"
#include "passive/error.hpp"

using namespace passive;

int main(int argc, char** argv) {
  CLI::App app{"Passive causal-strategy learning: data generation, behavioral cloning, evaluation, text prompts"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> out;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  bool oracle = false;

  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"gen", "generate an expert dataset"},
      {"train", "behavioral cloning on a dataset or the expert stream"},
      {"eval", "interactive evaluation of builtin or trained policies"},
      {"ooo", "few-shot odd-one-out evaluation through a scorer"},
      {"analyze", "compare report CSVs"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "config file ([section] key = value)");
    sub->add_option("-s,--set", overrides, "override, section.key=value (repeatable)");
    sub->add_option("-o,--out", out, "output directory (run.out)");
    sub->add_option("-j,--jobs", jobs, "worker cap (run.jobs)")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "master seed (run.seed)");
    if (name == "ooo") sub->add_flag("--oracle", oracle, "use the rule-following oracle scorer");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigFailure;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    cli::RunConfig config = config_path.empty() ? cli::RunConfig{} : cli::load_config(config_path);
    for (const auto& o : overrides) cli::apply_override(config, o);
    if (out) config.out = *out;
    if (jobs) config.jobs = *jobs;
    if (seed) config.seed = *seed;
    if (oracle) config.oracle = true;

    if (verb == "gen") {
      cli::cmd_gen(config, std::cout);
    } else if (verb == "train") {
      cli::cmd_train(config, std::cout);
    } else if (verb == "eval") {
      cli::cmd_eval(config, std::cout);
    } else if (verb == "ooo") {
      cli::cmd_ooo(config, std::cout);
    } else {
      cli::cmd_analyze(config, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "passive " << verb << ": " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return cli::kOk;
}
