#include "passive/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>

#include "passive/error.hpp"

namespace passive::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + xs[i];
  return s;
}

[[noreturn]] void bad_value(const std::string& field, const std::string& value, const std::string& expected) {
  throw ConfigError(field + ": expected " + expected + ", got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& field, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    bad_value(field, value, std::is_floating_point_v<T> ? "a number" : "an integer");
  }
  return out;
}

bool parse_bool(const std::string& field, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(field, value, "true or false");
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

NoiseMode parse_noise(const std::string& s) {
  if (s == "sampled") return NoiseMode::Sampled;
  if (s == "zero") return NoiseMode::Zero;
  throw ConfigError("unknown noise mode '" + s + "' (expected sampled or zero)");
}

std::string noise_name(NoiseMode m) { return m == NoiseMode::Sampled ? "sampled" : "zero"; }

struct Field {
  std::string section, key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Binds a field to an lvalue inside RunConfig through `ref`.
template <typename T, typename Ref>
Field bind(std::string section, std::string key, Ref ref) {
  const std::string name = section + "." + key;
  Field f{section, key, nullptr, nullptr};
  f.get = [ref](const RunConfig& c) -> std::string {
    const T& v = ref(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(v);
    } else if constexpr (std::is_arithmetic_v<T>) {
      return std::to_string(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else {
      return join(v);
    }
  };
  f.set = [ref, name](RunConfig& c, const std::string& value) {
    T& v = ref(c);
    if constexpr (std::is_same_v<T, bool>) {
      v = parse_bool(name, value);
    } else if constexpr (std::is_arithmetic_v<T>) {
      v = parse_number<T>(name, value);
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = value;
    } else {
      v = split_list(value);
    }
  };
  return f;
}

// Enumerations and other fields with their own text form.
Field custom(std::string section, std::string key, std::function<std::string(const RunConfig&)> get,
             std::function<void(RunConfig&, const std::string&)> set) {
  const std::string name = section + "." + key;
  auto wrapped = [set, name](RunConfig& c, const std::string& value) {
    try {
      set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  };
  return {std::move(section), std::move(key), std::move(get), wrapped};
}

#define PASSIVE_FIELD(T, section, key, expr) bind<T>(section, key, [](RunConfig& c) -> T& { return expr; })

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      PASSIVE_FIELD(std::uint64_t, "run", "seed", c.seed),
      PASSIVE_FIELD(std::string, "run", "out", c.out),
      PASSIVE_FIELD(int, "run", "jobs", c.jobs),

      PASSIVE_FIELD(int, "dag", "n", c.dag.n),
      custom(
          "dag", "num_relevant",
          [](const RunConfig& c) { return c.dag.num_relevant ? std::to_string(*c.dag.num_relevant) : "none"; },
          [](RunConfig& c, const std::string& v) {
            if (v == "none") {
              c.dag.num_relevant.reset();
            } else {
              c.dag.num_relevant = parse_number<int>("dag.num_relevant", v);
            }
          }),
      PASSIVE_FIELD(bool, "dag", "nonlinear", c.dag.nonlinear),
      PASSIVE_FIELD(double, "dag", "leak", c.dag.leak),
      PASSIVE_FIELD(double, "dag", "weight_low", c.dag.weight_low),
      PASSIVE_FIELD(double, "dag", "weight_high", c.dag.weight_high),
      PASSIVE_FIELD(double, "dag", "noise_mean", c.dag.noise_mean),
      PASSIVE_FIELD(double, "dag", "noise_std", c.dag.noise_std),
      PASSIVE_FIELD(double, "dag", "intervention_magnitude", c.dag.intervention_magnitude),

      PASSIVE_FIELD(int, "episode", "exploration_steps", c.episode.exploration_steps),
      PASSIVE_FIELD(int, "episode", "exploitation_steps", c.episode.exploitation_steps),

      custom(
          "constraint", "kind", [](const RunConfig& c) { return condition_name(c.constraint); },
          [](RunConfig& c, const std::string& v) { c.constraint = constraint_kind_from_string(v); }),
      PASSIVE_FIELD(int, "constraint", "test_intervention_node", c.test_intervention_node),
      PASSIVE_FIELD(int, "constraint", "test_goal_node", c.test_goal_node),
      PASSIVE_FIELD(double, "constraint", "heldout_fraction", c.heldout_fraction),
      PASSIVE_FIELD(std::uint64_t, "constraint", "heldout_seed", c.heldout_seed),

      PASSIVE_FIELD(std::int64_t, "gen", "episodes", c.episodes),

      custom(
          "net", "memory", [](const RunConfig& c) { return memory_name(c.net.memory); },
          [](RunConfig& c, const std::string& v) { c.net.memory = parse_memory(v); }),
      PASSIVE_FIELD(int, "net", "hidden", c.net.hidden),
      PASSIVE_FIELD(int, "net", "encoder", c.net.encoder),
      PASSIVE_FIELD(int, "net", "heads", c.net.heads),
      PASSIVE_FIELD(double, "net", "head_init_scale", c.net.head_init_scale),

      PASSIVE_FIELD(std::string, "train", "dataset", c.dataset),
      PASSIVE_FIELD(std::string, "train", "resume", c.resume),
      PASSIVE_FIELD(int, "train", "batch_size", c.train.batch_size),
      PASSIVE_FIELD(double, "train", "learning_rate", c.train.learning_rate),
      custom(
          "train", "lr_schedule", [](const RunConfig& c) { return schedule_name(c.train.lr_schedule); },
          [](RunConfig& c, const std::string& v) { c.train.lr_schedule = parse_schedule(v); }),
      PASSIVE_FIELD(double, "train", "beta1", c.train.beta1),
      PASSIVE_FIELD(double, "train", "beta2", c.train.beta2),
      PASSIVE_FIELD(double, "train", "adam_eps", c.train.adam_eps),
      PASSIVE_FIELD(double, "train", "max_grad_norm", c.train.max_grad_norm),
      PASSIVE_FIELD(std::int64_t, "train", "steps", c.train.total_steps),
      PASSIVE_FIELD(std::int64_t, "train", "eval_every", c.train.eval_every),
      PASSIVE_FIELD(std::uint64_t, "train", "seed", c.train.seed),
      custom(
          "train", "loss_mask", [](const RunConfig& c) { return loss_mask_name(c.train.loss_mask); },
          [](RunConfig& c, const std::string& v) { c.train.loss_mask = parse_loss_mask(v); }),
      PASSIVE_FIELD(std::int64_t, "train", "eval_episodes", c.train_eval_episodes),

      PASSIVE_FIELD(std::vector<std::string>, "eval", "policies", c.policies),
      PASSIVE_FIELD(std::string, "eval", "checkpoint", c.checkpoint),
      PASSIVE_FIELD(std::vector<std::string>, "eval", "conditions", c.conditions),
      PASSIVE_FIELD(std::int64_t, "eval", "episodes", c.eval_episodes),
      custom(
          "eval", "noise", [](const RunConfig& c) { return noise_name(c.noise); },
          [](RunConfig& c, const std::string& v) { c.noise = parse_noise(v); }),

      custom(
          "ooo", "variants",
          [](const RunConfig& c) {
            std::vector<std::string> names;
            for (auto v : c.ooo.variants) names.push_back(ooo::variant_name(v));
            return join(names);
          },
          [](RunConfig& c, const std::string& v) {
            c.ooo.variants.clear();
            for (const auto& name : split_list(v)) c.ooo.variants.push_back(ooo::parse_variant(name));
          }),
      custom(
          "ooo", "heldout",
          [](const RunConfig& c) {
            std::vector<std::string> names;
            for (auto d : c.ooo.heldout) names.push_back(ooo::dim_name(d));
            return join(names);
          },
          [](RunConfig& c, const std::string& v) {
            c.ooo.heldout.clear();
            for (const auto& name : split_list(v)) c.ooo.heldout.push_back(ooo::parse_dim(name));
          }),
      custom(
          "ooo", "mode", [](const RunConfig& c) { return ooo::expert_mode_name(c.ooo.mode); },
          [](RunConfig& c, const std::string& v) { c.ooo.mode = ooo::parse_expert_mode(v); }),
      PASSIVE_FIELD(int, "ooo", "episodes", c.ooo.episodes),
      PASSIVE_FIELD(int, "ooo", "candidates", c.ooo.candidates),
      PASSIVE_FIELD(int, "ooo", "validation", c.ooo.validation),
      PASSIVE_FIELD(bool, "ooo", "oracle", c.oracle),

      PASSIVE_FIELD(std::vector<std::string>, "analyze", "inputs", c.inputs),
  };
  return fields;
}

#undef PASSIVE_FIELD

void prepare_out(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (ec) throw DataError("cannot create output directory " + config.out + ": " + ec.message());
  write_text_file((fs::path(config.out) / "resolved.ini").string(), render_config(config));
}

std::string out_path(const RunConfig& config, const std::string& name) { return (fs::path(config.out) / name).string(); }

// Adds the CLI-only fields of `config` to a manifest-derived network shape.
NetConfig network_for(const RunConfig& config, const DatasetManifest& manifest) {
  NetConfig net = net_config_for(manifest, config.net.hidden);
  net.memory = config.net.memory;
  net.encoder = config.net.encoder;
  net.heads = config.net.heads;
  net.head_init_scale = config.net.head_init_scale;
  net.validate();
  return net;
}

PolicyFactory learned_factory(const std::string& checkpoint) {
  auto net = std::make_shared<const PolicyNet>([&] {
    const Checkpoint c = load_checkpoint(checkpoint);
    return PolicyNet(c.net, c.params);
  }());
  return [net](const EpisodeSpec&) { return std::make_unique<LearnedPolicy>(net); };
}

std::string safe_name(std::string s) {
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ConstraintError*>(&e)) return kConfigFailure;
  if (dynamic_cast<const DataError*>(&e)) return kDataFailure;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericFailure;
  if (dynamic_cast<const TransportError*>(&e)) return kTransportFailure;
  return kFailure;
}

RawConfig parse_ini(const std::string& text) {
  RawConfig raw;
  std::stringstream in(text);
  std::string line, section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(number);
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ConfigError(where + ": malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      raw[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (raw[section].count(key)) throw ConfigError(where + ": duplicate key " + section + "." + key);
    raw[section][key] = trim(t.substr(eq + 1));
  }
  return raw;
}

void set_field(RunConfig& config, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& f : schema()) {
    if (f.section == section && f.key == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key " + section + "." + key);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set_field(config, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
            trim(assignment.substr(eq + 1)));
}

RunConfig config_from_raw(const RawConfig& raw) {
  RunConfig config;
  for (const auto& [section, keys] : raw) {
    for (const auto& [key, value] : keys) set_field(config, section, key, value);
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream text;
  text << in.rdbuf();
  try {
    return config_from_raw(parse_ini(text.str()));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string render_config(const RunConfig& config) {
  std::string out, section;
  for (const auto& f : schema()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

int effective_jobs(int requested) {
  const char* det = std::getenv("PASSIVE_DETERMINISTIC");
  if (det && std::string(det) == "1") return 1;
  return std::max(1, requested);
}

void RunConfig::resolve() {
  if (jobs < 1) throw ConfigError("run.jobs must be positive");
  if (test_intervention_node < 0) test_intervention_node = dag.n - 2;
  if (test_goal_node < 0) test_goal_node = dag.n - 1;
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("constraint.heldout_fraction must be in [0, 1)");
  if (episodes < 0) throw ConfigError("gen.episodes must be non-negative");
  if (eval_episodes < 1) throw ConfigError("eval.episodes must be positive");
  if (train_eval_episodes < 0) throw ConfigError("train.eval_episodes must be non-negative");
  dag.validate();
  episode.validate();
  constraint_spec().validate(dag);
  train.validate();
  for (const auto& c : conditions) constraint_kind_from_string(c);
  ooo.seed = seed;
  ooo.jobs = jobs;
  ooo.validate();
}

ConstraintSpec RunConfig::constraint_spec() const {
  ConstraintSpec spec;
  spec.kind = constraint;
  spec.test_intervention_node = test_intervention_node;
  spec.test_goal_node = test_goal_node;
  if (dag.adaptive() && heldout_fraction > 0.0) {
    spec.heldout_subsets = heldout_masks(dag.n, *dag.num_relevant, heldout_fraction, heldout_seed);
  }
  return spec;
}

DatasetManifest RunConfig::manifest() const {
  DatasetManifest m;
  m.dag = dag;
  m.episode = episode;
  m.constraint = constraint_spec();
  m.master_seed = seed;
  m.episode_count = episodes;
  return m;
}

std::vector<EvalCondition> RunConfig::eval_conditions() const {
  std::vector<EvalCondition> out;
  for (const auto& name : conditions) {
    EvalCondition c = make_condition(constraint_kind_from_string(name), dag, episode);
    c.constraint.test_intervention_node = test_intervention_node;
    c.constraint.test_goal_node = test_goal_node;
    c.constraint.heldout_subsets = constraint_spec().heldout_subsets;
    c.noise = noise;
    c.validate();
    out.push_back(std::move(c));
  }
  return out;
}

GenerationSummary cmd_gen(RunConfig config, std::ostream& log) {
  config.resolve();
  prepare_out(config);
  const DatasetManifest manifest = config.manifest();
  write_manifest_file(manifest, out_path(config, "manifest.json"));
  const std::string path = out_path(config, "dataset.jsonl");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  const auto summary = generate_dataset(manifest, out, effective_jobs(config.jobs));
  out.close();
  if (!out) throw DataError("cannot write " + path);
  log << "gen: " << summary.records << " episodes, " << summary.steps << " steps, " << summary.constraint_violations
      << " constraint violations -> " << path << '\n';
  if (summary.constraint_violations != 0) throw DataError("generated data violates its constraint");
  return summary;
}

std::vector<MetricRow> cmd_train(RunConfig config, std::ostream& log) {
  config.resolve();
  prepare_out(config);
  std::unique_ptr<ExampleSource> source;
  DatasetManifest manifest;
  if (config.dataset.empty()) {
    manifest = config.manifest();
    manifest.episode_count.reset();
    source = std::make_unique<StreamSource>(manifest);
  } else {
    auto records = read_dataset_file(config.dataset, &manifest);
    source = std::make_unique<DatasetSource>(manifest, records, config.train.seed);
  }
  const std::string hash = manifest_hash(manifest);

  std::unique_ptr<Trainer> trainer;
  if (config.resume.empty()) {
    trainer = std::make_unique<Trainer>(network_for(config, manifest), config.train, hash);
  } else {
    Checkpoint c = load_checkpoint(config.resume);
    if (c.manifest_hash != hash) throw DataError("checkpoint " + config.resume + " was trained on different data");
    c.train.total_steps = config.train.total_steps;
    c.train.eval_every = config.train.eval_every;
    trainer = std::make_unique<Trainer>(c);
    log << "train: resuming at step " << trainer->step() << '\n';
  }

  EvalHook hook;
  const auto conditions = config.eval_conditions();
  const int jobs = effective_jobs(config.jobs);
  for (const auto& c : conditions) {
    hook.names.push_back(c.name + "_reward_fraction");
    hook.names.push_back(c.name + "_match_expert");
  }
  const std::int64_t n_eval = config.train_eval_episodes;
  const std::uint64_t eval_seed = derive_seed(config.seed, 0xe7a1);
  hook.run = [&](const PolicyNet& net) {
    auto shared = std::make_shared<const PolicyNet>(net);
    PolicyFactory f = [shared](const EpisodeSpec&) { return std::make_unique<LearnedPolicy>(shared); };
    std::vector<double> out;
    for (const auto& c : conditions) {
      const auto r = rollout_eval(f, c, n_eval, eval_seed, jobs);
      out.push_back(r.at("reward_fraction").value);
      out.push_back(r.at("match_expert").value);
    }
    return out;
  };

  const std::string metrics_path = out_path(config, "metrics.csv");
  std::ofstream metrics(metrics_path, trainer->step() > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path);
  const auto rows = trainer->run(*source, &metrics, n_eval > 0 ? &hook : nullptr);
  save_checkpoint(trainer->checkpoint(), out_path(config, "checkpoint.json"));

  if (!rows.empty()) {
    std::vector<Series> series = {{"exploit_accuracy", {}}};
    for (std::size_t i = 0; i < hook.names.size() && n_eval > 0; ++i) series.push_back({hook.names[i], {}});
    for (const auto& r : rows) {
      const double x = static_cast<double>(r.step);
      series[0].points.push_back({x, r.exploit_accuracy});
      for (std::size_t i = 0; i < r.extra.size(); ++i) series[i + 1].points.push_back({x, r.extra[i]});
    }
    write_text_file(out_path(config, "learning_curve.svg"), render_line_svg(series, "Training", "step", "value"));
    const auto& last = rows.back();
    log << "train: step " << last.step << " loss " << last.loss << " exploit_accuracy " << last.exploit_accuracy;
    for (std::size_t i = 0; i < last.extra.size(); ++i) log << ' ' << hook.names[i] << ' ' << last.extra[i];
    log << '\n';
  }
  return rows;
}

std::vector<EvalReport> cmd_eval(RunConfig config, std::ostream& log) {
  config.resolve();
  if (config.policies.empty()) throw ConfigError("eval.policies is empty");
  std::vector<std::pair<std::string, PolicyFactory>> policies;
  for (const auto& name : config.policies) {
    if (name == "learned") {
      if (config.checkpoint.empty()) throw ConfigError("eval.policies lists 'learned' but eval.checkpoint is empty");
      policies.emplace_back(name, learned_factory(config.checkpoint));
    } else {
      policies.emplace_back(name, builtin_policy(name));
    }
  }
  const auto conditions = config.eval_conditions();
  prepare_out(config);
  std::vector<EvalReport> reports;
  for (const auto& [name, factory] : policies) {
    auto report = rollout_eval(name, factory, conditions, config.eval_episodes, config.seed, effective_jobs(config.jobs));
    export_report(report, config.out, name);
    for (const auto& c : report.conditions) {
      log << "eval: " << name << ' ' << c.condition << " reward_fraction " << c.at("reward_fraction").value
          << " match_expert " << c.at("match_expert").value << '\n';
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

ooo::ExperimentResult cmd_ooo(RunConfig config, std::ostream& log) {
  config.resolve();
  prepare_out(config);
  std::unique_ptr<ooo::Scorer> scorer;
  if (config.oracle) {
    scorer = std::make_unique<ooo::OracleScorer>();
  } else {
    auto http = ooo::HttpScorerConfig::from_env();
    http.log_path = out_path(config, "scorer_log.jsonl");
    http.max_in_flight = std::max(1, config.jobs);
    scorer = std::make_unique<ooo::HttpScorer>(http);
  }
  auto result = ooo::run_experiment(config.ooo, *scorer);
  write_csv(result.reports, out_path(config, "ooo.csv"));
  const fs::path dir = fs::path(config.out) / "transcripts";
  fs::create_directories(dir);
  for (const auto& [condition, text] : result.transcripts) {
    write_text_file((dir / (safe_name(condition) + ".txt")).string(), text);
  }
  for (const auto& r : result.reports) {
    log << "ooo: " << r.condition << " accuracy_heldout " << r.at("accuracy_heldout").value << " accuracy_train_dims "
        << r.at("accuracy_train_dims").value << '\n';
  }
  return result;
}

std::vector<ConditionReport> read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "condition,metric,value,ci_half_width,n_episodes") {
    throw DataError(path + " is not a report CSV");
  }
  std::vector<ConditionReport> out;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    std::vector<std::string> cols;
    std::stringstream s(line);
    std::string col;
    while (std::getline(s, col, ',')) cols.push_back(col);
    if (cols.size() != 5) throw DataError(path + " line " + std::to_string(number) + ": expected 5 columns");
    try {
      if (out.empty() || out.back().condition != cols[0]) {
        out.push_back({cols[0], std::stoll(cols[4]), {}});
      }
      out.back().metrics.push_back({cols[1], {std::stod(cols[2]), std::stod(cols[3])}});
    } catch (const std::logic_error&) {
      throw DataError(path + " line " + std::to_string(number) + ": malformed number");
    }
  }
  if (out.empty()) throw DataError(path + " has no rows");
  return out;
}

ComparisonTable cmd_analyze(RunConfig config, std::ostream& log) {
  if (config.inputs.empty()) throw ConfigError("analyze.inputs is empty");
  prepare_out(config);
  std::vector<ConditionReport> reports;
  for (const auto& path : config.inputs) {
    const std::string stem = fs::path(path).stem().string();
    for (auto r : read_report_csv(path)) {
      r.condition = stem + ":" + r.condition;
      reports.push_back(std::move(r));
    }
  }
  const auto table = compare_conditions(reports);
  write_text_file(out_path(config, "comparison.csv"), to_csv(table));
  std::vector<std::string> match;
  for (const auto& m : table.metrics) {
    if (m.rfind("match_", 0) == 0) match.push_back(m);
  }
  write_text_file(out_path(config, "comparison.svg"),
                  render_bar_svg(reports, match.empty() ? table.metrics : match, "Comparison"));
  log << "analyze: " << reports.size() << " conditions, " << table.metrics.size() << " metrics\n";
  return table;
}

}  // namespace passive::cli
