#include "passive/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <istream>
#include <ostream>
#include <sstream>

#include "passive/error.hpp"
#include "passive/policies.hpp"

namespace passive {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad field '") + key + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? field<T>(j, key) : fallback;
}

std::vector<double> vec_or_empty(const json& j, const char* key) {
  return j.contains(key) ? field<std::vector<double>>(j, key) : std::vector<double>{};
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void DatasetManifest::validate() const {
  dag.validate();
  episode.validate();
  constraint.validate(dag);
  if (episode_count && *episode_count <= 0) throw ConfigError("episode_count must be positive");
  if (format_version != kDatasetFormatVersion) {
    throw ConfigError("unsupported dataset format version " + std::to_string(format_version));
  }
}

EpisodeSpec sample_episode_spec(const DagConfig& config, const ConstraintSpec& constraint, std::uint64_t seed) {
  EpisodeSpec spec;
  spec.seed = seed;
  Rng dag_rng = make_rng(seed, Stream::Dag);
  spec.dag = sample_dag(config, constraint, dag_rng);
  if (constraint.is_eval()) {
    spec.goal = constraint.test_goal_node;
  } else {
    Rng goal_rng = make_rng(seed, Stream::Goal);
    const auto candidates = spec.dag.relevant_nodes();
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    spec.goal = candidates[pick(goal_rng)];
  }
  return spec;
}

std::vector<TrajectoryStep> run_expert_episode(const CausalDag& dag, int goal, const EpisodeConfig& config,
                                               std::uint64_t seed) {
  Environment env(config);
  ExpertPolicy expert(dag, goal, make_rng(seed, Stream::Policy));
  Observation obs = env.reset(dag, goal, make_rng(seed, Stream::Environment));
  std::vector<TrajectoryStep> steps;
  steps.reserve(env.total_steps());
  while (!env.done()) {
    const Action a = expert.act(obs);
    auto result = env.step(a);
    steps.push_back({std::move(obs), a.index, result.reward});
    obs = std::move(result.observation);
  }
  return steps;
}

TrajectoryRecord make_record(const DatasetManifest& manifest, std::int64_t episode_id) {
  TrajectoryRecord r;
  r.episode_id = episode_id;
  r.seed = derive_seed(manifest.master_seed, static_cast<std::uint64_t>(episode_id));
  r.constraint = manifest.constraint.kind;
  auto spec = sample_episode_spec(manifest.dag, manifest.constraint, r.seed);
  r.dag = std::move(spec.dag);
  r.goal = spec.goal;
  r.steps = run_expert_episode(r.dag, r.goal, manifest.episode, r.seed);
  return r;
}

GenerationSummary generate_dataset(const DatasetManifest& manifest,
                                   const std::function<bool(const TrajectoryRecord&)>& sink, int jobs) {
  manifest.validate();
  jobs = std::max(1, jobs);
  GenerationSummary summary;
  const std::int64_t total = manifest.episode_count.value_or(-1);
  const std::int64_t block = 16 * static_cast<std::int64_t>(jobs);
  for (std::int64_t start = 0; total < 0 || start < total; start += block) {
    const std::int64_t end = total < 0 ? start + block : std::min(total, start + block);
    std::vector<TrajectoryRecord> batch(end - start);
    if (jobs == 1) {
      for (std::int64_t id = start; id < end; ++id) batch[id - start] = make_record(manifest, id);
    } else {
      std::vector<std::future<void>> workers;
      for (int w = 0; w < jobs; ++w) {
        workers.push_back(std::async(std::launch::async, [&, w] {
          for (std::int64_t id = start + w; id < end; id += jobs) batch[id - start] = make_record(manifest, id);
        }));
      }
      for (auto& f : workers) f.get();
    }
    for (const auto& r : batch) {
      if (!satisfies(r.dag, manifest.constraint)) ++summary.constraint_violations;
      ++summary.records;
      summary.steps += static_cast<std::int64_t>(r.steps.size());
      if (!sink(r)) return summary;
    }
  }
  return summary;
}

GenerationSummary generate_dataset(const DatasetManifest& manifest, std::ostream& out, int jobs) {
  if (!manifest.episode_count) throw ConfigError("writing a dataset file requires episode_count");
  manifest.validate();
  out << header_line(manifest) << '\n';
  if (!out) throw DataError("failed writing dataset header");
  return generate_dataset(
      manifest,
      [&](const TrajectoryRecord& r) {
        out << record_line(r) << '\n';
        if (!out) throw DataError("failed writing record " + std::to_string(r.episode_id));
        return true;
      },
      jobs);
}

// ---- JSON mapping ----

json to_json(const DagConfig& c) {
  json j;
  j["n"] = c.n;
  j["num_relevant"] = c.num_relevant ? json(*c.num_relevant) : json(nullptr);
  j["nonlinear"] = c.nonlinear;
  j["leak"] = c.leak;
  j["weight_low"] = c.weight_low;
  j["weight_high"] = c.weight_high;
  j["noise_mean"] = c.noise_mean;
  j["noise_std"] = c.noise_std;
  j["intervention_magnitude"] = c.intervention_magnitude;
  return j;
}

DagConfig dag_config_from_json(const json& j) {
  DagConfig c;
  c.n = field<int>(j, "n");
  if (j.contains("num_relevant") && !j["num_relevant"].is_null()) c.num_relevant = field<int>(j, "num_relevant");
  c.nonlinear = field_or(j, "nonlinear", c.nonlinear);
  c.leak = field_or(j, "leak", c.leak);
  c.weight_low = field_or(j, "weight_low", c.weight_low);
  c.weight_high = field_or(j, "weight_high", c.weight_high);
  c.noise_mean = field_or(j, "noise_mean", c.noise_mean);
  c.noise_std = field_or(j, "noise_std", c.noise_std);
  c.intervention_magnitude = field_or(j, "intervention_magnitude", c.intervention_magnitude);
  return c;
}

json to_json(const EpisodeConfig& c) {
  return {{"exploration_steps", c.exploration_steps}, {"exploitation_steps", c.exploitation_steps}};
}

EpisodeConfig episode_config_from_json(const json& j) {
  EpisodeConfig c;
  c.exploration_steps = field_or(j, "exploration_steps", c.exploration_steps);
  c.exploitation_steps = field_or(j, "exploitation_steps", c.exploitation_steps);
  return c;
}

json to_json(const ConstraintSpec& c) {
  return {{"kind", to_string(c.kind)},
          {"test_intervention_node", c.test_intervention_node},
          {"test_goal_node", c.test_goal_node},
          {"heldout_subsets", std::vector<std::uint64_t>(c.heldout_subsets.begin(), c.heldout_subsets.end())}};
}

ConstraintSpec constraint_from_json(const json& j) {
  ConstraintSpec c;
  try {
    c.kind = constraint_kind_from_string(field<std::string>(j, "kind"));
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  c.test_intervention_node = field_or(j, "test_intervention_node", c.test_intervention_node);
  c.test_goal_node = field_or(j, "test_goal_node", c.test_goal_node);
  for (auto m : field_or(j, "heldout_subsets", std::vector<std::uint64_t>{})) c.heldout_subsets.insert(m);
  return c;
}

json to_json(const DatasetManifest& m) {
  return {{"format_version", m.format_version},
          {"dag", to_json(m.dag)},
          {"episode", to_json(m.episode)},
          {"constraint", to_json(m.constraint)},
          {"master_seed", m.master_seed},
          {"episode_count", m.episode_count ? json(*m.episode_count) : json(nullptr)}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.format_version = field<int>(j, "format_version");
  m.dag = dag_config_from_json(field<json>(j, "dag"));
  m.episode = episode_config_from_json(field<json>(j, "episode"));
  m.constraint = constraint_from_json(field<json>(j, "constraint"));
  m.master_seed = field<std::uint64_t>(j, "master_seed");
  if (j.contains("episode_count") && !j["episode_count"].is_null()) {
    m.episode_count = field<std::int64_t>(j, "episode_count");
  }
  return m;
}

json to_json(const CausalDag& dag) {
  std::vector<int> relevant(dag.relevant.begin(), dag.relevant.end());
  return {{"order", dag.order},         {"parents", dag.parents},   {"weights", dag.weights},
          {"noise_var", dag.noise_var}, {"relevant", relevant},     {"nonlinear", dag.nonlinear},
          {"leak", dag.leak},           {"magnitude", dag.magnitude}, {"adaptive", dag.adaptive}};
}

CausalDag dag_from_json(const json& j) {
  CausalDag dag;
  dag.order = field<std::vector<int>>(j, "order");
  dag.parents = field<std::vector<std::vector<int>>>(j, "parents");
  dag.weights = field<std::vector<std::vector<double>>>(j, "weights");
  dag.noise_var = field<std::vector<double>>(j, "noise_var");
  for (int r : field<std::vector<int>>(j, "relevant")) dag.relevant.push_back(r != 0);
  dag.nonlinear = field<bool>(j, "nonlinear");
  dag.leak = field<double>(j, "leak");
  dag.magnitude = field<double>(j, "magnitude");
  dag.adaptive = field_or(j, "adaptive", false);
  dag.validate();
  return dag;
}

json to_json(const Observation& obs) {
  json j = {{"prev_values", obs.prev_values},
            {"prev_intervention", obs.prev_intervention},
            {"post_values", obs.post_values},
            {"init_values", obs.init_values},
            {"goal_cue", obs.goal_cue}};
  if (!obs.relevance_cue.empty()) j["relevance_cue"] = obs.relevance_cue;
  return j;
}

Observation observation_from_json(const json& j) {
  Observation obs;
  obs.prev_values = field<std::vector<double>>(j, "prev_values");
  obs.prev_intervention = field<std::vector<double>>(j, "prev_intervention");
  obs.post_values = field<std::vector<double>>(j, "post_values");
  obs.init_values = field<std::vector<double>>(j, "init_values");
  obs.goal_cue = field<std::vector<double>>(j, "goal_cue");
  obs.relevance_cue = vec_or_empty(j, "relevance_cue");
  return obs;
}

json to_json(const TrajectoryRecord& r) {
  json steps = json::array();
  for (const auto& s : r.steps) steps.push_back({{"obs", to_json(s.observation)}, {"action", s.action}, {"reward", s.reward}});
  return {{"episode_id", r.episode_id}, {"seed", r.seed},  {"constraint", to_string(r.constraint)},
          {"goal", r.goal},             {"dag", to_json(r.dag)}, {"steps", std::move(steps)}};
}

TrajectoryRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataError("record is not an object");
  TrajectoryRecord r;
  r.episode_id = field<std::int64_t>(j, "episode_id");
  r.seed = field<std::uint64_t>(j, "seed");
  try {
    r.constraint = constraint_kind_from_string(field<std::string>(j, "constraint"));
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  r.goal = field<int>(j, "goal");
  r.dag = dag_from_json(field<json>(j, "dag"));
  for (const auto& s : field<json>(j, "steps")) {
    r.steps.push_back({observation_from_json(field<json>(s, "obs")), field<int>(s, "action"), field<double>(s, "reward")});
  }
  return r;
}

std::string header_line(const DatasetManifest& manifest) {
  json j = {{"format", kDatasetFormatName}, {"manifest", to_json(manifest)}};
  return j.dump();
}

std::string record_line(const TrajectoryRecord& record) { return to_json(record).dump(); }

std::string manifest_hash(const DatasetManifest& manifest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(manifest).dump())));
  return buf;
}

void write_manifest_file(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  out << to_json(manifest).dump(2) << '\n';
  if (!out) throw DataError("cannot write manifest " + path);
}

DatasetManifest read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path + ": " + e.what());
  }
}

void validate_record(const TrajectoryRecord& r, const DatasetManifest& m) {
  const int n = m.dag.n;
  if (r.dag.size() != n) throw DataError("dag has " + std::to_string(r.dag.size()) + " nodes, manifest says " + std::to_string(n));
  if (r.constraint != m.constraint.kind) throw DataError("record constraint differs from manifest");
  if (r.goal < 0 || r.goal >= n || !r.dag.relevant[r.goal]) throw DataError("invalid goal " + std::to_string(r.goal));
  const int expected = m.episode.resolved_exploration(r.dag) + m.episode.exploitation_steps;
  if (static_cast<int>(r.steps.size()) != expected) {
    throw DataError("record has " + std::to_string(r.steps.size()) + " steps, expected " + std::to_string(expected));
  }
  const std::size_t cue = r.dag.adaptive ? static_cast<std::size_t>(n) : 0;
  for (const auto& s : r.steps) {
    if (s.action < 0 || s.action >= 2 * n) throw DataError("action index " + std::to_string(s.action) + " out of range");
    const auto& o = s.observation;
    for (const auto* v : {&o.prev_values, &o.prev_intervention, &o.post_values, &o.init_values, &o.goal_cue}) {
      if (v->size() != static_cast<std::size_t>(n)) throw DataError("observation width mismatch");
    }
    if (o.relevance_cue.size() != cue) throw DataError("relevance cue width mismatch");
    if (!std::isfinite(s.reward)) throw DataError("non-finite reward");
  }
}

// ---- reading ----

DatasetReader::DatasetReader(std::istream& in) : in_(in) {
  std::string line;
  if (!std::getline(in_, line) || line.empty()) throw DataError("line 1: missing dataset header");
  try {
    auto j = json::parse(line);
    if (j.value("format", "") != kDatasetFormatName) throw DataError("line 1: not a dataset header");
    const int version = field<int>(field<json>(j, "manifest"), "format_version");
    if (version != kDatasetFormatVersion) {
      throw DataError("line 1: format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kDatasetFormatVersion) + ")");
    }
    manifest_ = manifest_from_json(j["manifest"]);
  } catch (const json::exception& e) {
    throw DataError(std::string("line 1: malformed header: ") + e.what());
  } catch (const DataError& e) {
    const std::string what = e.what();
    throw DataError(what.rfind("line 1", 0) == 0 ? what : "line 1: " + what);
  }
}

std::optional<TrajectoryRecord> DatasetReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_) + ": ";
    try {
      auto r = record_from_json(json::parse(line));
      validate_record(r, manifest_);
      return r;
    } catch (const json::exception& e) {
      throw DataError(where + "malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  return std::nullopt;
}

std::vector<TrajectoryRecord> DatasetReader::read_all() {
  std::vector<TrajectoryRecord> out;
  while (auto r = next()) out.push_back(std::move(*r));
  return out;
}

std::vector<TrajectoryRecord> read_dataset_file(const std::string& path, DatasetManifest* manifest) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path);
  DatasetReader reader(in);
  if (manifest) *manifest = reader.manifest();
  return reader.read_all();
}

// ---- held-out masks ----

std::vector<std::uint64_t> all_masks(int n, int k) {
  if (n < 1 || n > 63 || k < 1 || k > n) throw ConfigError("invalid mask shape");
  std::vector<std::uint64_t> masks;
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << n); ++m) {
    if (std::popcount(m) == k) masks.push_back(m);
  }
  return masks;
}

std::set<std::uint64_t> heldout_masks(int n, int k, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("held-out fraction must be in (0, 1)");
  auto masks = all_masks(n, k);
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(masks.size()) - 1e-9));
  const std::uint64_t salt = mix64(seed);
  std::stable_sort(masks.begin(), masks.end(), [&](std::uint64_t a, std::uint64_t b) {
    const auto ha = mix64(a ^ salt), hb = mix64(b ^ salt);
    return ha != hb ? ha < hb : a < b;
  });
  return {masks.begin(), masks.begin() + static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, count))};
}

}  // namespace passive
