#pragma once

// Expert-demonstration datasets: episode sampling under the constraint
// splits, a line-oriented JSON file format, streaming generation for the
// infinite-data regime, and held-out relevance masks for adaptive splits.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "passive/env.hpp"
#include "passive/scm.hpp"

namespace passive {

constexpr int kDatasetFormatVersion = 1;
inline constexpr const char* kDatasetFormatName = "passive-causal-dataset";

struct DatasetManifest {
  DagConfig dag;
  EpisodeConfig episode;
  ConstraintSpec constraint;
  std::uint64_t master_seed = 0;
  std::optional<std::int64_t> episode_count;  // unset = unbounded stream
  int format_version = kDatasetFormatVersion;

  void validate() const;
  int steps_per_episode() const { return episode.resolved_exploration(dag) + episode.exploitation_steps; }
  bool operator==(const DatasetManifest&) const = default;
};

/// DAG + goal + the seed that drives the environment and expert streams.
struct EpisodeSpec {
  CausalDag dag;
  int goal = 0;
  std::uint64_t seed = 0;
};

/// Samples the DAG (Stream::Dag) and goal (Stream::Goal) for one episode seed.
/// Eval splits always cue the test goal node; adaptive splits cue a relevant node.
EpisodeSpec sample_episode_spec(const DagConfig& dag, const ConstraintSpec& constraint, std::uint64_t seed);

struct TrajectoryStep {
  Observation observation;  // what the expert acted on
  int action = 0;
  double reward = 0.0;
  bool operator==(const TrajectoryStep&) const = default;
};

struct TrajectoryRecord {
  std::int64_t episode_id = 0;
  std::uint64_t seed = 0;
  ConstraintKind constraint = ConstraintKind::Unconstrained;
  CausalDag dag;
  int goal = 0;
  std::vector<TrajectoryStep> steps;
  bool operator==(const TrajectoryRecord&) const = default;
};

/// Runs the expert through one episode. Deterministic in (dag, goal, config, seed).
std::vector<TrajectoryStep> run_expert_episode(const CausalDag& dag, int goal, const EpisodeConfig& config,
                                               std::uint64_t seed);
TrajectoryRecord make_record(const DatasetManifest& manifest, std::int64_t episode_id);

/// Infinite, deterministic sequence of expert records (episode ids 0, 1, 2, ...).
class EpisodeStream {
 public:
  explicit EpisodeStream(DatasetManifest manifest, std::int64_t first_id = 0)
      : manifest_(std::move(manifest)), next_id_(first_id) {}
  TrajectoryRecord next() { return make_record(manifest_, next_id_++); }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  std::int64_t next_id_;
};

struct GenerationSummary {
  std::int64_t records = 0;
  std::int64_t steps = 0;
  std::int64_t constraint_violations = 0;
};

/// Calls `sink` for each record in id order; stops early when it returns false.
/// With no episode_count the stream is unbounded and only `sink` can stop it.
GenerationSummary generate_dataset(const DatasetManifest& manifest,
                                   const std::function<bool(const TrajectoryRecord&)>& sink, int jobs = 1);
/// Writes the header line and `episode_count` record lines. Throws DataError on write failure.
GenerationSummary generate_dataset(const DatasetManifest& manifest, std::ostream& out, int jobs = 1);

class DatasetReader {
 public:
  /// Reads and checks the header line; throws DataError on malformed header or version mismatch.
  explicit DatasetReader(std::istream& in);
  const DatasetManifest& manifest() const { return manifest_; }
  /// Next validated record; DataError naming the line on malformed input.
  std::optional<TrajectoryRecord> next();
  std::vector<TrajectoryRecord> read_all();

 private:
  std::istream& in_;
  DatasetManifest manifest_;
  std::int64_t line_ = 1;
};

std::vector<TrajectoryRecord> read_dataset_file(const std::string& path, DatasetManifest* manifest = nullptr);

/// Deterministically holds out ceil(fraction * C(n, k)) of the k-of-n masks,
/// ranked by a seeded hash of the mask bits.
std::set<std::uint64_t> heldout_masks(int n, int k, double fraction, std::uint64_t seed);
std::vector<std::uint64_t> all_masks(int n, int k);

// JSON mapping (also used for checkpoints and resolved configs).
nlohmann::json to_json(const DagConfig& c);
nlohmann::json to_json(const EpisodeConfig& c);
nlohmann::json to_json(const ConstraintSpec& c);
nlohmann::json to_json(const DatasetManifest& m);
nlohmann::json to_json(const CausalDag& dag);
nlohmann::json to_json(const Observation& obs);
nlohmann::json to_json(const TrajectoryRecord& r);
DagConfig dag_config_from_json(const nlohmann::json& j);
EpisodeConfig episode_config_from_json(const nlohmann::json& j);
ConstraintSpec constraint_from_json(const nlohmann::json& j);
DatasetManifest manifest_from_json(const nlohmann::json& j);
CausalDag dag_from_json(const nlohmann::json& j);
Observation observation_from_json(const nlohmann::json& j);
TrajectoryRecord record_from_json(const nlohmann::json& j);

std::string header_line(const DatasetManifest& manifest);
std::string record_line(const TrajectoryRecord& record);
/// FNV-1a of the manifest's canonical JSON, as 16 hex digits.
std::string manifest_hash(const DatasetManifest& manifest);
void write_manifest_file(const DatasetManifest& manifest, const std::string& path);
DatasetManifest read_manifest_file(const std::string& path);

/// Checks record invariants against the manifest; throws DataError.
void validate_record(const TrajectoryRecord& record, const DatasetManifest& manifest);

}  // namespace passive
