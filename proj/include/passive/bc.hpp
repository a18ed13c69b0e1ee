#pragma once

// Behavioral cloning: a sequence policy over episode features with either a
// GRU memory or one causal self-attention layer, hand-written backpropagation,
// Adam, global-norm clipping, checkpoints and a metric log.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "passive/dataset.hpp"
#include "passive/env.hpp"
#include "passive/policies.hpp"

namespace passive {

enum class Memory { Gru, Attention };
std::string memory_name(Memory m);
Memory parse_memory(const std::string& s);  // ConfigError on unknown names

struct NetConfig {
  int n = 5;
  bool adaptive = false;
  Memory memory = Memory::Attention;
  int hidden = 64;             // recurrent width, or model width for attention
  int encoder = 64;            // GRU input projection width
  int heads = 4;               // attention heads; must divide hidden
  int horizon = 6;             // longest sequence the policy accepts
  double input_scale = 0.25;   // features are multiplied by this before the encoder
  double head_init_scale = 0.1;

  int input_width() const { return feature_width(n, adaptive); }
  int num_actions() const { return 2 * n; }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

/// Network config matching a dataset manifest (n, cue width, episode length).
NetConfig net_config_for(const DatasetManifest& manifest, int hidden = 64);

/// Padded batch: inputs[t] is (input_width x B); targets/mask are [t][b].
struct Batch {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<std::vector<int>> targets;
  std::vector<std::vector<double>> mask;
  std::vector<std::vector<bool>> exploit;  // steps scored for exploit accuracy

  int size() const { return inputs.empty() ? 0 : static_cast<int>(inputs.front().cols()); }
  int length() const { return static_cast<int>(inputs.size()); }
};

enum class LossMask { All, ExploitOnly };
std::string loss_mask_name(LossMask m);
LossMask parse_loss_mask(const std::string& s);

/// One demonstration as network inputs: per step features (unscaled) and the expert action.
struct Example {
  std::vector<std::vector<double>> features;
  std::vector<int> actions;
  std::vector<bool> exploit;  // goal cue visible at this step
};

Example to_example(const TrajectoryRecord& record);
Batch make_batch(const std::vector<const Example*>& examples, LossMask mask = LossMask::All);

struct LossStats {
  double loss = 0.0;        // mean NLL over unmasked steps
  double weight = 0.0;      // sum of mask weights
  int exploit_correct = 0;  // argmax == target on exploit steps
  int exploit_total = 0;
};

/// Per-episode inference state.
struct MemoryState {
  int t = 0;
  Eigen::VectorXd h;             // GRU hidden state
  Eigen::MatrixXd keys, values;  // attention cache, one column per past step
};

class PolicyNet {
 public:
  PolicyNet(NetConfig config, std::uint64_t seed);
  PolicyNet(NetConfig config, Eigen::VectorXd params);

  const NetConfig& config() const { return config_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& params() { return params_; }
  Eigen::Index num_params() const { return params_.size(); }
  static Eigen::Index count_params(const NetConfig& config);

  /// Mean masked NLL of the batch; fills `grad` (same size as params) when given.
  LossStats loss(const Batch& batch, Eigen::VectorXd* grad = nullptr) const;

  /// Logits for every step of the batch, (num_actions x B) per step.
  std::vector<Eigen::MatrixXd> forward(const Batch& batch) const;

  /// One step of a single sequence; advances `state` and returns the logits.
  /// DataError once the sequence exceeds the horizon.
  Eigen::VectorXd step(const std::vector<double>& features, MemoryState& state) const;
  MemoryState initial_state() const;

 private:
  NetConfig config_;
  Eigen::VectorXd params_;
};

/// Index of the largest logit; the lowest index wins ties.
int greedy_action(const Eigen::VectorXd& logits);

/// Greedy policy over a network; one instance per episode.
class LearnedPolicy final : public Policy {
 public:
  explicit LearnedPolicy(std::shared_ptr<const PolicyNet> net) : net_(std::move(net)), state_(net_->initial_state()) {}
  /// Throws DataError once the episode exceeds the network horizon.
  Action act(const Observation& obs) override;
  std::string name() const override { return "learned"; }
  const Eigen::VectorXd& last_logits() const { return logits_; }

 private:
  std::shared_ptr<const PolicyNet> net_;
  MemoryState state_;
  Eigen::VectorXd logits_;
};

enum class LrSchedule { Constant, Cosine };
std::string schedule_name(LrSchedule s);
LrSchedule parse_schedule(const std::string& s);

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 2e-3;
  LrSchedule lr_schedule = LrSchedule::Cosine;  // cosine decays to zero at total_steps
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 10.0;
  std::int64_t total_steps = 40000;
  std::int64_t eval_every = 500;
  std::uint64_t seed = 0;
  LossMask loss_mask = LossMask::All;

  void validate() const;
  /// Learning rate of update number `step` (1-based).
  double rate_at(std::int64_t step) const;
  bool operator==(const TrainConfig&) const = default;
};

struct Checkpoint {
  NetConfig net;
  TrainConfig train;
  Eigen::VectorXd params;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  std::int64_t step = 0;
  std::string manifest_hash;
};

constexpr int kCheckpointVersion = 1;
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
nlohmann::json to_json(const NetConfig& c);
nlohmann::json to_json(const TrainConfig& c);
NetConfig net_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Supplies the batch for a given update step, so resumed runs see the same data.
class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual Batch batch(std::int64_t step, int batch_size, LossMask mask) = 0;
  virtual const DatasetManifest& manifest() const = 0;
};

/// Finite dataset, reshuffled every epoch by a seeded permutation.
class DatasetSource final : public ExampleSource {
 public:
  DatasetSource(DatasetManifest manifest, const std::vector<TrajectoryRecord>& records, std::uint64_t seed);
  Batch batch(std::int64_t step, int batch_size, LossMask mask) override;
  const DatasetManifest& manifest() const override { return manifest_; }
  std::size_t size() const { return examples_.size(); }

 private:
  const std::vector<std::size_t>& epoch_order(std::int64_t epoch);

  DatasetManifest manifest_;
  std::vector<Example> examples_;
  std::uint64_t seed_;
  std::int64_t cached_epoch_ = -1;
  std::vector<std::size_t> order_;
};

/// Infinite-data regime: update k uses fresh episodes k*B .. k*B+B-1 of the stream.
class StreamSource final : public ExampleSource {
 public:
  explicit StreamSource(DatasetManifest manifest) : manifest_(std::move(manifest)) {}
  Batch batch(std::int64_t step, int batch_size, LossMask mask) override;
  const DatasetManifest& manifest() const override { return manifest_; }

 private:
  DatasetManifest manifest_;
};

struct MetricRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double exploit_accuracy = 0.0;
  double grad_norm = 0.0;
  std::vector<double> extra;
};

/// Periodic evaluation attached to the metric log.
struct EvalHook {
  std::vector<std::string> names;
  std::function<std::vector<double>(const PolicyNet&)> run;
};

std::string metric_header(const EvalHook* hook);
std::string metric_line(const MetricRow& row);

class Trainer {
 public:
  Trainer(NetConfig net, TrainConfig train, std::string manifest_hash);
  explicit Trainer(const Checkpoint& resume);

  /// One Adam update; returns the batch statistics. NumericError on a non-finite loss or gradient.
  LossStats update(const Batch& batch);
  /// Runs until `train.total_steps`, appending one CSV line to `log` every eval_every steps.
  std::vector<MetricRow> run(ExampleSource& source, std::ostream* log = nullptr, const EvalHook* hook = nullptr);

  Checkpoint checkpoint() const;
  const PolicyNet& net() const { return net_; }
  std::int64_t step() const { return step_; }
  double last_grad_norm() const { return last_grad_norm_; }
  double last_clipped_norm() const { return last_clipped_norm_; }
  const TrainConfig& config() const { return train_; }
  TrainConfig& config() { return train_; }

 private:
  PolicyNet net_;
  TrainConfig train_;
  std::string manifest_hash_;
  Eigen::VectorXd m_, v_;
  std::int64_t step_ = 0;
  double last_grad_norm_ = 0.0;
  double last_clipped_norm_ = 0.0;
};

/// Checks that `source` produces episodes this network can consume; DataError otherwise.
void check_compatible(const NetConfig& net, const DatasetManifest& manifest);

/// Scales `grad` in place so its L2 norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(Eigen::VectorXd& grad, double max_norm);

struct GradientCheckReport {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  Eigen::Index checked = 0;
  bool passed = false;
};

/// Central finite differences against the analytic gradient on every parameter.
GradientCheckReport gradient_check(const PolicyNet& net, const Batch& batch, double tolerance = 1e-4,
                                   double eps = 1e-5);

}  // namespace passive
