#pragma once

// Text odd-one-out task: episodes over three objects with colour, shape and
// texture, an expert that experiments then exploits, a transcript renderer
// and parser, and evaluation of a continuation scorer through few-shot prompts.

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "passive/eval.hpp"
#include "passive/rng.hpp"

namespace passive::ooo {

enum class Dim { Color = 0, Shape = 1, Texture = 2 };
constexpr std::array<Dim, 3> kDims = {Dim::Color, Dim::Shape, Dim::Texture};

std::string dim_name(Dim d);
Dim parse_dim(const std::string& s);  // ConfigError on unknown names
const std::vector<std::string>& vocabulary(Dim d);

struct Object {
  std::string color, shape, texture;

  const std::string& get(Dim d) const;
  std::string& get(Dim d);
  bool operator==(const Object&) const = default;
};

using Objects = std::array<Object, 3>;

/// Index of the object whose value on `d` no other object shares, or -1.
int unique_along(const Objects& objects, Dim d);
/// Reward rule: the chosen object is the only one with its value on `correct`.
bool rewarded(const Objects& objects, int choice, Dim correct);

struct Trial {
  Objects objects;           // as presented, before any transformation
  bool final = false;
  int choice = -1;           // 0..2 for A..C
  std::optional<Dim> transformed;  // experiment trials only
  std::string new_value;
  bool rewarded = false;
  std::string explanation;   // text after "Explanation: "
  std::string reasoning;     // text after "Reasoning: Let's think step by step. "
  bool operator==(const Trial&) const = default;
};

struct Episode {
  Dim correct = Dim::Color;
  std::uint64_t seed = 0;    // drives attribute transformations
  std::vector<Trial> trials;  // three experiment trials, then the final trial
  bool operator==(const Episode&) const = default;
};

constexpr int kExperimentTrials = 3;

/// Dimensions an episode's correct dimension is drawn from.
struct SampleConfig {
  std::vector<Dim> dims = {Dim::Color, Dim::Shape, Dim::Texture};
  void validate() const;
};

/// Unscripted episode: objects for every trial, no actions yet.
Episode sample_episode(const SampleConfig& config, Rng& rng);

/// A token for `d` that none of the three objects currently holds.
std::string transform_attribute(const Objects& objects, Dim d, Rng& rng);
/// The deterministic transformation of trial `trial` in an episode with this seed.
std::string transform_for(std::uint64_t episode_seed, int trial, const Objects& objects, Dim d);

enum class ExpertMode { Fixed, Varied };
ExpertMode parse_expert_mode(const std::string& s);
std::string expert_mode_name(ExpertMode m);

/// Expert actions, rewards, explanations and final reasoning.
Episode expert_script(Episode episode, ExpertMode mode);

// Explanation and reasoning templates.
std::string failure_explanation(Dim d);
std::string success_explanation(Dim d);
std::string final_explanation(Dim d);
std::string final_reasoning(const Objects& objects, Dim correct);

struct RenderFlags {
  bool explanations = true;
  bool reasoning = true;
  bool instruction = false;
  bool operator==(const RenderFlags&) const = default;
};

enum class Variant { ExplanationsReasoning, Explanations, Reasoning, None, Instruction };
const std::vector<Variant>& all_variants();
std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);
RenderFlags flags_for(Variant v);

extern const char* const kInstruction;
extern const char* const kSeparator;  // line of equals signs between games
extern const char* const kReasoningPrefix;

// Transcript fragments shared by the renderer and the interactive protocol.
std::string render_header(const RenderFlags& flags);
std::string render_objects(const Objects& objects);
std::string letter(int index);

/// Byte-exact transcript of a completed episode.
std::string render(const Episode& episode, const RenderFlags& flags);

/// Inverse of render over one or more games; DataError on malformed text.
/// Trailing incomplete games are returned with whatever trials are complete
/// when `allow_partial` is set.
struct ParsedGame {
  std::vector<Trial> trials;
  bool instruction = false;
};
std::vector<ParsedGame> parse_transcript(const std::string& text, bool allow_partial = false);
/// Rebuilds the episode (seed unknown, set to 0) from a complete parsed game.
Episode episode_from_game(const ParsedGame& game);

class Scorer {
 public:
  virtual ~Scorer() = default;
  /// One score per candidate continuation; higher is more likely.
  virtual std::vector<double> score(const std::string& prompt, const std::vector<std::string>& candidates) = 0;
  /// Text continuing the prompt, ending before the first occurrence of `stop`.
  virtual std::string generate(const std::string& prompt, const std::string& stop) = 0;
};

/// Rule-following stand-in: reads the reward history of the last game in the
/// prompt, probes colour, shape, texture in order and picks the odd one out
/// along the dimension it has identified.
class OracleScorer final : public Scorer {
 public:
  std::vector<double> score(const std::string& prompt, const std::vector<std::string>& candidates) override;
  std::string generate(const std::string& prompt, const std::string& stop) override;
};

/// Prefers the first candidate and generates nothing.
class FirstOptionScorer final : public Scorer {
 public:
  std::vector<double> score(const std::string&, const std::vector<std::string>& candidates) override;
  std::string generate(const std::string&, const std::string&) override { return ""; }
};

/// Blocks while `limit` calls are already in flight.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit);
  void acquire();
  void release();
  int peak() const { return peak_; }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int limit_;
  int active_ = 0;
  int peak_ = 0;
};

struct HttpScorerConfig {
  std::string url;             // scheme://host:port
  std::string token;           // sent as a bearer token when non-empty
  std::string score_path = "/score";
  std::string generate_path = "/generate";
  double timeout_seconds = 30.0;
  int retries = 3;
  int max_in_flight = 4;
  double top_p = 0.8;
  double temperature = 1.0;
  std::string log_path;        // append-only JSON lines; empty disables logging

  /// url from PASSIVE_SCORER_URL, token from PASSIVE_SCORER_TOKEN; ConfigError when the url is unset.
  static HttpScorerConfig from_env();
};

/// Client for an external language-model scorer:
///   POST score_path    {"prompt", "candidates"}                  -> {"scores": [...]}
///   POST generate_path {"prompt", "stop", "top_p", "temperature"} -> {"text": "..."}
/// Failed calls are retried, then surface as TransportError.
class HttpScorer final : public Scorer {
 public:
  explicit HttpScorer(HttpScorerConfig config);
  ~HttpScorer() override;
  std::vector<double> score(const std::string& prompt, const std::vector<std::string>& candidates) override;
  std::string generate(const std::string& prompt, const std::string& stop) override;
  int peak_in_flight() const { return limiter_.peak(); }

 private:
  nlohmann::json post(const std::string& path, const nlohmann::json& body);
  void log(const nlohmann::json& entry);

  HttpScorerConfig config_;
  InFlightLimiter limiter_;
  std::mutex log_mutex_;
  std::atomic<std::uint64_t> next_id_{0};
};

struct PromptSpec {
  std::vector<Episode> shots;
  std::vector<Dim> allowed;
  RenderFlags flags;
  ExpertMode mode = ExpertMode::Fixed;
};

constexpr int kDefaultShots = 4;

/// Random prompt: `shots` expert episodes over the allowed dimensions.
PromptSpec sample_prompt(const std::vector<Dim>& allowed, const RenderFlags& flags, ExpertMode mode, Rng& rng,
                         int shots = kDefaultShots);
std::string prompt_text(const PromptSpec& prompt);
/// No shot is correct along `eval_dim`.
bool holdout_intact(const PromptSpec& prompt, Dim eval_dim);

struct EpisodeResult {
  std::vector<int> choices;       // object chosen on each trial
  std::vector<Dim> dimensions;    // dimension chosen on each experiment trial
  std::vector<std::string> generated;
  int experiment_rewards = 0;
  bool final_reward = false;
  std::string transcript;         // the game as played, rendered in transcript format
};

struct RunOptions {
  /// Scores options in this order of letters/dimensions; results must not depend on it.
  std::array<int, 3> option_order = {0, 1, 2};
};

/// Plays one game: the scorer picks the object and dimension of each experiment, optionally
/// writes explanations and reasoning, then picks the final object.
EpisodeResult run_episode(const PromptSpec& prompt, const Episode& skeleton, Scorer& scorer,
                          const RunOptions& options = {});

struct SelectionReport {
  std::size_t chosen = 0;
  std::vector<double> accuracy;          // per candidate, on the validation episodes
  std::vector<int> experiment_rewards;   // tie-break
};

/// Samples `candidates` prompts over `allowed`, scores each on the same `validation` episodes from
/// the allowed dimensions, and keeps the best (ties to the earlier candidate).
PromptSpec select_prompt(int candidates, int validation, const std::vector<Dim>& allowed, const RenderFlags& flags,
                         ExpertMode mode, Scorer& scorer, Rng& rng, SelectionReport* report = nullptr);

struct ExperimentConfig {
  std::vector<Variant> variants = all_variants();
  std::vector<Dim> heldout = {Dim::Color, Dim::Shape, Dim::Texture};
  ExpertMode mode = ExpertMode::Fixed;
  int episodes = 100;       // evaluation episodes per split and condition
  int candidates = 10;
  int validation = 20;
  std::uint64_t seed = 0;
  int jobs = 1;
  void validate() const;
};

struct ExperimentResult {
  std::vector<ConditionReport> reports;  // one per variant and held-out dimension
  std::vector<std::pair<std::string, std::string>> transcripts;  // condition, text
};

/// For each held-out dimension and variant: select a prompt over the other two dimensions, then
/// measure final-trial accuracy on fresh episodes of the trained dimensions and of the held-out one.
ExperimentResult run_experiment(const ExperimentConfig& config, Scorer& scorer);

}  // namespace passive::ooo
