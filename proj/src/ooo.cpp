#include "passive/ooo.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>
#include <utility>

#include "httplib.h"
#include "passive/error.hpp"

namespace passive::ooo {

using nlohmann::json;

const char* const kInstruction =
    "In this game, I must choose an object that is unique along the \"correct\" dimension. Before choosing an "
    "option, I can sometimes transform one of the objects to make it unique along some dimension, not "
    "necessarily the correct one:";
const char* const kSeparator = "====================";
const char* const kReasoningPrefix = "Reasoning: Let's think step by step.";

namespace {

const char* const kObjectsLine = "There is a set of three objects in front of me:";
const char* const kNewGame = "New game:";
const char* const kExplanation = "Explanation:";

template <typename T>
const T& pick(const std::vector<T>& xs, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, xs.size() - 1);
  return xs[u(rng)];
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Drops a single leading space, the separator after a cue such as "Explanation:".
std::string after_cue(const std::string& s) { return starts_with(s, " ") ? s.substr(1) : s; }

int letter_index(const std::string& s) {
  if (s == "A") return 0;
  if (s == "B") return 1;
  if (s == "C") return 2;
  return -1;
}

std::string reward_line(int choice, bool rewarded) {
  return "Choosing object " + letter(choice) + (rewarded ? " was rewarded!" : " was not rewarded.");
}

std::string transform_line(int choice, Dim d, const std::string& value) {
  return "I transform object " + letter(choice) + " into a different " + dim_name(d) + ": " + value + ".";
}

Objects apply(Objects objects, int choice, Dim d, const std::string& value) {
  objects[static_cast<std::size_t>(choice)].get(d) = value;
  return objects;
}

bool in_vocabulary(Dim d, const std::string& token) {
  const auto& v = vocabulary(d);
  return std::find(v.begin(), v.end(), token) != v.end();
}

// Dimension that the reward history of a game identifies, if any.
std::optional<Dim> identified_dimension(const std::vector<Trial>& history) {
  std::vector<Dim> ruled_out;
  for (const auto& t : history) {
    if (t.final || !t.transformed || t.choice < 0) continue;
    if (t.rewarded) return t.transformed;
    ruled_out.push_back(*t.transformed);
  }
  std::vector<Dim> open;
  for (Dim d : kDims) {
    if (std::find(ruled_out.begin(), ruled_out.end(), d) == ruled_out.end()) open.push_back(d);
  }
  if (open.size() == 1) return open.front();
  return std::nullopt;
}

int argmax_in_order(const std::vector<double>& scores, const std::array<int, 3>& order) {
  int best = order[0];
  for (int k = 1; k < 3; ++k) {
    if (scores[static_cast<std::size_t>(order[k])] > scores[static_cast<std::size_t>(best)]) best = order[k];
  }
  return best;
}

// Scores candidates in the given order and returns the winning index in canonical order.
int choose(Scorer& scorer, const std::string& prompt, const std::vector<std::string>& canonical,
           const std::array<int, 3>& order) {
  std::vector<std::string> asked;
  for (int k : order) asked.push_back(canonical[static_cast<std::size_t>(k)]);
  const auto got = scorer.score(prompt, asked);
  if (got.size() != asked.size()) throw DataError("scorer returned the wrong number of scores");
  std::vector<double> scores(3);
  for (int k = 0; k < 3; ++k) scores[static_cast<std::size_t>(order[k])] = got[static_cast<std::size_t>(k)];
  return argmax_in_order(scores, order);
}

std::string generate_line(Scorer& scorer, const std::string& prompt) {
  auto text = scorer.generate(prompt, "\n");
  const auto nl = text.find('\n');
  if (nl != std::string::npos) text.resize(nl);
  return text;
}

}  // namespace

// ---- vocabulary and objects ----

std::string dim_name(Dim d) {
  switch (d) {
    case Dim::Color: return "color";
    case Dim::Shape: return "shape";
    case Dim::Texture: return "texture";
  }
  throw std::logic_error("bad dimension");
}

Dim parse_dim(const std::string& s) {
  for (Dim d : kDims) {
    if (dim_name(d) == s) return d;
  }
  throw ConfigError("unknown dimension '" + s + "' (expected color, shape or texture)");
}

const std::vector<std::string>& vocabulary(Dim d) {
  static const std::vector<std::string> colors = {"white", "black", "red",    "purple", "green",
                                                  "pink",  "blue",  "yellow", "orange", "brown"};
  static const std::vector<std::string> shapes = {"square",   "ellipse", "pentagon", "trapezoid",
                                                  "triangle", "hexagon", "circle",   "star"};
  static const std::vector<std::string> textures = {"striped", "solid", "dotted", "checkered", "spotted", "wavy"};
  switch (d) {
    case Dim::Color: return colors;
    case Dim::Shape: return shapes;
    case Dim::Texture: return textures;
  }
  throw std::logic_error("bad dimension");
}

const std::string& Object::get(Dim d) const {
  switch (d) {
    case Dim::Color: return color;
    case Dim::Shape: return shape;
    case Dim::Texture: return texture;
  }
  throw std::logic_error("bad dimension");
}

std::string& Object::get(Dim d) { return const_cast<std::string&>(std::as_const(*this).get(d)); }

int unique_along(const Objects& objects, Dim d) {
  int found = -1;
  for (int i = 0; i < 3; ++i) {
    int same = 0;
    for (int j = 0; j < 3; ++j) same += objects[i].get(d) == objects[j].get(d);
    if (same == 1) {
      if (found >= 0) return -1;
      found = i;
    }
  }
  return found;
}

bool rewarded(const Objects& objects, int choice, Dim correct) {
  if (choice < 0 || choice > 2) return false;
  for (int j = 0; j < 3; ++j) {
    if (j != choice && objects[j].get(correct) == objects[choice].get(correct)) return false;
  }
  return true;
}

std::string letter(int index) {
  if (index < 0 || index > 2) throw std::out_of_range("object index out of range");
  return std::string(1, static_cast<char>('A' + index));
}

// ---- sampling and the expert ----

void SampleConfig::validate() const {
  if (dims.empty()) throw ConfigError("at least one dimension is required");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    for (std::size_t j = i + 1; j < dims.size(); ++j) {
      if (dims[i] == dims[j]) throw ConfigError("duplicate dimension " + dim_name(dims[i]));
    }
  }
}

Episode sample_episode(const SampleConfig& config, Rng& rng) {
  config.validate();
  Episode e;
  e.correct = pick(config.dims, rng);
  for (int t = 0; t < kExperimentTrials; ++t) {
    Object o{pick(vocabulary(Dim::Color), rng), pick(vocabulary(Dim::Shape), rng), pick(vocabulary(Dim::Texture), rng)};
    Trial trial;
    trial.objects = {o, o, o};
    e.trials.push_back(trial);
  }
  // Base values plus one alternative per dimension; object k differs from the base only on dimension k.
  Object base;
  Object alt;
  for (Dim d : kDims) {
    const auto& v = vocabulary(d);
    std::vector<std::string> two;
    std::sample(v.begin(), v.end(), std::back_inserter(two), 2, rng);
    std::shuffle(two.begin(), two.end(), rng);
    base.get(d) = two[0];
    alt.get(d) = two[1];
  }
  Objects final_objects;
  for (int k = 0; k < 3; ++k) {
    final_objects[k] = base;
    final_objects[k].get(kDims[k]) = alt.get(kDims[k]);
  }
  std::shuffle(final_objects.begin(), final_objects.end(), rng);
  Trial last;
  last.final = true;
  last.objects = final_objects;
  e.trials.push_back(last);
  e.seed = rng();
  return e;
}

std::string transform_attribute(const Objects& objects, Dim d, Rng& rng) {
  std::vector<std::string> options;
  for (const auto& token : vocabulary(d)) {
    if (std::none_of(objects.begin(), objects.end(), [&](const Object& o) { return o.get(d) == token; })) {
      options.push_back(token);
    }
  }
  if (options.empty()) throw DataError("vocabulary for " + dim_name(d) + " is exhausted");
  return pick(options, rng);
}

std::string transform_for(std::uint64_t episode_seed, int trial, const Objects& objects, Dim d) {
  Rng rng(derive_seed(episode_seed, static_cast<std::uint64_t>(trial)));
  return transform_attribute(objects, d, rng);
}

ExpertMode parse_expert_mode(const std::string& s) {
  if (s == "fixed") return ExpertMode::Fixed;
  if (s == "varied") return ExpertMode::Varied;
  throw ConfigError("unknown expert mode '" + s + "' (expected fixed or varied)");
}

std::string expert_mode_name(ExpertMode m) { return m == ExpertMode::Fixed ? "fixed" : "varied"; }

std::string failure_explanation(Dim d) { return "The rewarding dimension must not be " + dim_name(d) + "."; }
std::string success_explanation(Dim d) { return "In this game, I am rewarded for unique " + dim_name(d) + "."; }
std::string final_explanation(Dim d) { return "I was rewarded for unique " + dim_name(d) + " in this game."; }

std::string final_reasoning(const Objects& objects, Dim correct) {
  const int k = unique_along(objects, correct);
  if (k < 0) throw DataError("no object is unique along " + dim_name(correct));
  std::vector<int> others;
  for (int j = 0; j < 3; ++j) {
    if (j != k) others.push_back(j);
  }
  const std::string dim = dim_name(correct);
  return success_explanation(correct) + " Object " + letter(k) + " is the only " + objects[k].get(correct) +
         " object, because " + letter(others[0]) + " and " + letter(others[1]) + " are " +
         objects[others[0]].get(correct) + ", so " + letter(k) + " has a unique " + dim +
         ". I will be rewarded for choosing object " + letter(k) + ".";
}

Episode expert_script(Episode e, ExpertMode mode) {
  if (e.trials.size() != kExperimentTrials + 1) throw DataError("episode must have four trials");
  std::optional<Dim> known;
  std::size_t next_probe = 0;
  for (int t = 0; t < kExperimentTrials; ++t) {
    auto& trial = e.trials[t];
    Dim d;
    if (mode == ExpertMode::Varied && known) {
      d = *known;
    } else {
      d = kDims[next_probe++];
    }
    trial.choice = t;
    trial.transformed = d;
    trial.new_value = transform_for(e.seed, t, trial.objects, d);
    trial.rewarded = rewarded(apply(trial.objects, t, d, trial.new_value), t, e.correct);
    trial.explanation = trial.rewarded ? success_explanation(d) : failure_explanation(d);
    if (trial.rewarded) known = d;
  }
  auto& last = e.trials.back();
  last.choice = unique_along(last.objects, e.correct);
  last.rewarded = rewarded(last.objects, last.choice, e.correct);
  last.reasoning = final_reasoning(last.objects, e.correct);
  last.explanation = final_explanation(e.correct);
  return e;
}

// ---- rendering ----

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::ExplanationsReasoning, Variant::Explanations, Variant::Reasoning,
                                         Variant::None, Variant::Instruction};
  return v;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::ExplanationsReasoning: return "explanations_reasoning";
    case Variant::Explanations: return "explanations";
    case Variant::Reasoning: return "reasoning";
    case Variant::None: return "none";
    case Variant::Instruction: return "instruction";
  }
  throw std::logic_error("bad variant");
}

Variant parse_variant(const std::string& s) {
  for (Variant v : all_variants()) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown prompt variant '" + s + "'");
}

RenderFlags flags_for(Variant v) {
  switch (v) {
    case Variant::ExplanationsReasoning: return {true, true, false};
    case Variant::Explanations: return {true, false, false};
    case Variant::Reasoning: return {false, true, false};
    case Variant::None: return {false, false, false};
    case Variant::Instruction: return {false, false, true};
  }
  throw std::logic_error("bad variant");
}

std::string render_header(const RenderFlags& flags) {
  std::string s = std::string(kNewGame) + "\n\n";
  if (flags.instruction) s += std::string(kInstruction) + "\n\n";
  return s;
}

std::string render_objects(const Objects& objects) {
  std::string s = std::string(kObjectsLine) + "\n";
  for (int i = 0; i < 3; ++i) {
    s += letter(i) + ") " + objects[i].color + " " + objects[i].shape + " " + objects[i].texture + "\n";
  }
  return s;
}

std::string render(const Episode& e, const RenderFlags& flags) {
  std::string s = render_header(flags);
  for (const auto& t : e.trials) {
    if (t.choice < 0) throw DataError("cannot render an unscripted trial");
    s += render_objects(t.objects) + "\n";
    if (!t.final) {
      if (!t.transformed) throw DataError("experiment trial without a transformation");
      s += transform_line(t.choice, *t.transformed, t.new_value) + "\n";
    } else {
      if (flags.reasoning) s += std::string(kReasoningPrefix) + " " + t.reasoning + "\n";
      s += "I choose object " + letter(t.choice) + "\n";
    }
    s += reward_line(t.choice, t.rewarded) + "\n";
    if (flags.explanations) s += std::string(kExplanation) + " " + t.explanation + "\n";
    if (!t.final) s += "\n";
  }
  return s;
}

// ---- parsing ----

namespace {

class LineReader {
 public:
  explicit LineReader(const std::string& text) {
    std::size_t at = 0;
    while (at < text.size()) {
      const auto nl = text.find('\n', at);
      if (nl == std::string::npos) {
        lines_.push_back(text.substr(at));
        break;
      }
      lines_.push_back(text.substr(at, nl - at));
      at = nl + 1;
    }
  }
  bool done() const { return i_ >= lines_.size(); }
  const std::string& peek() const { return lines_[i_]; }
  std::string next() { return lines_[i_++]; }
  std::size_t line_number() const { return i_; }  // of the line read last

 private:
  std::vector<std::string> lines_;
  std::size_t i_ = 0;
};

[[noreturn]] void malformed(const LineReader& r, const std::string& what) {
  throw DataError("transcript line " + std::to_string(r.line_number()) + ": " + what);
}

Object parse_object_line(LineReader& r, int index) {
  const std::string line = r.next();
  const std::string prefix = letter(index) + ") ";
  if (!starts_with(line, prefix)) malformed(r, "expected object " + letter(index));
  std::istringstream in(line.substr(prefix.size()));
  Object o;
  std::string extra;
  if (!(in >> o.color >> o.shape >> o.texture) || (in >> extra)) malformed(r, "expected three attributes");
  for (Dim d : kDims) {
    if (!in_vocabulary(d, o.get(d))) malformed(r, "unknown " + dim_name(d) + " '" + o.get(d) + "'");
  }
  return o;
}

// Parses "Choosing object X was rewarded!" / "... was not rewarded."
bool parse_reward(const std::string& line, int choice, bool& ok) {
  ok = true;
  if (line == reward_line(choice, true)) return true;
  if (line == reward_line(choice, false)) return false;
  ok = false;
  return false;
}

// Reads one trial. Returns false when the text ends before the trial is complete; `trial` then
// holds whatever was read.
bool parse_trial(LineReader& r, Trial& trial) {
  if (r.done()) return false;
  if (r.next() != kObjectsLine) malformed(r, "expected the object list");
  for (int i = 0; i < 3; ++i) {
    if (r.done()) return false;
    trial.objects[i] = parse_object_line(r, i);
  }
  if (r.done()) return false;
  if (!r.next().empty()) malformed(r, "expected a blank line after the objects");
  if (r.done()) return false;
  std::string line = r.next();
  if (starts_with(line, "I transform object ")) {
    const std::string rest = line.substr(std::string("I transform object ").size());
    const int choice = letter_index(rest.substr(0, 1));
    const std::string mid = " into a different ";
    if (choice < 0 || rest.compare(1, mid.size(), mid) != 0) malformed(r, "malformed transformation");
    const std::string tail = rest.substr(1 + mid.size());
    const auto colon = tail.find(": ");
    if (colon == std::string::npos || !ends_with(tail, ".")) malformed(r, "malformed transformation");
    trial.choice = choice;
    trial.transformed = parse_dim(tail.substr(0, colon));
    trial.new_value = tail.substr(colon + 2, tail.size() - colon - 3);
    if (!in_vocabulary(*trial.transformed, trial.new_value)) malformed(r, "unknown attribute '" + trial.new_value + "'");
  } else {
    trial.final = true;
    if (starts_with(line, kReasoningPrefix)) {
      trial.reasoning = after_cue(line.substr(std::string(kReasoningPrefix).size()));
      if (r.done()) return false;
      line = r.next();
    }
    if (!starts_with(line, "I choose object ")) malformed(r, "expected a transformation or a choice");
    trial.choice = letter_index(line.substr(std::string("I choose object ").size()));
    if (trial.choice < 0) malformed(r, "malformed choice");
  }
  if (r.done()) return false;
  bool ok = false;
  trial.rewarded = parse_reward(r.next(), trial.choice, ok);
  if (!ok) malformed(r, "expected the reward line");
  if (!r.done() && starts_with(r.peek(), kExplanation)) trial.explanation = after_cue(r.next().substr(std::string(kExplanation).size()));
  if (!trial.final) {
    if (r.done()) return false;
    if (!r.next().empty()) malformed(r, "expected a blank line after the trial");
  }
  return true;
}

}  // namespace

std::vector<ParsedGame> parse_transcript(const std::string& text, bool allow_partial) {
  // An unterminated last line is still being written.
  LineReader r(allow_partial ? text.substr(0, text.rfind('\n') + 1) : text);
  std::vector<ParsedGame> games;
  while (!r.done()) {
    const std::string line = r.next();
    if (line.empty() || line == kSeparator) continue;
    if (line != kNewGame) malformed(r, "expected '" + std::string(kNewGame) + "'");
    ParsedGame game;
    if (r.done() || !r.next().empty()) {
      if (allow_partial) {
        games.push_back(game);
        break;
      }
      malformed(r, "expected a blank line after the game header");
    }
    if (!r.done() && r.peek() == kInstruction) {
      r.next();
      game.instruction = true;
      if (!r.done() && !r.next().empty()) malformed(r, "expected a blank line after the instruction");
    }
    bool complete = false;
    while (!r.done()) {
      Trial trial;
      if (!parse_trial(r, trial)) {
        if (!allow_partial) malformed(r, "transcript ends inside a trial");
        game.trials.push_back(trial);
        break;
      }
      game.trials.push_back(trial);
      if (trial.final) {
        complete = true;
        break;
      }
    }
    if (!complete && !allow_partial) malformed(r, "game has no final trial");
    games.push_back(std::move(game));
  }
  return games;
}

Episode episode_from_game(const ParsedGame& game) {
  if (game.trials.size() != kExperimentTrials + 1 || !game.trials.back().final) {
    throw DataError("a complete game has three experiments and a final trial");
  }
  Episode e;
  e.trials = game.trials;
  const auto& last = e.trials.back();
  if (!last.rewarded) throw DataError("the correct dimension of an unrewarded game is ambiguous");
  bool found = false;
  for (Dim d : kDims) {
    if (unique_along(last.objects, d) == last.choice) {
      e.correct = d;
      found = true;
    }
  }
  if (!found) throw DataError("final choice is not unique along any dimension");
  return e;
}

// ---- scorers ----

namespace {

// The game in progress at the end of a prompt, without the unfinished last line.
std::vector<ParsedGame> last_game(const std::string& prompt) {
  const auto start = prompt.rfind(std::string(kNewGame) + "\n");
  if (start == std::string::npos) return {};
  const auto end = prompt.rfind('\n');
  return parse_transcript(prompt.substr(start, end + 1 - start), true);
}

}  // namespace

std::vector<double> OracleScorer::score(const std::string& prompt, const std::vector<std::string>& candidates) {
  std::vector<double> out(candidates.size(), -1.0);
  const auto games = last_game(prompt);
  if (games.empty() || games.back().trials.empty()) return out;
  auto trials = games.back().trials;
  const Trial current = trials.back();
  trials.pop_back();
  int experiments = 0;
  for (const auto& t : trials) experiments += !t.final;

  std::string want;
  if (ends_with(prompt, "I transform object")) {
    want = letter(experiments % 3);
  } else if (ends_with(prompt, "into a different")) {
    want = dim_name(kDims[static_cast<std::size_t>(experiments % 3)]);
  } else if (ends_with(prompt, "I choose object")) {
    const auto d = identified_dimension(trials);
    const int k = d ? unique_along(current.objects, *d) : 0;
    want = letter(k < 0 ? 0 : k);
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (trim(candidates[i]) == want) out[i] = 0.0;
  }
  return out;
}

std::string OracleScorer::generate(const std::string& prompt, const std::string& stop) {
  std::string text;
  {
    const auto games = last_game(prompt);
    if (!games.empty() && !games.back().trials.empty()) {
      const auto& trials = games.back().trials;
      const Trial& current = trials.back();
      if (ends_with(prompt, kExplanation) && current.choice >= 0) {
        if (current.final) {
          const auto d = identified_dimension({trials.begin(), trials.end() - 1});
          if (d) text = " " + final_explanation(*d);
        } else if (current.transformed) {
          text = " " + (current.rewarded ? success_explanation(*current.transformed)
                                         : failure_explanation(*current.transformed));
        }
      } else if (ends_with(prompt, kReasoningPrefix)) {
        const auto d = identified_dimension({trials.begin(), trials.end() - 1});
        if (d && unique_along(current.objects, *d) >= 0) text = " " + final_reasoning(current.objects, *d);
      }
    }
  }
  const auto cut = text.find(stop);
  if (!stop.empty() && cut != std::string::npos) text.resize(cut);
  return text;
}

std::vector<double> FirstOptionScorer::score(const std::string&, const std::vector<std::string>& candidates) {
  std::vector<double> out(candidates.size(), -1.0);
  if (!out.empty()) out[0] = 0.0;
  return out;
}

InFlightLimiter::InFlightLimiter(int limit) : limit_(limit) {
  if (limit < 1) throw ConfigError("in-flight limit must be positive");
}

void InFlightLimiter::acquire() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [this] { return active_ < limit_; });
  ++active_;
  peak_ = std::max(peak_, active_);
}

void InFlightLimiter::release() {
  {
    std::lock_guard lock(mutex_);
    --active_;
  }
  cv_.notify_one();
}

HttpScorerConfig HttpScorerConfig::from_env() {
  HttpScorerConfig c;
  const char* url = std::getenv("PASSIVE_SCORER_URL");
  if (!url || !*url) throw ConfigError("PASSIVE_SCORER_URL is not set");
  c.url = url;
  if (const char* token = std::getenv("PASSIVE_SCORER_TOKEN")) c.token = token;
  return c;
}

HttpScorer::HttpScorer(HttpScorerConfig config) : config_(std::move(config)), limiter_(config_.max_in_flight) {
  if (config_.url.empty()) throw ConfigError("scorer url is empty");
  if (config_.retries < 0) throw ConfigError("scorer retries must be non-negative");
  if (!(config_.timeout_seconds > 0)) throw ConfigError("scorer timeout must be positive");
}

HttpScorer::~HttpScorer() = default;

void HttpScorer::log(const json& entry) {
  if (config_.log_path.empty()) return;
  std::lock_guard lock(log_mutex_);
  std::ofstream out(config_.log_path, std::ios::app);
  out << entry.dump() << '\n';
  if (!out) throw DataError("cannot append to scorer log " + config_.log_path);
}

json HttpScorer::post(const std::string& path, const json& body) {
  const auto id = next_id_++;
  const auto seconds = static_cast<time_t>(config_.timeout_seconds);
  const auto micros = static_cast<time_t>((config_.timeout_seconds - static_cast<double>(seconds)) * 1e6);
  std::string last_error;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    httplib::Client client(config_.url);
    client.set_connection_timeout(seconds, micros);
    client.set_read_timeout(seconds, micros);
    client.set_write_timeout(seconds, micros);
    httplib::Headers headers;
    if (!config_.token.empty()) headers.emplace("Authorization", "Bearer " + config_.token);
    limiter_.acquire();
    httplib::Result res;
    try {
      res = client.Post(path, headers, body.dump(), "application/json");
    } catch (...) {
      limiter_.release();
      throw;
    }
    limiter_.release();
    json entry = {{"id", id}, {"attempt", attempt}, {"path", path}, {"request", body}};
    if (!res) {
      last_error = httplib::to_string(res.error());
      entry["error"] = last_error;
      log(entry);
      continue;
    }
    entry["status"] = res->status;
    entry["response"] = res->body;
    log(entry);
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      return json::parse(res->body);
    } catch (const json::exception& e) {
      last_error = std::string("unparseable response: ") + e.what();
    }
  }
  throw TransportError("scorer request " + config_.url + path + " failed after " +
                       std::to_string(config_.retries + 1) + " attempts: " + last_error);
}

std::vector<double> HttpScorer::score(const std::string& prompt, const std::vector<std::string>& candidates) {
  const json reply = post(config_.score_path, {{"prompt", prompt}, {"candidates", candidates}});
  if (!reply.contains("scores") || !reply["scores"].is_array() || reply["scores"].size() != candidates.size()) {
    throw TransportError("scorer reply lacks one score per candidate");
  }
  std::vector<double> out;
  for (const auto& s : reply["scores"]) {
    if (!s.is_number()) throw TransportError("scorer reply has a non-numeric score");
    out.push_back(s.get<double>());
  }
  return out;
}

std::string HttpScorer::generate(const std::string& prompt, const std::string& stop) {
  const json reply = post(config_.generate_path, {{"prompt", prompt},
                                                  {"stop", stop},
                                                  {"top_p", config_.top_p},
                                                  {"temperature", config_.temperature}});
  if (!reply.contains("text") || !reply["text"].is_string()) throw TransportError("generation reply lacks text");
  std::string text = reply["text"].get<std::string>();
  const auto cut = stop.empty() ? std::string::npos : text.find(stop);
  if (cut != std::string::npos) {
    log({{"note", "generation truncated at the stop sequence"}, {"dropped", text.substr(cut)}});
    text.resize(cut);
  }
  return text;
}

// ---- prompts and evaluation ----

PromptSpec sample_prompt(const std::vector<Dim>& allowed, const RenderFlags& flags, ExpertMode mode, Rng& rng,
                         int shots) {
  if (shots < 1) throw ConfigError("a prompt needs at least one shot");
  PromptSpec p;
  p.allowed = allowed;
  p.flags = flags;
  p.mode = mode;
  const SampleConfig config{allowed};
  for (int i = 0; i < shots; ++i) p.shots.push_back(expert_script(sample_episode(config, rng), mode));
  return p;
}

std::string prompt_text(const PromptSpec& prompt) {
  std::string s;
  for (const auto& shot : prompt.shots) s += render(shot, prompt.flags) + "\n" + kSeparator + "\n\n";
  return s;
}

bool holdout_intact(const PromptSpec& prompt, Dim eval_dim) {
  return std::none_of(prompt.shots.begin(), prompt.shots.end(), [&](const Episode& e) { return e.correct == eval_dim; });
}

EpisodeResult run_episode(const PromptSpec& prompt, const Episode& skeleton, Scorer& scorer,
                          const RunOptions& options) {
  if (skeleton.trials.size() != kExperimentTrials + 1) throw DataError("episode must have four trials");
  static const std::vector<std::string> letters = {" A", " B", " C"};
  static const std::vector<std::string> dims = {" color", " shape", " texture"};
  const auto& flags = prompt.flags;
  const std::string prefix = prompt_text(prompt);
  std::string text = prefix + render_header(flags);
  EpisodeResult result;

  auto explain = [&] {
    if (!flags.explanations) return;
    text += kExplanation;
    const auto g = generate_line(scorer, text);
    result.generated.push_back(g);
    text += g + "\n";
  };

  for (int t = 0; t < kExperimentTrials; ++t) {
    const auto& objects = skeleton.trials[t].objects;
    text += render_objects(objects) + "\n" + "I transform object";
    const int choice = choose(scorer, text, letters, options.option_order);
    text += " " + letter(choice) + " into a different";
    const Dim d = kDims[static_cast<std::size_t>(choose(scorer, text, dims, options.option_order))];
    const auto value = transform_for(skeleton.seed, t, objects, d);
    const bool r = rewarded(apply(objects, choice, d, value), choice, skeleton.correct);
    text += " " + dim_name(d) + ": " + value + ".\n" + reward_line(choice, r) + "\n";
    result.choices.push_back(choice);
    result.dimensions.push_back(d);
    result.experiment_rewards += r;
    explain();
    text += "\n";
  }
  const auto& objects = skeleton.trials.back().objects;
  text += render_objects(objects) + "\n";
  if (flags.reasoning) {
    text += kReasoningPrefix;
    const auto g = generate_line(scorer, text);
    result.generated.push_back(g);
    text += g + "\n";
  }
  text += "I choose object";
  const int choice = choose(scorer, text, letters, options.option_order);
  result.choices.push_back(choice);
  result.final_reward = rewarded(objects, choice, skeleton.correct);
  text += " " + letter(choice) + "\n" + reward_line(choice, result.final_reward) + "\n";
  explain();
  result.transcript = text.substr(prefix.size());
  return result;
}

PromptSpec select_prompt(int candidates, int validation, const std::vector<Dim>& allowed, const RenderFlags& flags,
                         ExpertMode mode, Scorer& scorer, Rng& rng, SelectionReport* report) {
  if (candidates < 1 || validation < 1) throw ConfigError("prompt selection needs candidates and validation episodes");
  const SampleConfig config{allowed};
  config.validate();
  std::vector<Episode> held;
  for (int i = 0; i < validation; ++i) held.push_back(sample_episode(config, rng));
  SelectionReport local;
  std::vector<PromptSpec> prompts;
  for (int c = 0; c < candidates; ++c) {
    prompts.push_back(sample_prompt(allowed, flags, mode, rng));
    int correct = 0, rewards = 0;
    for (const auto& e : held) {
      const auto r = run_episode(prompts.back(), e, scorer);
      correct += r.final_reward;
      rewards += r.experiment_rewards;
    }
    local.accuracy.push_back(static_cast<double>(correct) / validation);
    local.experiment_rewards.push_back(rewards);
    const auto best = local.chosen;
    if (local.accuracy[c] > local.accuracy[best] ||
        (local.accuracy[c] == local.accuracy[best] && rewards > local.experiment_rewards[best])) {
      local.chosen = static_cast<std::size_t>(c);
    }
  }
  if (report) *report = local;
  return prompts[local.chosen];
}

void ExperimentConfig::validate() const {
  if (variants.empty()) throw ConfigError("ooo.variants is empty");
  if (heldout.empty()) throw ConfigError("ooo.heldout is empty");
  if (episodes < 1) throw ConfigError("ooo.episodes must be positive");
  if (candidates < 1 || validation < 1) throw ConfigError("ooo.candidates and ooo.validation must be positive");
  if (jobs < 1) throw ConfigError("jobs must be positive");
}

namespace {

// Final-trial rewards of `count` episodes drawn from `dims`, evaluated in parallel.
std::vector<double> evaluate_split(const PromptSpec& prompt, const std::vector<Dim>& dims, int count,
                                   std::uint64_t seed, Scorer& scorer, int jobs, std::string* first_transcript) {
  std::vector<Episode> episodes;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    episodes.push_back(sample_episode(SampleConfig{dims}, rng));
  }
  std::vector<EpisodeResult> results(episodes.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < episodes.size(); i += step) results[i] = run_episode(prompt, episodes[i], scorer);
  };
  std::vector<std::future<void>> workers;
  for (int w = 1; w < jobs; ++w) workers.push_back(std::async(std::launch::async, work, w, jobs));
  work(0, static_cast<std::size_t>(jobs));
  for (auto& f : workers) f.get();
  if (first_transcript && !results.empty()) *first_transcript = results.front().transcript;
  std::vector<double> out;
  for (const auto& r : results) out.push_back(r.final_reward ? 1.0 : 0.0);
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, Scorer& scorer) {
  config.validate();
  ExperimentResult out;
  for (Dim held : config.heldout) {
    std::vector<Dim> allowed;
    for (Dim d : kDims) {
      if (d != held) allowed.push_back(d);
    }
    const std::uint64_t dim_seed = derive_seed(config.seed, static_cast<std::uint64_t>(held));
    for (Variant v : config.variants) {
      // Every variant of one hold-out sees the same candidate shots and evaluation episodes.
      Rng rng(dim_seed);
      SelectionReport selection;
      const auto prompt =
          select_prompt(config.candidates, config.validation, allowed, flags_for(v), config.mode, scorer, rng, &selection);
      if (!holdout_intact(prompt, held)) throw DataError("prompt leaks the held-out dimension");
      const std::string name = variant_name(v) + "/holdout_" + dim_name(held);
      std::string train_transcript, heldout_transcript;
      const auto train = evaluate_split(prompt, allowed, config.episodes, derive_seed(dim_seed, 1), scorer, config.jobs,
                                        &train_transcript);
      const auto test = evaluate_split(prompt, {held}, config.episodes, derive_seed(dim_seed, 2), scorer, config.jobs,
                                       &heldout_transcript);
      ConditionReport report;
      report.condition = name;
      report.n_episodes = config.episodes;
      report.metrics.push_back({"accuracy_heldout", mean_interval(test)});
      report.metrics.push_back({"accuracy_train_dims", mean_interval(train)});
      report.metrics.push_back({"selection_accuracy", {selection.accuracy[selection.chosen], 0.0}});
      out.reports.push_back(std::move(report));
      out.transcripts.push_back({name, prompt_text(prompt) + train_transcript + "\n" + kSeparator + "\n\n" +
                                           heldout_transcript});
    }
  }
  return out;
}

}  // namespace passive::ooo
