#include "passive/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>

#include "passive/error.hpp"

namespace passive {

namespace {

constexpr double kZ95 = 1.959963984540054;

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string num(double v) { return fmt("%.10g", v); }

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// 1.96 * sample sd / sqrt(N); zero for a single episode.
double half_width(const std::vector<double>& xs) {
  const auto n = static_cast<double>(xs.size());
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return kZ95 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"};

}  // namespace

MetricValue mean_interval(const std::vector<double>& xs) {
  if (xs.empty()) throw DataError("no samples to summarize");
  return {mean_of(xs), half_width(xs)};
}

const std::vector<std::string>& reference_names() {
  static const std::vector<std::string> names = {"expert", "value", "change", "total_corr", "partial_corr"};
  return names;
}

const std::vector<std::string>& builtin_policy_names() {
  static const std::vector<std::string> names = {"expert", "value", "change", "total_corr", "partial_corr", "random"};
  return names;
}

PolicyFactory builtin_policy(const std::string& name) {
  auto rng = [](const EpisodeSpec& s) { return make_rng(s.seed, Stream::Policy); };
  if (name == "expert") {
    return [rng](const EpisodeSpec& s) { return std::make_unique<ExpertPolicy>(s.dag, s.goal, rng(s)); };
  }
  if (name == "value") return [rng](const EpisodeSpec& s) { return std::make_unique<ValueBaseline>(rng(s)); };
  if (name == "change") return [rng](const EpisodeSpec& s) { return std::make_unique<ChangeBaseline>(rng(s)); };
  if (name == "total_corr") {
    return [rng](const EpisodeSpec& s) { return std::make_unique<TotalCorrelationBaseline>(rng(s)); };
  }
  if (name == "partial_corr") {
    return [rng](const EpisodeSpec& s) { return std::make_unique<PartialCorrelationBaseline>(rng(s)); };
  }
  if (name == "random") return [rng](const EpisodeSpec& s) { return std::make_unique<RandomPolicy>(rng(s)); };
  throw ConfigError("unknown policy '" + name + "'");
}

void EvalCondition::validate() const {
  dag.validate();
  episode.validate();
  constraint.validate(dag);
}

EvalCondition make_condition(ConstraintKind kind, const DagConfig& dag, const EpisodeConfig& episode) {
  return {condition_name(kind), dag, episode, make_constraint(kind, dag.n)};
}

EpisodeOutcome run_eval_episode(const PolicyFactory& factory, const EvalCondition& condition, std::uint64_t seed) {
  const EpisodeSpec spec = sample_episode_spec(condition.dag, condition.constraint, seed);
  auto policy = factory(spec);
  std::vector<std::unique_ptr<Policy>> refs;
  for (const auto& name : reference_names()) refs.push_back(builtin_policy(name)(spec));

  Environment env(condition.episode, condition.noise);
  Observation obs = env.reset(spec.dag, spec.goal, make_rng(seed, Stream::Environment));
  EpisodeOutcome out;
  out.matches.assign(refs.size(), 0);
  while (!env.done()) {
    const Phase phase = env.phase();
    const Action action = policy->act(obs);
    if (action.index < 0 || action.index >= 2 * spec.dag.size()) {
      throw DataError("policy '" + policy->name() + "' produced action " + std::to_string(action.index) +
                      " outside [0, " + std::to_string(2 * spec.dag.size()) + ")");
    }
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const Action ref = refs[k]->act(obs);
      if (phase == Phase::Exploit && ref == action) ++out.matches[k];
    }
    auto result = env.step(action);
    if (phase == Phase::Exploit) {
      out.reward += result.reward;
      ++out.exploit_steps;
    }
    obs = std::move(result.observation);
  }
  out.optimal_reward = optimal_episode_reward(spec.dag, spec.goal, condition.episode);
  out.exploration_correct = env.exploration_correct();
  return out;
}

const MetricValue& ConditionReport::at(const std::string& metric) const {
  for (const auto& [k, v] : metrics) {
    if (k == metric) return v;
  }
  throw std::out_of_range("no metric '" + metric + "' in condition " + condition);
}

bool ConditionReport::has(const std::string& metric) const {
  return std::any_of(metrics.begin(), metrics.end(), [&](const auto& kv) { return kv.first == metric; });
}

ConditionReport summarize(const std::string& condition, const std::vector<EpisodeOutcome>& outcomes) {
  if (outcomes.empty()) throw DataError("no episodes to summarize for " + condition);
  ConditionReport report;
  report.condition = condition;
  report.n_episodes = static_cast<std::int64_t>(outcomes.size());
  const auto n = static_cast<double>(outcomes.size());

  std::vector<double> rewards, optimal, correct;
  for (const auto& o : outcomes) {
    rewards.push_back(o.reward);
    optimal.push_back(o.optimal_reward);
    correct.push_back(o.exploration_correct ? 1.0 : 0.0);
  }
  const double mr = mean_of(rewards), mo = mean_of(optimal);
  // Ratio of means; delta-method interval from the residuals r_i - R * o_i.
  const double ratio = mr / mo;
  double resid_ss = 0.0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const double d = rewards[i] - ratio * optimal[i];
    resid_ss += d * d;
  }
  const double ratio_hw = outcomes.size() < 2 ? 0.0 : kZ95 * std::sqrt(resid_ss / (n - 1.0) / n) / std::abs(mo);
  report.metrics.push_back({"reward_fraction", {ratio, ratio_hw}});
  report.metrics.push_back({"mean_reward", {mr, half_width(rewards)}});
  report.metrics.push_back({"mean_optimal_reward", {mo, half_width(optimal)}});

  for (std::size_t k = 0; k < reference_names().size(); ++k) {
    std::vector<double> per_episode;
    double hits = 0.0, steps = 0.0;
    for (const auto& o : outcomes) {
      if (o.exploit_steps == 0) continue;
      per_episode.push_back(static_cast<double>(o.matches[k]) / o.exploit_steps);
      hits += o.matches[k];
      steps += o.exploit_steps;
    }
    report.metrics.push_back({"match_" + reference_names()[k], {steps > 0 ? hits / steps : 0.0, half_width(per_episode)}});
  }
  report.metrics.push_back({"exploration_correctness", {mean_of(correct), half_width(correct)}});
  return report;
}

ConditionReport rollout_eval(const PolicyFactory& policy, const EvalCondition& condition, std::int64_t n_episodes,
                             std::uint64_t seed, int jobs) {
  if (n_episodes <= 0) throw ConfigError("n_episodes must be positive");
  condition.validate();
  std::vector<EpisodeOutcome> outcomes(n_episodes);
  auto work = [&](std::int64_t first, std::int64_t stride) {
    for (std::int64_t i = first; i < n_episodes; i += stride) {
      outcomes[i] = run_eval_episode(policy, condition, derive_seed(seed, static_cast<std::uint64_t>(i)));
    }
  };
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::future<void>> workers;
    for (int w = 0; w < jobs; ++w) workers.push_back(std::async(std::launch::async, work, w, jobs));
    for (auto& f : workers) f.get();
  }
  return summarize(condition.name, outcomes);
}

EvalReport rollout_eval(const std::string& policy_name, const PolicyFactory& policy,
                        const std::vector<EvalCondition>& conditions, std::int64_t n_episodes, std::uint64_t seed,
                        int jobs) {
  EvalReport report{policy_name, {}};
  for (const auto& c : conditions) report.conditions.push_back(rollout_eval(policy, c, n_episodes, seed, jobs));
  return report;
}

ComparisonTable compare_conditions(const std::vector<ConditionReport>& reports) {
  if (reports.empty()) throw DataError("nothing to compare");
  ComparisonTable table;
  for (const auto& [k, v] : reports.front().metrics) table.metrics.push_back(k);
  const std::set<std::string> keys(table.metrics.begin(), table.metrics.end());
  for (const auto& r : reports) {
    std::set<std::string> mine;
    for (const auto& kv : r.metrics) mine.insert(kv.first);
    if (mine != keys) throw DataError("condition '" + r.condition + "' has different metric keys");
    table.conditions.push_back(r.condition);
  }
  for (const auto& m : table.metrics) {
    std::vector<MetricValue> row;
    for (const auto& r : reports) row.push_back(r.at(m));
    table.values.push_back(std::move(row));
  }
  return table;
}

std::string to_csv(const ComparisonTable& table) {
  std::ostringstream out;
  out << "metric";
  for (const auto& c : table.conditions) out << ',' << c << ',' << c << "_ci";
  for (std::size_t c = 1; c < table.conditions.size(); ++c) out << ",diff_" << table.conditions[c];
  out << '\n';
  for (std::size_t m = 0; m < table.metrics.size(); ++m) {
    out << table.metrics[m];
    for (const auto& v : table.values[m]) out << ',' << num(v.value) << ',' << num(v.ci_half_width);
    for (std::size_t c = 1; c < table.conditions.size(); ++c) out << ',' << num(table.difference(m, c));
    out << '\n';
  }
  return out.str();
}

std::string to_csv(const std::vector<ConditionReport>& reports) {
  if (reports.empty()) throw DataError("report has no conditions");
  std::ostringstream out;
  out << "condition,metric,value,ci_half_width,n_episodes\n";
  for (const auto& r : reports) {
    if (r.metrics.empty()) throw DataError("condition '" + r.condition + "' has no metrics");
    for (const auto& [k, v] : r.metrics) {
      out << r.condition << ',' << k << ',' << num(v.value) << ',' << num(v.ci_half_width) << ',' << r.n_episodes
          << '\n';
    }
  }
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw DataError("cannot write " + path);
}

void write_csv(const std::vector<ConditionReport>& reports, const std::string& path) {
  write_text_file(path, to_csv(reports));
}

std::string render_bar_svg(const std::vector<ConditionReport>& reports, const std::vector<std::string>& metrics,
                           const std::string& title) {
  if (reports.empty() || metrics.empty()) throw DataError("nothing to plot");
  for (const auto& r : reports) {
    for (const auto& m : metrics) {
      if (!r.has(m)) throw DataError("condition '" + r.condition + "' lacks metric " + m);
    }
  }
  double top = 1.0;
  for (const auto& r : reports) {
    for (const auto& m : metrics) top = std::max(top, r.at(m).value + r.at(m).ci_half_width);
  }
  top = std::ceil(top * 10.0) / 10.0;

  const double left = 60, right = 170, plot_top = 40, plot_h = 240;
  const double bar_w = 18, gap = 24;
  const double group_w = bar_w * static_cast<double>(metrics.size()) + gap;
  const double width = left + group_w * static_cast<double>(reports.size()) + right;
  const double height = plot_top + plot_h + 60;
  auto y_of = [&](double v) { return plot_top + plot_h * (1.0 - std::clamp(v, 0.0, top) / top); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title)
    << "</text>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = top * t / 5.0;
    const double y = y_of(v);
    s << "<line x1=\"" << num(left) << "\" y1=\"" << num(y) << "\" x2=\"" << num(width - right) << "\" y2=\""
      << num(y) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << fmt("%.2f", v)
      << "</text>\n";
  }
  for (std::size_t c = 0; c < reports.size(); ++c) {
    const double gx = left + gap / 2 + group_w * static_cast<double>(c);
    for (std::size_t m = 0; m < metrics.size(); ++m) {
      const auto& v = reports[c].at(metrics[m]);
      const double x = gx + bar_w * static_cast<double>(m);
      const double y = y_of(v.value);
      s << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar_w - 2) << "\" height=\""
        << num(plot_top + plot_h - y) << "\" fill=\"" << kPalette[m % 8] << "\"/>\n";
      const double cx = x + (bar_w - 2) / 2;
      s << "<line x1=\"" << num(cx) << "\" y1=\"" << num(y_of(v.value - v.ci_half_width)) << "\" x2=\"" << num(cx)
        << "\" y2=\"" << num(y_of(v.value + v.ci_half_width)) << "\" stroke=\"black\"/>\n";
    }
    s << "<text x=\"" << num(gx + bar_w * static_cast<double>(metrics.size()) / 2) << "\" y=\""
      << num(plot_top + plot_h + 18) << "\" text-anchor=\"middle\">" << escape_xml(reports[c].condition)
      << "</text>\n";
  }
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    const double ly = plot_top + 14.0 * static_cast<double>(m);
    s << "<rect x=\"" << num(width - right + 12) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[m % 8] << "\"/>\n";
    s << "<text x=\"" << num(width - right + 26) << "\" y=\"" << num(ly + 9) << "\">" << escape_xml(metrics[m])
      << "</text>\n";
  }
  s << "<line x1=\"" << num(left) << "\" y1=\"" << num(plot_top + plot_h) << "\" x2=\"" << num(width - right)
    << "\" y2=\"" << num(plot_top + plot_h) << "\" stroke=\"black\"/>\n";
  s << "</svg>\n";
  return s.str();
}

std::string render_line_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                            const std::string& y_label) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& sr : series) {
    for (const auto& [x, y] : sr.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) throw DataError("nothing to plot");
  if (x1 == x0) x1 = x0 + 1;
  y0 = std::min(y0, 0.0);
  if (y1 == y0) y1 = y0 + 1;

  const double left = 60, right = 150, plot_top = 40, plot_w = 420, plot_h = 240;
  auto px = [&](double x) { return left + plot_w * (x - x0) / (x1 - x0); };
  auto py = [&](double y) { return plot_top + plot_h * (1.0 - (y - y0) / (y1 - y0)); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(left + plot_w + right) << "\" height=\""
    << num(plot_top + plot_h + 60) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
    << escape_xml(title) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0, xv = x0 + (x1 - x0) * t / 4.0;
    s << "<line x1=\"" << num(left) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(left + plot_w) << "\" y2=\""
      << num(py(yv)) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
      << fmt("%.3g", yv) << "</text>\n";
    s << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(plot_top + plot_h + 16) << "\" text-anchor=\"middle\">"
      << fmt("%.4g", xv) << "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    s << "<polyline fill=\"none\" stroke=\"" << kPalette[k % 8] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].points.size(); ++i) {
      if (i) s << ' ';
      s << num(px(series[k].points[i].first)) << ',' << num(py(series[k].points[i].second));
    }
    s << "\"/>\n";
    const double ly = plot_top + 14.0 * static_cast<double>(k);
    s << "<rect x=\"" << num(left + plot_w + 12) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[k % 8] << "\"/>\n";
    s << "<text x=\"" << num(left + plot_w + 26) << "\" y=\"" << num(ly + 9) << "\">" << escape_xml(series[k].name)
      << "</text>\n";
  }
  s << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"" << num(plot_top + plot_h + 36)
    << "\" text-anchor=\"middle\">" << escape_xml(x_label) << "</text>\n";
  s << "<text x=\"14\" y=\"" << num(plot_top + plot_h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << num(plot_top + plot_h / 2) << ")\">" << escape_xml(y_label) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

void export_report(const EvalReport& report, const std::string& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  const std::string base = (std::filesystem::path(dir) / stem).string();
  write_csv(report.conditions, base + ".csv");
  write_text_file(base + "_reward.svg",
                  render_bar_svg(report.conditions, {"reward_fraction"}, report.policy + ": reward fraction of optimal"));
  std::vector<std::string> matches;
  for (const auto& r : reference_names()) matches.push_back("match_" + r);
  write_text_file(base + "_actions.svg",
                  render_bar_svg(report.conditions, matches, report.policy + ": exploit actions matching"));
  write_text_file(base + "_exploration.svg", render_bar_svg(report.conditions, {"exploration_correctness"},
                                                            report.policy + ": exploration correctness"));
}

}  // namespace passive
