#pragma once

// Certainty analysis of generated scratchpads: where the critical positions
// are, how certain the reference policy is there compared to the rest of the
// generation, and how the probability of the right token evolves in training.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kllab/model.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

struct CriticalPosition {
  std::size_t position = 0;  // index into the generated tokens
  std::string label;         // "header / operand 1", "step 1 / operand 2", ...

  bool operator==(const CriticalPosition&) const = default;
};

struct CriticalLocation {
  std::vector<CriticalPosition> positions;
  std::string diagnostic;  // non-empty when the text could not be parsed
};

namespace detail {

// Reads a digit list starting at text[at] == '['. Returns the index right
// after the n-th digit, or npos if the list has fewer than n well-formed
// digits before it closes or breaks.
inline std::size_t after_nth_digit(std::string_view text, std::size_t at, int n) {
  if (at >= text.size() || text[at] != '[') return std::string_view::npos;
  std::size_t i = at + 1;
  for (int d = 1;; ++d) {
    if (i >= text.size() || text[i] < '0' || text[i] > '9') return std::string_view::npos;
    ++i;
    if (d == n) return i;
    if (i >= text.size() || text[i] != ',') return std::string_view::npos;
    ++i;
  }
}

}  // namespace detail

// For every operand list in the generated scratchpad whose true length
// exceeds n_pretrain, flags the separator after its n_pretrain-th digit: the
// point where the list must continue with ',' instead of closing with ']'.
// Lists are identified by line: two header lines, then one line per step.
inline CriticalLocation locate_critical_positions(std::string_view generated, const AdditionProblem& p,
                                                  int n_pretrain) {
  CriticalLocation out;
  if (n_pretrain < 1) {
    out.diagnostic = "n_pretrain must be >= 1";
    return out;
  }
  const std::size_t lens[2] = {p.len_a(), p.len_b()};
  bool any_list = false;
  std::size_t line_start = 0;
  for (int line = 0; line_start < generated.size(); ++line) {
    std::size_t line_end = generated.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = generated.size();
    const std::string_view text = generated.substr(0, line_end);
    if (generated.substr(line_start, line_end - line_start).starts_with("[] + []")) break;

    std::size_t starts[2] = {line_start, std::string_view::npos};
    const bool header = line < 2;
    if (header && line == 1) std::swap(starts[0], starts[1]);  // header line m lists operand m
    if (!header) {
      const auto sep = generated.substr(line_start, line_end - line_start).find("] + [");
      if (sep != std::string_view::npos) starts[1] = line_start + sep + 4;
    }
    for (int m = 0; m < 2; ++m) {
      const std::size_t at = starts[m];
      if (at == std::string_view::npos || at >= line_end || generated[at] != '[') continue;
      any_list = true;
      const std::size_t consumed = header ? 0 : static_cast<std::size_t>(line - 2);
      const std::size_t remaining = lens[m] > consumed ? lens[m] - consumed : 0;
      if (remaining <= static_cast<std::size_t>(n_pretrain)) continue;
      const std::size_t sep = detail::after_nth_digit(text, at, n_pretrain);
      if (sep == std::string_view::npos || sep >= line_end) continue;
      out.positions.push_back({sep, (header ? std::string("header") : "step " + std::to_string(line - 1)) +
                                        " / operand " + std::to_string(m + 1)});
    }
    line_start = line_end + 1;
  }
  if (!any_list) out.diagnostic = "no operand lists found in generated text";
  return out;
}

struct CertaintyProfile {
  std::vector<TokenId> tokens;
  std::vector<double> certainty;  // J of the reference policy at each token's state
  std::vector<double> delta;      // J_i minus the mean J of the other tokens
  std::vector<bool> critical;
  std::vector<std::string> labels;  // label per token, empty when not critical
  int n_pretrain = 0;
  int digits = 0;

  std::size_t size() const { return tokens.size(); }

  nlohmann::json to_json() const {
    return {{"n_pretrain", n_pretrain}, {"digits", digits},  {"tokens", tokens},
            {"certainty", certainty},   {"delta", delta},    {"critical", critical},
            {"labels", labels}};
  }

  static CertaintyProfile from_json(const nlohmann::json& j) {
    CertaintyProfile p;
    p.n_pretrain = j.at("n_pretrain").get<int>();
    p.digits = j.at("digits").get<int>();
    p.tokens = j.at("tokens").get<std::vector<TokenId>>();
    p.certainty = j.at("certainty").get<std::vector<double>>();
    p.delta = j.at("delta").get<std::vector<double>>();
    p.critical = j.at("critical").get<std::vector<bool>>();
    p.labels = j.at("labels").get<std::vector<std::string>>();
    return p;
  }
};

// Leave-one-out: d_i = J_i - (sum_j J_j - J_i) / (n - 1). Zero for n < 2.
inline std::vector<double> leave_one_out_delta(std::span<const double> j) {
  std::vector<double> d(j.size(), 0.0);
  if (j.size() < 2) return d;
  double s = 0.0;
  for (double x : j) s += x;
  const double denom = static_cast<double>(j.size() - 1);
  for (std::size_t i = 0; i < j.size(); ++i) d[i] = j[i] - (s - j[i]) / denom;
  return d;
}

inline CertaintyProfile make_profile(std::vector<TokenId> tokens, std::vector<double> certainty,
                                     std::span<const CriticalPosition> critical, int n_pretrain, int digits) {
  if (tokens.size() != certainty.size()) throw std::invalid_argument("profile: length mismatch");
  CertaintyProfile p;
  p.tokens = std::move(tokens);
  p.certainty = std::move(certainty);
  p.delta = leave_one_out_delta(p.certainty);
  p.critical.assign(p.size(), false);
  p.labels.assign(p.size(), {});
  for (const auto& c : critical) {
    if (c.position >= p.size()) continue;
    p.critical[c.position] = true;
    p.labels[c.position] = c.label;
  }
  p.n_pretrain = n_pretrain;
  p.digits = digits;
  return p;
}

// Scores every generated token under `reference` (the frozen pre-trained policy).
template <class T>
CertaintyProfile profile_generation(const Model<T>& reference, std::span<const TokenId> prompt,
                                    std::span<const TokenId> generated, std::span<const CriticalPosition> critical,
                                    int n_pretrain, int digits) {
  if (prompt.empty()) throw std::invalid_argument("profile: empty prompt");
  std::vector<double> j;
  if (!generated.empty()) {
    std::vector<TokenId> input(prompt.begin(), prompt.end());
    input.insert(input.end(), generated.begin(), generated.end() - 1);
    const auto out = forward(reference, std::span<const TokenId>(input));
    j.reserve(generated.size());
    for (std::size_t t = 0; t < generated.size(); ++t)
      j.push_back(certainty(out.logits.row(static_cast<Eigen::Index>(prompt.size() - 1 + t))));
  }
  return make_profile(std::vector<TokenId>(generated.begin(), generated.end()), std::move(j), critical, n_pretrain,
                      digits);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single sample
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct CriticalTokenStats {
  std::optional<MeanStd> critical;        // over all critical tokens; absent if there are none
  std::optional<MeanStd> noncritical_min;  // per-generation minimum, then across generations
  std::size_t n_generations = 0;
  bool single_sample = false;

  nlohmann::json to_json() const {
    auto ms = [](const std::optional<MeanStd>& m) {
      return m ? nlohmann::json{{"mean", m->mean}, {"std", m->std}, {"n", m->n}} : nlohmann::json(nullptr);
    };
    return {{"mean_dJ_critical", ms(critical)},
            {"min_dJ_noncritical", ms(noncritical_min)},
            {"n_generations", n_generations},
            {"single_sample", single_sample}};
  }
};

inline CriticalTokenStats aggregate_stats(std::span<const CertaintyProfile> profiles) {
  if (profiles.empty()) throw std::invalid_argument("aggregate_stats: no profiles");
  std::vector<double> crit, mins;
  for (const auto& p : profiles) {
    double mn = INFINITY;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.critical[i])
        crit.push_back(p.delta[i]);
      else
        mn = std::min(mn, p.delta[i]);
    }
    if (std::isfinite(mn)) mins.push_back(mn);
  }
  CriticalTokenStats s;
  s.n_generations = profiles.size();
  s.single_sample = profiles.size() == 1;
  if (!crit.empty()) s.critical = mean_std(crit);
  if (!mins.empty()) s.noncritical_min = mean_std(mins);
  return s;
}

inline std::string format_stats_row(int n_pretrain, const CriticalTokenStats& s) {
  auto cell = [](const std::optional<MeanStd>& m) {
    if (!m) return std::string("n/a");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f +- %.4f", m->mean, m->std);
    return std::string(buf);
  };
  char head[32];
  std::snprintf(head, sizeof head, "%-4d", n_pretrain);
  return std::string(head) + " | " + cell(s.critical) + " | " + cell(s.noncritical_min) + " | " +
         std::to_string(s.n_generations);
}

inline std::string stats_table_header() { return "N    | dJ critical (mean +- std) | min dJ non-critical | generations"; }

// Teacher-forced probe: gold generation prefix up to a critical position and
// the gold token there.
struct CriticalProbe {
  std::vector<TokenId> context;  // prompt + gold generated tokens before the position
  TokenId correct = 0;
  std::string label;
};

inline std::vector<CriticalProbe> make_critical_probes(std::span<const AdditionProblem> problems, int n_pretrain,
                                                       const Vocabulary& vocab = Vocabulary::standard()) {
  std::vector<CriticalProbe> probes;
  for (const auto& p : problems) {
    const auto doc = render_scratchpad(p);
    const std::string gen = doc.body_text + doc.answer_text;
    const auto prompt = vocab.encode(doc.prompt_text);
    for (const auto& c : locate_critical_positions(gen, p, n_pretrain).positions) {
      CriticalProbe pr;
      pr.context = prompt;
      const auto prefix = vocab.encode(std::string_view(gen).substr(0, c.position));
      pr.context.insert(pr.context.end(), prefix.begin(), prefix.end());
      pr.correct = vocab.id_of(gen[c.position]);
      pr.label = c.label;
      probes.push_back(std::move(pr));
    }
  }
  return probes;
}

// Mean probability of the correct token per label.
template <class T>
std::map<std::string, double> probe_probabilities(const Model<T>& model, std::span<const CriticalProbe> probes) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& pr : probes) {
    const auto out = forward(model, std::span<const TokenId>(pr.context));
    const auto lp = log_softmax(out.logits.row(out.logits.rows() - 1));
    auto& a = acc[pr.label];
    a.first += std::exp(lp[static_cast<std::size_t>(pr.correct)]);
    a.second += 1;
  }
  std::map<std::string, double> res;
  for (const auto& [k, v] : acc) res[k] = std::min(1.0, v.first / v.second);
  return res;
}

struct TokenProbTrace {
  std::string label;
  std::vector<std::pair<int, double>> points;  // (collect_round, probability)

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& [r, p] : points) pts.push_back({{"collect_round", r}, {"probability", p}});
    return {{"label", label}, {"points", pts}};
  }
};

// Accumulates one trace per label as checkpoints arrive.
class CriticalProbTracker {
 public:
  explicit CriticalProbTracker(std::vector<CriticalProbe> probes) : probes_(std::move(probes)) {}

  template <class T>
  std::map<std::string, double> record(int collect_round, const Model<T>& model) {
    auto probs = probe_probabilities(model, std::span<const CriticalProbe>(probes_));
    for (const auto& [label, p] : probs) traces_[label].points.emplace_back(collect_round, p);
    for (auto& [label, t] : traces_) t.label = label;
    return probs;
  }

  std::vector<TokenProbTrace> traces() const {
    std::vector<TokenProbTrace> out;
    for (const auto& [k, v] : traces_) out.push_back(v);
    return out;
  }

  const std::vector<CriticalProbe>& probes() const { return probes_; }

 private:
  std::vector<CriticalProbe> probes_;
  std::map<std::string, TokenProbTrace> traces_;
};

template <class T, class Stream>
std::vector<TokenProbTrace> track_critical_probabilities(const Stream& checkpoints,
                                                         std::span<const CriticalProbe> probes) {
  CriticalProbTracker tr(std::vector<CriticalProbe>(probes.begin(), probes.end()));
  for (const auto& [round, model] : checkpoints) tr.template record<T>(round, model);
  return tr.traces();
}

struct CertaintyTranscript {
  std::string ansi;
  std::string html;
};

namespace detail {

// J = 1 -> green, J = 0 -> red.
inline std::array<int, 3> certainty_rgb(double j) {
  if (!(j >= 0.0)) j = 0.0;
  if (j > 1.0) j = 1.0;
  return {static_cast<int>(std::lround(255.0 * (1.0 - j))), static_cast<int>(std::lround(255.0 * j)), 0};
}

inline std::string html_escape(char c) {
  switch (c) {
    case '&': return "&amp;";
    case '<': return "&lt;";
    case '>': return "&gt;";
    case '"': return "&quot;";
    default: return std::string(1, c);
  }
}

}  // namespace detail

inline CertaintyTranscript render_certainty_transcript(const CertaintyProfile& p,
                                                       const Vocabulary& vocab = Vocabulary::standard()) {
  CertaintyTranscript t;
  t.html =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>certainty</title></head>\n"
      "<body style=\"background:#fff\"><pre style=\"font-family:monospace\">";
  for (std::size_t i = 0; i < p.size(); ++i) {
    const char c = vocab.char_of(p.tokens[i]);
    const auto rgb = detail::certainty_rgb(p.certainty[i]);
    char esc[48];
    std::snprintf(esc, sizeof esc, "\x1b[38;2;%d;%d;%dm", rgb[0], rgb[1], rgb[2]);
    if (c == '\n') {
      // color a visible marker, keep the line break uncolored
      t.ansi += std::string(esc) + "\\n\x1b[0m\n";
    } else {
      t.ansi += std::string(esc) + c + "\x1b[0m";
    }
    char span[96];
    std::snprintf(span, sizeof span, "<span style=\"color:#%02x%02x%02x\" title=\"%.4f\">", rgb[0], rgb[1],
                  rgb[2], p.certainty[i]);
    t.html += span;
    t.html += c == '\n' ? std::string("&#8629;</span>\n") : detail::html_escape(c) + "</span>";
  }
  t.ansi += "\x1b[0m\n";
  t.html += "</pre></body></html>\n";
  return t;
}

}  // namespace kllab
