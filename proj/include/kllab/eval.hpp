#pragma once

// Accuracy evaluation on freshly sampled addition problems with percentile
// bootstrap confidence intervals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kllab/generate.hpp"
#include "kllab/model.hpp"
#include "kllab/rng.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

enum class EvalMode { identical, varying };

inline const char* to_string(EvalMode m) { return m == EvalMode::identical ? "identical" : "varying"; }

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "identical") return EvalMode::identical;
  if (s == "varying") return EvalMode::varying;
  throw std::invalid_argument("unknown eval mode '" + s + "' (identical|varying)");
}

struct EvalConfig {
  EvalMode mode = EvalMode::identical;
  int digit_length = 3;
  int n_examples = 1000;
  int n_resamples = 10000;
  double confidence = 0.95;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_examples < 1) throw std::invalid_argument("n_examples must be >= 1");
    if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must be in (0, 1)");
    if (digit_length < 1) throw std::invalid_argument("digit_length must be >= 1");
    if (n_resamples < 1) throw std::invalid_argument("n_resamples must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"mode", to_string(mode)},   {"digit_length", digit_length}, {"n_examples", n_examples},
            {"n_resamples", n_resamples}, {"confidence", confidence},     {"seed", seed}};
  }

  static EvalConfig from_json(const nlohmann::json& j) {
    EvalConfig c;
    if (j.contains("mode")) c.mode = parse_eval_mode(j.at("mode").get<std::string>());
    c.digit_length = j.value("digit_length", c.digit_length);
    c.n_examples = j.value("n_examples", c.n_examples);
    c.n_resamples = j.value("n_resamples", c.n_resamples);
    c.confidence = j.value("confidence", c.confidence);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct ExampleOutcome {
  AdditionProblem problem;
  Verdict verdict = Verdict::malformed;
  std::string generated;
};

struct EvalReport {
  EvalConfig config;
  double accuracy = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_examples = 0;
  int n_correct = 0;
  std::vector<ExampleOutcome> outcomes;

  nlohmann::json to_json(bool with_outcomes = false) const {
    nlohmann::json j = {{"mode", to_string(config.mode)},  {"digits", config.digit_length},
                        {"n_examples", n_examples},        {"n_correct", n_correct},
                        {"accuracy", accuracy},            {"ci_low", ci_low},
                        {"ci_high", ci_high},              {"confidence", config.confidence},
                        {"n_resamples", config.n_resamples}, {"seed", config.seed}};
    if (with_outcomes) {
      auto arr = nlohmann::json::array();
      for (const auto& o : outcomes)
        arr.push_back({{"a", o.problem.a}, {"b", o.problem.b}, {"verdict", kllab::to_string(o.verdict)}});
      j["outcomes"] = arr;
    }
    return j;
  }
};

// Percentile bootstrap over resampled means of a 0/1 outcome vector.
inline std::pair<double, double> bootstrap_ci(std::span<const std::uint8_t> outcomes, int n_resamples,
                                              double confidence, std::uint64_t seed) {
  if (outcomes.empty()) throw std::invalid_argument("bootstrap_ci: empty outcome vector");
  Rng rng(derive_seed(seed, "bootstrap"));
  const auto n = static_cast<std::int64_t>(outcomes.size());
  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (auto& m : means) {
    std::int64_t ones = 0;
    for (std::int64_t i = 0; i < n; ++i) ones += outcomes[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    m = static_cast<double>(ones) / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double alpha = 1.0 - confidence;
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

// Same percentile bootstrap for the mean of real-valued samples.
inline std::pair<double, double> bootstrap_mean_ci(std::span<const double> xs, int n_resamples, double confidence,
                                                   std::uint64_t seed) {
  if (xs.empty()) throw std::invalid_argument("bootstrap_mean_ci: no samples");
  Rng rng(derive_seed(seed, "bootstrap-mean"));
  const auto n = static_cast<std::int64_t>(xs.size());
  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += xs[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double alpha = 1.0 - confidence;
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

inline std::vector<AdditionProblem> eval_problems(const EvalConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, std::string("eval:") + to_string(cfg.mode), static_cast<std::uint64_t>(cfg.digit_length)));
  std::vector<AdditionProblem> out;
  out.reserve(static_cast<std::size_t>(cfg.n_examples));
  for (int i = 0; i < cfg.n_examples; ++i)
    out.push_back(cfg.mode == EvalMode::identical ? sample_problem_identical(cfg.digit_length, rng)
                                                  : sample_problem_longest(cfg.digit_length, rng));
  return out;
}

// Greedy completion of the rendered prompt; the continuation text includes the
// end-of-sequence marker when one was emitted.
template <class T>
std::string greedy_completion(const Model<T>& model, const AdditionProblem& p,
                              const Vocabulary& vocab = Vocabulary::standard()) {
  const auto prompt = vocab.encode(render_prompt(p));
  GenerationConfig gen;
  gen.mode = DecodeMode::greedy;
  gen.max_new_tokens = model.config().context_len - static_cast<int>(prompt.size());
  if (gen.max_new_tokens < 1) return {};
  Rng unused(0);
  const auto res = generate(model, std::span<const TokenId>(prompt), gen, unused, vocab.eos());
  return vocab.decode(res.tokens);
}

// `complete` maps a problem to the generated continuation text. Any failure to
// produce a parsable answer is scored as incorrect.
template <class Completion>
EvalReport evaluate_with(Completion&& complete, const EvalConfig& cfg) {
  cfg.validate();
  EvalReport rep;
  rep.config = cfg;
  rep.n_examples = cfg.n_examples;
  std::vector<std::uint8_t> bits;
  for (auto& p : eval_problems(cfg)) {
    ExampleOutcome o{p, Verdict::malformed, {}};
    try {
      o.generated = complete(p);
      o.verdict = verify_answer(o.generated, p);
    } catch (const std::exception&) {
      o.verdict = Verdict::malformed;
    }
    bits.push_back(o.verdict == Verdict::correct ? 1 : 0);
    rep.n_correct += bits.back();
    rep.outcomes.push_back(std::move(o));
  }
  rep.accuracy = static_cast<double>(rep.n_correct) / static_cast<double>(rep.n_examples);
  auto [lo, hi] = bootstrap_ci(bits, cfg.n_resamples, cfg.confidence, cfg.seed);
  rep.ci_low = std::min(lo, rep.accuracy);
  rep.ci_high = std::max(hi, rep.accuracy);
  return rep;
}

template <class T>
EvalReport evaluate(const Model<T>& model, const EvalConfig& cfg) {
  return evaluate_with([&model](const AdditionProblem& p) { return greedy_completion(model, p); }, cfg);
}

// Fraction of problems answered correctly under greedy decoding.
template <class T>
double greedy_accuracy(const Model<T>& model, std::span<const AdditionProblem> problems) {
  if (problems.empty()) return 0.0;
  int ok = 0;
  for (const auto& p : problems) ok += verify_answer(greedy_completion(model, p), p) == Verdict::correct;
  return static_cast<double>(ok) / static_cast<double>(problems.size());
}

// Accuracy table with rows = pre-training lengths N and columns = N..N+3.
struct AccuracyTable {
  EvalMode mode = EvalMode::identical;
  std::vector<int> n_values;
  std::vector<std::vector<EvalReport>> cells;  // cells[row][offset]

  std::string to_text() const {
    std::ostringstream os;
    os << "Accuracy (" << to_string(mode) << " digit lengths)\n";
    os << std::left << std::setw(8) << "N";
    for (int k = 0; k < 4; ++k) os << std::setw(22) << (k == 0 ? std::string("N") : "N+" + std::to_string(k));
    os << "\n";
    for (std::size_t r = 0; r < n_values.size(); ++r) {
      os << std::left << std::setw(8) << n_values[r];
      for (const auto& c : cells[r]) {
        std::ostringstream cell;
        const double half = (c.ci_high - c.ci_low) / 2.0;
        cell << std::fixed << std::setprecision(1) << 100.0 * c.accuracy << "% +- " << 100.0 * half << "%";
        os << std::setw(22) << cell.str();
      }
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < n_values.size(); ++r) {
      nlohmann::json cols = nlohmann::json::array();
      for (const auto& c : cells[r]) cols.push_back(c.to_json());
      rows.push_back({{"n", n_values[r]}, {"columns", cols}});
    }
    return {{"mode", to_string(mode)}, {"rows", rows}};
  }
};

}  // namespace kllab
