#include <gtest/gtest.h>

#include "kllab/eval.hpp"
#include "support.hpp"

using namespace kllab;

namespace {

std::string gold_completion(const AdditionProblem& p) {
  const auto doc = render_scratchpad(p);
  return doc.body_text + doc.answer_text + "$";
}

}  // namespace

TEST(Bootstrap, DegenerateVectors) {
  const std::vector<std::uint8_t> ones(100, 1), zeros(100, 0);
  EXPECT_EQ(bootstrap_ci(ones, 1000, 0.95, 1), (std::pair<double, double>{1.0, 1.0}));
  EXPECT_EQ(bootstrap_ci(zeros, 1000, 0.95, 1), (std::pair<double, double>{0.0, 0.0}));
  EXPECT_THROW(bootstrap_ci(std::vector<std::uint8_t>{}, 10, 0.95, 1), std::invalid_argument);
}

TEST(Bootstrap, HalfOnesMatchesBinomialApproximation) {
  std::vector<std::uint8_t> v(1000, 0);
  for (int i = 0; i < 500; ++i) v[i * 2] = 1;
  const auto [lo, hi] = bootstrap_ci(v, 10000, 0.95, 3);
  EXPECT_NEAR(lo, 0.469, 0.004);
  EXPECT_NEAR(hi, 0.531, 0.004);
  EXPECT_EQ(bootstrap_ci(v, 10000, 0.95, 3), bootstrap_ci(v, 10000, 0.95, 3));
}

TEST(Bootstrap, WidthShrinksWithMoreExamples) {
  Rng rng(9);
  std::vector<std::uint8_t> big(4000);
  for (auto& b : big) b = uniform01(rng) < 0.3;
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    double prev = 2.0;
    bool ok = true;
    for (std::size_t n : {250u, 1000u, 4000u}) {
      const auto [lo, hi] = bootstrap_ci(std::span<const std::uint8_t>(big.data(), n), 2000, 0.95, seed);
      ok = ok && hi - lo < prev;
      prev = hi - lo;
    }
    monotone += ok;
  }
  EXPECT_EQ(monotone, 10);
}

TEST(Bootstrap, MeanCiOfReals) {
  std::vector<double> xs{0.1, 0.2, 0.3, 0.4, 0.5};
  const auto [lo, hi] = bootstrap_mean_ci(xs, 5000, 0.95, 1);
  EXPECT_LT(lo, 0.3);
  EXPECT_GT(hi, 0.3);
  EXPECT_GE(lo, 0.1);
  EXPECT_LE(hi, 0.5);
}

TEST(Evaluate, PerfectPolicy) {
  EvalConfig cfg;
  cfg.digit_length = 4;
  cfg.n_examples = 200;
  cfg.n_resamples = 500;
  const auto rep = evaluate_with(gold_completion, cfg);
  EXPECT_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.ci_low, 1.0);
  EXPECT_EQ(rep.ci_high, 1.0);
  EXPECT_EQ(rep.n_correct, 200);
}

TEST(Evaluate, ImmediateEosAndFailuresScoreZero) {
  EvalConfig cfg;
  cfg.n_examples = 50;
  cfg.n_resamples = 200;
  EXPECT_EQ(evaluate_with([](const AdditionProblem&) { return std::string("$"); }, cfg).accuracy, 0.0);
  const auto rep =
      evaluate_with([](const AdditionProblem&) -> std::string { throw std::runtime_error("decoder blew up"); }, cfg);
  EXPECT_EQ(rep.accuracy, 0.0);
  for (const auto& o : rep.outcomes) EXPECT_EQ(o.verdict, Verdict::malformed);
}

TEST(Evaluate, AccuracyIsExactFractionInsideCi) {
  EvalConfig cfg;
  cfg.digit_length = 3;
  cfg.n_examples = 300;
  cfg.n_resamples = 1000;
  int k = 0;
  const auto rep = evaluate_with(
      [&k](const AdditionProblem& p) { return (k++ % 3 == 0) ? std::string("END\n0$") : gold_completion(p); }, cfg);
  EXPECT_EQ(rep.n_correct, 200);
  EXPECT_EQ(rep.accuracy, 200.0 / 300.0);
  EXPECT_LE(rep.ci_low, rep.accuracy);
  EXPECT_GE(rep.ci_high, rep.accuracy);
}

TEST(Evaluate, ProblemModes) {
  EvalConfig cfg;
  cfg.digit_length = 5;
  cfg.n_examples = 300;
  cfg.mode = EvalMode::identical;
  for (const auto& p : eval_problems(cfg)) {
    EXPECT_EQ(p.len_a(), 5u);
    EXPECT_EQ(p.len_b(), 5u);
  }
  cfg.mode = EvalMode::varying;
  bool shorter = false;
  for (const auto& p : eval_problems(cfg)) {
    EXPECT_EQ(p.longest(), 5u);
    shorter = shorter || std::min(p.len_a(), p.len_b()) < 5u;
  }
  EXPECT_TRUE(shorter);
  EXPECT_EQ(eval_problems(cfg), eval_problems(cfg));
}

TEST(Evaluate, ModelIsNotMutated) {
  auto cfg_m = kllab::testing::tiny_config(33);
  cfg_m.context_len = 64;
  const auto m = Model<float>::initialized(cfg_m);
  const auto before = m;
  EvalConfig cfg;
  cfg.digit_length = 1;
  cfg.n_examples = 3;
  cfg.n_resamples = 10;
  const auto rep = evaluate(m, cfg);
  EXPECT_EQ(rep.n_examples, 3);
  EXPECT_EQ(m, before);
}

TEST(Evaluate, ConfigValidation) {
  EvalConfig cfg;
  cfg.n_examples = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.confidence = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(EvalConfig::from_json(EvalConfig{}.to_json()).to_json(), EvalConfig{}.to_json());
}

TEST(AccuracyTableText, RowsAndColumns) {
  AccuracyTable t{EvalMode::identical, {3}, {}};
  std::vector<EvalReport> row(4);
  row[0].accuracy = 0.99;
  row[0].ci_low = 0.98;
  row[0].ci_high = 1.0;
  t.cells.push_back(row);
  const auto txt = t.to_text();
  EXPECT_NE(txt.find("N+3"), std::string::npos);
  EXPECT_NE(txt.find("99.0% +- 1.0%"), std::string::npos);
  EXPECT_EQ(t.to_json()["rows"][0]["columns"].size(), 4u);
}
