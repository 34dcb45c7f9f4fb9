#include <gtest/gtest.h>

#include <cmath>

#include "kllab/a2c.hpp"
#include "kllab/rlenv.hpp"
#include "support.hpp"

using namespace kllab;
using namespace kllab::testing;

namespace {

RLConfig only(double vf, double ent, double alpha, KlMode mode = KlMode::standard, double beta = 0.0) {
  RLConfig c;
  c.vf_coef = vf;
  c.ent_coef = ent;
  c.kl_coef = alpha;
  c.kl_mode = mode;
  c.beta = beta;
  return c;
}

// The hand-worked instance: 3 tokens, 2 steps, reward 1, gamma 1.
struct HandInstance {
  RowMat<double> logits{2, 3};
  Vec<double> values{2};
  std::vector<StepTargets> steps;
  HandInstance() {
    logits << 1.0, 0.0, -1.0, 0.5, 0.5, 0.0;
    values << 0.2, 0.6;
    steps = {{0, 0.8, 1.0, -0.5, 0.9}, {2, 0.4, 1.0, -1.2, 0.3}};
  }
};

std::vector<Trajectory> random_batch(int n, std::uint64_t seed, int vocab = 5) {
  Rng rng(seed);
  std::vector<Trajectory> b;
  for (int i = 0; i < n; ++i)
    b.push_back(synthetic_trajectory({1, 3}, 3 + i, vocab, i % 2 ? 1.0 : 0.0, rng));
  return b;
}

ModelConfig env_config() {
  ModelConfig c = tiny_config(33);
  c.context_len = 96;
  return c;
}

}  // namespace

TEST(Returns, TerminalOnlyReward) {
  Trajectory tr;
  tr.actions = {1, 2, 3};
  tr.values = {0.1, 0.2, 0.3};
  tr.reward = 1.0;
  auto ra = returns_and_advantages(tr, 1.0);
  EXPECT_EQ(ra.returns, (std::vector<double>{1, 1, 1}));
  tr.reward = 0.0;
  ra = returns_and_advantages(tr, 1.0);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(ra.advantages[t], -tr.values[t]);
  tr.reward = 1.0;
  ra = returns_and_advantages(tr, 0.9);
  EXPECT_NEAR(ra.returns[0], 0.81, 1e-15);
  EXPECT_NEAR(ra.returns[1], 0.9, 1e-15);
  EXPECT_NEAR(ra.returns[2], 1.0, 1e-15);
}

TEST(Returns, UndiscountedIdentityOnRandomTrajectories) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double r = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    const auto tr = synthetic_trajectory({1}, static_cast<int>(uniform_int(rng, 1, 60)), 33, r, rng);
    const auto ra = returns_and_advantages(tr, 1.0);
    for (std::size_t t = 0; t < tr.size(); ++t) {
      ASSERT_EQ(ra.returns[t], r);
      ASSERT_EQ(ra.advantages[t], r - tr.values[t]);
    }
  }
}

TEST(KlTerms, StandardEstimator) {
  EXPECT_EQ(kl_term_standard(-1.3, -1.3), 0.0);
  EXPECT_NEAR(kl_term_standard(-1.0, -1.2), 0.02, 1e-12);
  EXPECT_NEAR(kl_term_standard(-1.2, -1.0), 0.02, 1e-12);
}

TEST(KlTerms, PrioritizedWeights) {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double a = -3 * uniform01(rng), b = -3 * uniform01(rng), j = uniform01(rng);
    ASSERT_EQ(kl_term_prioritized(a, b, j, 0.0), kl_term_standard(a, b));
    ASSERT_GE(kl_term_prioritized(a, b, j, 5.0), 0.0);
    ASSERT_LE(kl_term_prioritized(a, b, j, 10.0), kl_term_prioritized(a, b, j, 5.0));
    ASSERT_EQ(kl_term_prioritized(a, b, 1.0, 10.0), kl_term_standard(a, b));
  }
  EXPECT_EQ(kl_term_prioritized(-0.1, -3.0, 0.0, 1.0), 0.0);
  EXPECT_NEAR(certainty_weight(0.99, 150.0), 0.2215, 1e-4);
  EXPECT_NEAR(kl_term_prioritized(-1.0, -1.2, 0.99, 150.0) / kl_term_standard(-1.0, -1.2), 0.2215, 1e-4);
}

TEST(KlTerms, EstimatorTracksExactKlForNearIdenticalPolicies) {
  const std::vector<double> q{0.30, 0.25, 0.20, 0.15, 0.10};
  const std::vector<double> p{0.28, 0.27, 0.19, 0.16, 0.10};
  double exact = 0;
  for (int i = 0; i < 5; ++i) exact += q[i] * std::log(q[i] / p[i]);
  Rng rng(12);
  std::vector<double> lq(5);
  for (int i = 0; i < 5; ++i) lq[i] = std::log(q[i]);
  double est = 0;
  const int n = 200000;
  for (int k = 0; k < n; ++k) {
    const auto a = static_cast<std::size_t>(sample_categorical(lq, 1.0, rng));
    est += kl_term_standard(std::log(q[a]), std::log(p[a]));
  }
  est /= n;
  // second-order estimator: agreement to leading order in the divergence
  EXPECT_NEAR(est, exact, 0.1 * exact);
}

TEST(A2cLoss, HandWorkedOracle) {
  HandInstance h;
  RLConfig cfg = RLConfig::standard_kl();
  LossBreakdown lb;
  accumulate_a2c_loss<double>(h.logits, h.values, 0, h.steps, cfg, 0.5, lb);
  lb.finalize(cfg);
  EXPECT_NEAR(lb.pg_loss, 0.4546464033671589, 1e-6);
  EXPECT_NEAR(lb.value_loss, 0.4000000000000001, 1e-6);
  EXPECT_NEAR(lb.entropy_term, 0.9533819692982111, 1e-6);
  EXPECT_NEAR(lb.kl_term, 0.01877775589761201, 1e-6);
  EXPECT_NEAR(lb.total, 0.6819472713586299, 1e-6);
  EXPECT_NEAR(lb.mean_certainty_weight, 1.0, 1e-12);

  RLConfig pri = RLConfig::prioritized_kl();
  pri.beta = 2.0;
  LossBreakdown lp;
  accumulate_a2c_loss<double>(h.logits, h.values, 0, h.steps, pri, 0.5, lp);
  lp.finalize(pri);
  EXPECT_NEAR(lp.kl_term, 0.0032265964359106383, 1e-6);
  EXPECT_NEAR(lp.total, 0.510302694562063, 1e-6);
  EXPECT_NEAR(lp.mean_certainty_weight, 0.45, 1e-12);
}

TEST(A2cLoss, OutputGradientsMatchFiniteDifferences) {
  HandInstance h;
  for (const RLConfig& cfg : {RLConfig::standard_kl(), RLConfig::prioritized_kl(), only(0.7, 0.3, 2.0)}) {
    RowMat<double> dl = RowMat<double>::Zero(2, 3);
    Vec<double> dv = Vec<double>::Zero(2);
    LossBreakdown lb;
    accumulate_a2c_loss<double>(h.logits, h.values, 0, h.steps, cfg, 0.5, lb, &dl, &dv);
    auto total = [&](const RowMat<double>& z, const Vec<double>& v) {
      LossBreakdown x;
      accumulate_a2c_loss<double>(z, v, 0, h.steps, cfg, 0.5, x);
      x.finalize(cfg);
      return x.total;
    };
    const double eps = 1e-6;
    for (int r = 0; r < 2; ++r) {
      for (int j = 0; j < 3; ++j) {
        RowMat<double> zp = h.logits, zm = h.logits;
        zp(r, j) += eps;
        zm(r, j) -= eps;
        EXPECT_NEAR(dl(r, j), (total(zp, h.values) - total(zm, h.values)) / (2 * eps), 1e-8);
      }
      Vec<double> vp = h.values, vm = h.values;
      vp(r) += eps;
      vm(r) -= eps;
      EXPECT_NEAR(dv(r), (total(h.logits, vp) - total(h.logits, vm)) / (2 * eps), 1e-8);
    }
  }
}

struct GradCase {
  const char* name;
  RLConfig cfg;
  friend void PrintTo(const GradCase& c, std::ostream* os) { *os << c.name; }
};

class A2cGradient : public ::testing::TestWithParam<GradCase> {};

TEST_P(A2cGradient, MatchesFiniteDifferences) {
  const RLConfig cfg = GetParam().cfg;
  auto m = random_model<double>(tiny_config(), 21);
  const auto batch = random_batch(3, 5);
  std::vector<double> g(m.num_params(), 0.0);
  a2c_loss(m, std::span<const Trajectory>(batch), cfg, std::span<double>(g));
  auto loss = [&](const Model<double>& mm) { return a2c_loss(mm, std::span<const Trajectory>(batch), cfg).total; };
  const auto r = directional_grad_check(m, loss, g, 100, 77);
  EXPECT_EQ(r.directions, 100);
  EXPECT_LT(r.worst_rel_error, 1e-3) << GetParam().name;
}

INSTANTIATE_TEST_SUITE_P(Components, A2cGradient,
                         ::testing::Values(GradCase{"policy", only(0, 0, 0)}, GradCase{"value", only(1, 0, 0)},
                                           GradCase{"entropy", only(0, 1, 0)},
                                           GradCase{"kl_standard", only(0, 0, 1)},
                                           GradCase{"kl_prioritized", only(0, 0, 1, KlMode::prioritized, 3.0)},
                                           GradCase{"full", RLConfig::prioritized_kl()}),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(A2cLoss, ZeroAdvantageLeavesOnlyValueGradient) {
  auto m = random_model<double>(tiny_config(), 22);
  auto batch = random_batch(2, 6);
  // advantages vanish when the recorded values equal the returns
  for (auto& tr : batch)
    for (auto& v : tr.values) v = tr.reward;
  std::vector<double> g_all(m.num_params(), 0.0), g_value(m.num_params(), 0.0), g_none(m.num_params(), 0.0);
  a2c_loss(m, std::span<const Trajectory>(batch), only(0.1, 0, 0), std::span<double>(g_all));
  std::size_t n_tok = 0;
  for (const auto& tr : batch) n_tok += tr.size();
  for (const auto& tr : batch) {
    ForwardCache<double> c;
    const auto in = tr.scoring_input();
    const auto out = forward(m, std::span<const TokenId>(in), c);
    Vec<double> dv = Vec<double>::Zero(out.values.size());
    for (std::size_t t = 0; t < tr.size(); ++t) {
      const auto row = static_cast<Eigen::Index>(tr.prompt.size() - 1 + t);
      dv(row) = 0.1 * 2.0 * (out.values(row) - tr.reward) / static_cast<double>(n_tok);
    }
    backward(m, c, RowMat<double>(RowMat<double>::Zero(out.logits.rows(), out.logits.cols())), dv,
             std::span<double>(g_value));
  }
  for (std::size_t i = 0; i < g_all.size(); ++i) ASSERT_NEAR(g_all[i], g_value[i], 1e-12);
  a2c_loss(m, std::span<const Trajectory>(batch), only(0, 0, 0), std::span<double>(g_none));
  for (double x : g_none) ASSERT_EQ(x, 0.0);
}

TEST(A2cLoss, LargePenaltyPullsTowardReference) {
  auto m = random_model<float>(tiny_config(), 23);
  auto batch = random_batch(4, 7);
  RLConfig cfg = only(0, 0, 1000);
  cfg.learning_rate = 1e-3;
  const double before = a2c_loss(m, std::span<const Trajectory>(batch), cfg).kl_term;
  Adam<float> opt(m.num_params(), {cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0, 1.0});
  a2c_update(m, opt, std::span<const Trajectory>(batch), cfg);
  const double after = a2c_loss(m, std::span<const Trajectory>(batch), cfg).kl_term;
  EXPECT_LE(after, before);
}

TEST(A2cLoss, NonFiniteComponentIsNamed) {
  auto m = random_model<float>(tiny_config(), 24);
  auto batch = random_batch(1, 8);
  batch[0].logp_old[0] = NAN;
  Adam<float> opt(m.num_params(), {});
  try {
    a2c_update(m, opt, std::span<const Trajectory>(batch), RLConfig::standard_kl());
    FAIL();
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.component(), "kl_term");
  }
}

TEST(RLConfigs, PresetsValidateAndRoundTrip) {
  const auto t3 = RLConfig::standard_kl();
  EXPECT_EQ(t3.learning_rate, 1e-6);
  EXPECT_EQ(t3.gamma, 1.0);
  EXPECT_EQ(t3.vf_coef, 0.1);
  EXPECT_EQ(t3.ent_coef, 0.0005);
  EXPECT_EQ(t3.kl_coef, 10.0);
  EXPECT_EQ(t3.episodes_per_collect, 50);
  EXPECT_EQ(t3.episodes_per_test, 100);
  EXPECT_EQ(t3.repeats_per_collect, 1);
  const auto t4 = RLConfig::prioritized_kl();
  EXPECT_EQ(t4.kl_coef, 5.0);
  EXPECT_EQ(t4.beta, 150.0);
  EXPECT_EQ(t4.kl_mode, KlMode::prioritized);
  for (const auto& c : {t3, t4}) {
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(RLConfig::from_json(c.to_json()).to_json(), c.to_json());
  }
  RLConfig bad = t3;
  bad.beta = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = t3;
  bad.gamma = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(parse_kl_mode("reverse"), std::invalid_argument);
}

TEST(Env, StepRewardAndTermination) {
  const auto& v = Vocabulary::standard();
  const auto p = AdditionProblem::from_digits("12", "9");
  auto s = start_episode(p, 500);
  const auto doc = render_scratchpad(p);
  const auto gold = v.encode(doc.body_text + doc.answer_text);
  for (auto t : gold) EXPECT_EQ(step(s, t).reward, 0.0);
  const auto last = step(s, v.eos());
  EXPECT_TRUE(last.done);
  EXPECT_EQ(last.reward, 1.0);
  EXPECT_EQ(s.terminal_reason, TerminalReason::eos);
  EXPECT_THROW(step(s, 1), EpisodeError);

  auto wrong = start_episode(p, 500);
  for (auto t : v.encode("END\n2 2")) step(wrong, t);
  EXPECT_EQ(step(wrong, v.eos()).reward, 0.0);

  auto trunc = start_episode(p, 3);
  step(trunc, 1);
  step(trunc, 2);
  const auto o = step(trunc, 3);
  EXPECT_TRUE(o.done);
  EXPECT_EQ(o.reward, 0.0);
  EXPECT_EQ(trunc.terminal_reason, TerminalReason::truncated);
  EXPECT_THROW(step(trunc, 1), EpisodeError);
  auto oob = start_episode(p, 3);
  EXPECT_THROW(step(oob, 40), std::out_of_range);
}

TEST(Env, CollectIsSeededAndScoresReference) {
  const auto policy = random_model<float>(env_config(), 31, 0.1);
  CollectConfig cc;
  cc.n_episodes = 3;
  cc.n_digits = 2;
  const auto a = collect(policy, policy, cc, 5);
  const auto b = collect(policy, policy, cc, 5);
  ASSERT_EQ(a.trajectories.size(), 3u);
  EXPECT_TRUE(a.errors.empty());
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& ta = a.trajectories[i];
    EXPECT_EQ(ta.actions, b.trajectories[i].actions);
    EXPECT_EQ(ta.problem.longest(), 2u);
    EXPECT_LE(ta.prompt.size() + ta.size(), 97u);
    ASSERT_EQ(ta.logp_old.size(), ta.size());
    // reference == policy: scoring reproduces the sampling log-probabilities
    for (std::size_t t = 0; t < ta.size(); ++t) EXPECT_NEAR(ta.logp_old[t], ta.logp_new[t], 1e-4);
  }
}

TEST(Finetune, ZeroRoundsIsIdentity) {
  const auto m = random_model<float>(env_config(), 32, 0.1);
  RLConfig cfg = RLConfig::standard_kl();
  cfg.collect_rounds = 0;
  cfg.test_every = 0;
  EXPECT_EQ(finetune(m, cfg).policy, m);
}

TEST(Finetune, BetaZeroMatchesStandardAndReferenceStaysFrozen) {
  const auto m = random_model<float>(env_config(), 33, 0.1);
  const auto copy = m;
  RLConfig std_cfg = RLConfig::standard_kl();
  std_cfg.learning_rate = 1e-3;
  std_cfg.episodes_per_collect = 2;
  std_cfg.episodes_per_test = 2;
  std_cfg.collect_rounds = 2;
  std_cfg.test_every = 1;
  std_cfg.rl_digits = 1;
  std_cfg.seed = 3;
  RLConfig pri = std_cfg;
  pri.kl_mode = KlMode::prioritized;
  pri.beta = 0.0;
  const auto a = finetune(m, std_cfg), b = finetune(m, pri);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].to_json(), b.records[i].to_json());
  EXPECT_EQ(a.policy, b.policy);
  EXPECT_FALSE(a.policy == m);
  EXPECT_EQ(m, copy);
}
