#pragma once

// Advantage actor-critic fine-tuning with a KL penalty toward the frozen
// pre-trained policy. The penalty lives in the loss:
//
//   total = pg_loss + vf_coef * value_loss - ent_coef * entropy + kl_coef * kl
//
// with per-token KL estimate 0.5 * (log pi_new(a|s) - log pi_old(a|s))^2. In
// prioritized mode each token's term is scaled by J_old(s)^beta, where J_old
// is the normalized negentropy of the reference policy at s. The weight is a
// constant with respect to the trainable parameters.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kllab/eval.hpp"
#include "kllab/model.hpp"
#include "kllab/optim.hpp"
#include "kllab/rlenv.hpp"

namespace kllab {

enum class KlMode { standard, prioritized };

inline const char* to_string(KlMode m) { return m == KlMode::standard ? "standard" : "prioritized"; }

inline KlMode parse_kl_mode(const std::string& s) {
  if (s == "standard") return KlMode::standard;
  if (s == "prioritized") return KlMode::prioritized;
  throw std::invalid_argument("unknown kl mode '" + s + "' (standard|prioritized)");
}

struct RLConfig {
  double learning_rate = 1e-6;
  double gamma = 1.0;
  double vf_coef = 0.1;
  double ent_coef = 0.0005;
  double kl_coef = 10.0;
  KlMode kl_mode = KlMode::standard;
  double beta = 0.0;
  int episodes_per_collect = 50;
  int repeats_per_collect = 1;
  int episodes_per_test = 100;
  int rl_digits = 4;
  std::uint64_t seed = 0;
  // Run-length and plumbing settings.
  int collect_rounds = 100;
  int test_every = 10;  // rounds between greedy tests; 0 disables
  double temperature = 1.0;
  int max_new_tokens = 0;  // 0: up to the context limit
  double grad_clip = 1.0;

  // Pre-training-level comparison hyperparameters.
  static RLConfig standard_kl() { return RLConfig{}; }

  // Prioritized-KL hyperparameters.
  static RLConfig prioritized_kl() {
    RLConfig c;
    c.kl_coef = 5.0;
    c.kl_mode = KlMode::prioritized;
    c.beta = 150.0;
    return c;
  }

  void validate() const {
    if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
    if (kl_coef < 0.0) throw std::invalid_argument("kl_coef (alpha) must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (episodes_per_collect < 1 || repeats_per_collect < 1 || episodes_per_test < 1 || rl_digits < 1 ||
        collect_rounds < 0 || test_every < 0)
      throw std::invalid_argument("RL counts must be positive");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"gamma", gamma},
            {"vf_coef", vf_coef},
            {"ent_coef", ent_coef},
            {"kl_coef", kl_coef},
            {"kl_mode", to_string(kl_mode)},
            {"beta", beta},
            {"episodes_per_collect", episodes_per_collect},
            {"repeats_per_collect", repeats_per_collect},
            {"episodes_per_test", episodes_per_test},
            {"rl_digits", rl_digits},
            {"seed", seed},
            {"collect_rounds", collect_rounds},
            {"test_every", test_every},
            {"temperature", temperature},
            {"max_new_tokens", max_new_tokens},
            {"grad_clip", grad_clip}};
  }

  // Fields absent from `j` keep the values of `base`.
  static RLConfig from_json(const nlohmann::json& j, const RLConfig& base) {
    RLConfig c = base;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.gamma = j.value("gamma", c.gamma);
    c.vf_coef = j.value("vf_coef", c.vf_coef);
    c.ent_coef = j.value("ent_coef", c.ent_coef);
    c.kl_coef = j.value("kl_coef", c.kl_coef);
    if (j.contains("kl_mode")) c.kl_mode = parse_kl_mode(j.at("kl_mode").get<std::string>());
    c.beta = j.value("beta", c.beta);
    c.episodes_per_collect = j.value("episodes_per_collect", c.episodes_per_collect);
    c.repeats_per_collect = j.value("repeats_per_collect", c.repeats_per_collect);
    c.episodes_per_test = j.value("episodes_per_test", c.episodes_per_test);
    c.rl_digits = j.value("rl_digits", c.rl_digits);
    c.seed = j.value("seed", c.seed);
    c.collect_rounds = j.value("collect_rounds", c.collect_rounds);
    c.test_every = j.value("test_every", c.test_every);
    c.temperature = j.value("temperature", c.temperature);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    return c;
  }
  static RLConfig from_json(const nlohmann::json& j);
};

inline RLConfig RLConfig::from_json(const nlohmann::json& j) { return from_json(j, RLConfig{}); }

struct LossBreakdown {
  double pg_loss = 0.0;
  double value_loss = 0.0;
  double entropy_term = 0.0;
  double kl_term = 0.0;
  double total = 0.0;
  double mean_certainty_weight = 0.0;  // mean J_old^beta (1 in standard mode)

  void finalize(const RLConfig& cfg) {
    total = pg_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy_term + cfg.kl_coef * kl_term;
  }

  bool finite() const {
    return std::isfinite(pg_loss) && std::isfinite(value_loss) && std::isfinite(entropy_term) &&
           std::isfinite(kl_term) && std::isfinite(total);
  }

  // Name of the first non-finite component, empty when all are finite.
  std::string first_non_finite() const {
    if (!std::isfinite(pg_loss)) return "pg_loss";
    if (!std::isfinite(value_loss)) return "value_loss";
    if (!std::isfinite(entropy_term)) return "entropy_term";
    if (!std::isfinite(kl_term)) return "kl_term";
    if (!std::isfinite(total)) return "total";
    return {};
  }
};

struct ReturnsAdvantages {
  std::vector<double> returns;
  std::vector<double> advantages;
};

inline ReturnsAdvantages returns_and_advantages(const Trajectory& tr, double gamma) {
  ReturnsAdvantages ra;
  ra.returns = discounted_returns(tr.size(), tr.reward, gamma);
  ra.advantages.resize(tr.size());
  for (std::size_t t = 0; t < tr.size(); ++t) ra.advantages[t] = ra.returns[t] - tr.values[t];
  return ra;
}

inline double kl_term_standard(double logp_new, double logp_old) {
  const double d = logp_new - logp_old;
  return 0.5 * d * d;
}

inline double certainty_weight(double certainty_old, double beta) {
  return beta == 0.0 ? 1.0 : std::pow(certainty_old, beta);
}

inline double kl_term_prioritized(double logp_new, double logp_old, double certainty_old, double beta) {
  return certainty_weight(certainty_old, beta) * kl_term_standard(logp_new, logp_old);
}

// Per-step inputs to the loss that do not depend on the trainable parameters.
struct StepTargets {
  TokenId action = 0;
  double advantage = 0.0;
  double ret = 0.0;
  double logp_old = 0.0;
  double certainty_old = 1.0;
};

// Adds the contributions of `steps` (each weighted by `token_scale`, usually
// 1 / total tokens in the batch) to `acc`. Rows `row0 + t` of `logits` and
// entries `row0 + t` of `values` belong to step t. When gradient buffers are
// given, d(total)/d(logits) and d(total)/d(values) are accumulated into them.
template <class T>
void accumulate_a2c_loss(const RowMat<T>& logits, const Vec<T>& values, Eigen::Index row0,
                         std::span<const StepTargets> steps, const RLConfig& cfg, double token_scale,
                         LossBreakdown& acc, RowMat<T>* dlogits = nullptr, Vec<T>* dvalues = nullptr) {
  const Eigen::Index V = logits.cols();
  const double beta = cfg.kl_mode == KlMode::prioritized ? cfg.beta : 0.0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const Eigen::Index row = row0 + static_cast<Eigen::Index>(t);
    const StepTargets& s = steps[t];
    const auto lp = log_softmax(logits.row(row));
    const double lpa = lp[static_cast<std::size_t>(s.action)];
    const double h = entropy_from_log_probs(lp);
    const double v = static_cast<double>(values(row));
    const double w = certainty_weight(s.certainty_old, beta);
    const double diff = lpa - s.logp_old;

    acc.pg_loss += token_scale * (-lpa * s.advantage);
    acc.value_loss += token_scale * (v - s.ret) * (v - s.ret);
    acc.entropy_term += token_scale * h;
    acc.kl_term += token_scale * w * 0.5 * diff * diff;
    acc.mean_certainty_weight += token_scale * w;

    if (dlogits) {
      // d(-lpa*A)/dz = -A (e_a - p); d(0.5 w diff^2)/dz = w diff (e_a - p);
      // d(-H)/dz_j = p_j (log p_j + H).
      const double coef_a = token_scale * (-s.advantage + cfg.kl_coef * w * diff);
      for (Eigen::Index j = 0; j < V; ++j) {
        const double lpj = lp[static_cast<std::size_t>(j)];
        const double pj = std::exp(lpj);
        const double ind = j == s.action ? 1.0 : 0.0;
        double g = coef_a * (ind - pj);
        if (cfg.ent_coef != 0.0 && pj > 0.0) g += token_scale * cfg.ent_coef * pj * (lpj + h);
        (*dlogits)(row, j) += static_cast<T>(g);
      }
    }
    if (dvalues) (*dvalues)(row) += static_cast<T>(token_scale * cfg.vf_coef * 2.0 * (v - s.ret));
  }
}

inline std::vector<StepTargets> step_targets(const Trajectory& tr, double gamma) {
  const auto ra = returns_and_advantages(tr, gamma);
  std::vector<StepTargets> out(tr.size());
  for (std::size_t t = 0; t < tr.size(); ++t)
    out[t] = {tr.actions[t], ra.advantages[t], ra.returns[t], tr.logp_old[t], tr.certainty_old[t]};
  return out;
}

// Loss (and optionally gradient w.r.t. parameters) of a batch under `model`.
template <class T>
LossBreakdown a2c_loss(const Model<T>& model, std::span<const Trajectory> batch, const RLConfig& cfg,
                       std::span<T> grad = {}) {
  std::size_t n_tokens = 0;
  for (const auto& tr : batch) n_tokens += tr.size();
  if (n_tokens == 0) throw std::invalid_argument("a2c: batch has no tokens");
  const double scale = 1.0 / static_cast<double>(n_tokens);
  LossBreakdown acc;
  ForwardCache<T> cache;
  for (const auto& tr : batch) {
    if (tr.size() == 0) continue;
    const auto input = tr.scoring_input();
    const auto out = forward(model, std::span<const TokenId>(input), cache);
    const auto targets = step_targets(tr, cfg.gamma);
    const auto row0 = static_cast<Eigen::Index>(tr.prompt.size() - 1);
    if (grad.empty()) {
      accumulate_a2c_loss<T>(out.logits, out.values, row0, targets, cfg, scale, acc);
    } else {
      RowMat<T> dl = RowMat<T>::Zero(out.logits.rows(), out.logits.cols());
      Vec<T> dv = Vec<T>::Zero(out.values.size());
      accumulate_a2c_loss<T>(out.logits, out.values, row0, targets, cfg, scale, acc, &dl, &dv);
      backward(model, cache, dl, dv, grad);
    }
  }
  acc.finalize(cfg);
  return acc;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& component)
      : std::runtime_error("non-finite loss component: " + component), component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

// repeats_per_collect gradient passes over the batch; returns the breakdown of
// the final pass (measured before its parameter update).
template <class T>
LossBreakdown a2c_update(Model<T>& model, Adam<T>& opt, std::span<const Trajectory> batch, const RLConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("a2c_update: empty batch");
  AlignedVector<T> grad(model.num_params());
  LossBreakdown last;
  for (int r = 0; r < cfg.repeats_per_collect; ++r) {
    std::fill(grad.begin(), grad.end(), T(0));
    last = a2c_loss(model, batch, cfg, std::span<T>(grad));
    if (auto bad = last.first_non_finite(); !bad.empty()) throw NonFiniteLoss(bad);
    opt.step(model.params(), grad, cfg.learning_rate);
  }
  return last;
}

struct RoundRecord {
  int collect_round = 0;
  double success_rate = 0.0;  // mean terminal reward of the collected batch
  LossBreakdown loss;
  std::optional<double> test_success_rate;
  int episode_errors = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"collect_round", collect_round},
                        {"success_rate", success_rate},
                        {"pg_loss", loss.pg_loss},
                        {"value_loss", loss.value_loss},
                        {"entropy", loss.entropy_term},
                        {"kl", loss.kl_term},
                        {"total_loss", loss.total},
                        {"mean_certainty_weight", loss.mean_certainty_weight},
                        {"episode_errors", episode_errors}};
    j["test_success_rate"] = test_success_rate ? nlohmann::json(*test_success_rate) : nlohmann::json(nullptr);
    return j;
  }
};

// Greedy success rate on the test problems of a given round.
template <class T>
double test_success(const Model<T>& policy, const RLConfig& cfg, int round) {
  EvalConfig ec;
  ec.mode = EvalMode::varying;
  ec.digit_length = cfg.rl_digits;
  ec.n_examples = cfg.episodes_per_test;
  ec.seed = derive_seed(cfg.seed, "rl-test", static_cast<std::uint64_t>(round));
  const auto problems = eval_problems(ec);
  return greedy_accuracy(policy, std::span<const AdditionProblem>(problems));
}

struct FinetuneHooks {
  // After each round's update (round >= 1) and once before training (round 0).
  std::function<void(int round, const Model<float>& policy)> on_round;
  std::function<void(const RoundRecord&)> on_record;
  std::function<void(int round, const Model<float>& policy, const std::exception&)> on_abort;
};

struct FinetuneResult {
  Model<float> policy;
  std::vector<RoundRecord> records;
};

// Test records at round 0 describe the initial policy. Collection at round r
// uses a stream derived from (cfg.seed, r), so paired runs that share a seed
// see the same problems.
inline FinetuneResult finetune(const Model<float>& pretrained, const RLConfig& cfg, const FinetuneHooks& hooks = {}) {
  cfg.validate();
  const Model<float>& reference = pretrained;
  FinetuneResult res{pretrained, {}};
  Model<float>& policy = res.policy;
  Adam<float> opt(policy.num_params(), {cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0, cfg.grad_clip});
  CollectConfig cc;
  cc.n_episodes = cfg.episodes_per_collect;
  cc.n_digits = cfg.rl_digits;
  cc.gen = {DecodeMode::sample, cfg.temperature, cfg.max_new_tokens, 0};
  cc.gamma = cfg.gamma;

  int round = 0;
  try {
    if (hooks.on_round) hooks.on_round(0, policy);
    if (cfg.test_every > 0) {
      RoundRecord r0;
      r0.test_success_rate = test_success(policy, cfg, 0);
      res.records.push_back(r0);
      if (hooks.on_record) hooks.on_record(r0);
    }
    for (round = 1; round <= cfg.collect_rounds; ++round) {
      auto batch = collect(policy, reference, cc, derive_seed(cfg.seed, "collect", static_cast<std::uint64_t>(round)));
      RoundRecord rec;
      rec.collect_round = round;
      rec.success_rate = batch.success_rate();
      rec.episode_errors = static_cast<int>(batch.errors.size());
      if (!batch.trajectories.empty())
        rec.loss = a2c_update(policy, opt, std::span<const Trajectory>(batch.trajectories), cfg);
      if (cfg.test_every > 0 && round % cfg.test_every == 0) rec.test_success_rate = test_success(policy, cfg, round);
      if (hooks.on_round) hooks.on_round(round, policy);
      res.records.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
    }
  } catch (const std::exception& e) {
    if (hooks.on_abort) hooks.on_abort(round, policy, e);
    throw;
  }
  return res;
}

}  // namespace kllab
