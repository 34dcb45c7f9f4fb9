#pragma once

// Addition as a Markov decision process: the state is the prompt plus the
// tokens generated so far, actions are vocabulary tokens, and the only
// non-zero reward is a terminal 1 for a correct final answer.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kllab/generate.hpp"
#include "kllab/model.hpp"
#include "kllab/rng.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

enum class TerminalReason { none, eos, truncated };

inline const char* to_string(TerminalReason r) {
  switch (r) {
    case TerminalReason::none: return "none";
    case TerminalReason::eos: return "eos";
    case TerminalReason::truncated: return "truncated";
  }
  return "?";
}

struct EpisodeState {
  AdditionProblem problem;
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;
  int max_new_tokens = 0;
  bool done = false;
  TerminalReason terminal_reason = TerminalReason::none;
};

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

class EpisodeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline EpisodeState start_episode(AdditionProblem problem, int max_new_tokens,
                                  const Vocabulary& vocab = Vocabulary::standard()) {
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  EpisodeState s;
  s.prompt = vocab.encode(render_prompt(problem));
  s.problem = std::move(problem);
  s.max_new_tokens = max_new_tokens;
  return s;
}

// Samples a problem whose longer operand has exactly n_digits.
inline EpisodeState reset(int n_digits, Rng& rng, int max_new_tokens,
                          const Vocabulary& vocab = Vocabulary::standard()) {
  return start_episode(sample_problem_longest(n_digits, rng), max_new_tokens, vocab);
}

inline double terminal_reward(const EpisodeState& s, const Vocabulary& vocab = Vocabulary::standard()) {
  if (s.terminal_reason != TerminalReason::eos) return 0.0;
  return verify_answer(vocab.decode(s.generated), s.problem) == Verdict::correct ? 1.0 : 0.0;
}

inline StepOutcome step(EpisodeState& s, TokenId action, const Vocabulary& vocab = Vocabulary::standard()) {
  if (s.done) throw EpisodeError("step on a finished episode");
  if (action < 0 || action >= vocab.size())
    throw std::out_of_range("action " + std::to_string(action) + " outside the vocabulary");
  s.generated.push_back(action);
  if (action == vocab.eos()) {
    s.done = true;
    s.terminal_reason = TerminalReason::eos;
  } else if (static_cast<int>(s.generated.size()) >= s.max_new_tokens) {
    s.done = true;
    s.terminal_reason = TerminalReason::truncated;
  }
  return {s.done ? terminal_reward(s, vocab) : 0.0, s.done};
}

struct Trajectory {
  AdditionProblem problem;
  std::vector<TokenId> prompt;
  std::vector<TokenId> actions;
  std::vector<double> logp_new;
  std::vector<double> logp_old;
  std::vector<double> values;
  std::vector<double> certainty_old;
  std::vector<double> returns;
  double reward = 0.0;
  TerminalReason terminal_reason = TerminalReason::none;

  std::size_t size() const { return actions.size(); }

  // prompt + actions[:-1]: the inputs whose outputs score every action.
  std::vector<TokenId> scoring_input() const {
    std::vector<TokenId> in = prompt;
    in.insert(in.end(), actions.begin(), actions.end() - (actions.empty() ? 0 : 1));
    return in;
  }
};

// Discounted return of a terminal-only reward: G_t = gamma^(T-1-t) * r.
inline std::vector<double> discounted_returns(std::size_t steps, double reward, double gamma) {
  std::vector<double> g(steps);
  double acc = reward;
  for (std::size_t t = steps; t-- > 0;) {
    g[t] = acc;
    acc *= gamma;
  }
  return g;
}

// Largest number of generated tokens whose scoring input fits the context.
inline int episode_token_budget(const ModelConfig& cfg, std::size_t prompt_len, int requested) {
  const int room = cfg.context_len - static_cast<int>(prompt_len) + 1;
  return requested > 0 ? std::min(requested, room) : room;
}

// Runs one episode with the policy, recording log pi(a_t|s_t) and V(s_t).
template <class T>
Trajectory run_episode(const Model<T>& policy, EpisodeState state, const GenerationConfig& gen, Rng& rng,
                       const Vocabulary& vocab = Vocabulary::standard()) {
  IncrementalDecoder<T> dec(policy);
  RowVec<T> logits(policy.config().vocab_size);
  T value{};
  for (TokenId t : state.prompt) dec.push(t, logits, value);
  Trajectory tr;
  while (true) {
    const auto logp = log_softmax(logits);
    const TokenId a = gen.mode == DecodeMode::greedy ? argmax(logits)
                                                     : sample_categorical(logp, gen.temperature, rng);
    tr.actions.push_back(a);
    tr.logp_new.push_back(logp[static_cast<std::size_t>(a)]);
    tr.values.push_back(static_cast<double>(value));
    const auto out = step(state, a, vocab);
    if (out.done) {
      tr.reward = out.reward;
      break;
    }
    dec.push(a, logits, value);
  }
  tr.problem = state.problem;
  tr.prompt = state.prompt;
  tr.terminal_reason = state.terminal_reason;
  return tr;
}

// Scores every action of the trajectory under the reference policy.
template <class T>
void score_with_reference(const Model<T>& reference, Trajectory& tr, ForwardCache<T>& cache) {
  const auto input = tr.scoring_input();
  const auto out = forward(reference, std::span<const TokenId>(input), cache);
  const std::size_t first = tr.prompt.size() - 1;
  tr.logp_old.resize(tr.size());
  tr.certainty_old.resize(tr.size());
  for (std::size_t t = 0; t < tr.size(); ++t) {
    const auto lp = log_softmax(out.logits.row(static_cast<Eigen::Index>(first + t)));
    tr.logp_old[t] = lp[static_cast<std::size_t>(tr.actions[t])];
    tr.certainty_old[t] = certainty_from_log_probs(lp);
  }
}

struct CollectConfig {
  int n_episodes = 50;
  int n_digits = 4;
  GenerationConfig gen{DecodeMode::sample, 1.0, 0, 0};  // max_new_tokens 0: up to the context limit
  double gamma = 1.0;
};

struct CollectResult {
  std::vector<Trajectory> trajectories;
  std::vector<std::string> errors;  // one entry per failed episode

  double success_rate() const {
    if (trajectories.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : trajectories) s += t.reward;
    return s / static_cast<double>(trajectories.size());
  }
};

// Episode i draws its problem and samples from its own stream derived from
// (seed, i), so trajectory order and content do not depend on scheduling.
template <class T>
CollectResult collect(const Model<T>& policy, const Model<T>& reference, const CollectConfig& cfg,
                      std::uint64_t seed, const Vocabulary& vocab = Vocabulary::standard()) {
  if (policy.config().vocab_size != reference.config().vocab_size ||
      policy.config().vocab_size != vocab.size())
    throw std::invalid_argument("collect: policy, reference and vocabulary sizes differ");
  CollectResult res;
  ForwardCache<T> cache;
  for (int i = 0; i < cfg.n_episodes; ++i) {
    try {
      Rng rng(derive_seed(seed, "episode", static_cast<std::uint64_t>(i)));
      auto problem = sample_problem_longest(cfg.n_digits, rng);
      const std::size_t prompt_len = render_prompt(problem).size();
      auto state = start_episode(std::move(problem),
                                 episode_token_budget(policy.config(), prompt_len, cfg.gen.max_new_tokens), vocab);
      auto tr = run_episode(policy, std::move(state), cfg.gen, rng, vocab);
      score_with_reference(reference, tr, cache);
      tr.returns = discounted_returns(tr.size(), tr.reward, cfg.gamma);
      res.trajectories.push_back(std::move(tr));
    } catch (const std::exception& e) {
      res.errors.push_back("episode " + std::to_string(i) + ": " + e.what());
    }
  }
  return res;
}

}  // namespace kllab
