#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kllab/model.hpp"
#include "kllab/rng.hpp"

namespace kllab {

enum class DecodeMode { greedy, sample };

struct GenerationConfig {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  int max_new_tokens = 512;
  std::uint64_t seed = 0;

  void validate() const {
    if (mode == DecodeMode::sample && !(temperature > 0.0))
      throw std::invalid_argument("sampling temperature must be positive");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  }
};

struct GenerationResult {
  std::vector<TokenId> tokens;   // generated tokens only, EOS included when emitted
  std::vector<double> logprobs;  // log pi(a_t | s_t) at temperature 1
  std::vector<double> values;    // V(s_t)
  bool hit_eos = false;
  bool truncated = false;        // stopped by max_new_tokens or the context limit
};

// Index of the largest logit, lowest index on ties.
template <class Derived>
TokenId argmax(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (logits(i) > logits(best)) best = i;
  return static_cast<TokenId>(best);
}

inline TokenId sample_categorical(std::span<const double> logp, double temperature, Rng& rng) {
  std::vector<double> w(logp.size());
  double mx = -INFINITY;
  for (double lp : logp) mx = std::max(mx, lp / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) z += (w[i] = std::exp(logp[i] / temperature - mx));
  double u = uniform01(rng) * z;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0.0) return static_cast<TokenId>(i);
  return 0;
}

template <class T>
GenerationResult generate(const Model<T>& model, std::span<const TokenId> prompt,
                          const GenerationConfig& gen, Rng& rng, TokenId eos = 0) {
  gen.validate();
  const int ctx = model.config().context_len;
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt.size() >= static_cast<std::size_t>(ctx))
    throw std::length_error("prompt length " + std::to_string(prompt.size()) +
                            " leaves no room in context length " + std::to_string(ctx));

  IncrementalDecoder<T> dec(model);
  RowVec<T> logits(model.config().vocab_size);
  T value{};
  for (TokenId t : prompt) dec.push(t, logits, value);

  GenerationResult out;
  while (true) {
    const auto logp = log_softmax(logits);
    const TokenId a = gen.mode == DecodeMode::greedy ? argmax(logits)
                                                     : sample_categorical(logp, gen.temperature, rng);
    out.tokens.push_back(a);
    out.logprobs.push_back(logp[static_cast<std::size_t>(a)]);
    out.values.push_back(static_cast<double>(value));
    if (a == eos) {
      out.hit_eos = true;
      break;
    }
    if (static_cast<int>(out.tokens.size()) >= gen.max_new_tokens || dec.full()) {
      out.truncated = true;
      break;
    }
    dec.push(a, logits, value);
  }
  return out;
}

template <class T>
GenerationResult generate(const Model<T>& model, std::span<const TokenId> prompt,
                          const GenerationConfig& gen) {
  Rng rng(gen.seed);
  return generate(model, prompt, gen, rng);
}

}  // namespace kllab
