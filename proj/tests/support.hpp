#pragma once

// Shared fixtures for the unit and acceptance tests: a tiny model, a plain
// loop reference forward pass and a directional finite-difference checker.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "kllab/model.hpp"
#include "kllab/rlenv.hpp"
#include "kllab/rng.hpp"

namespace kllab::testing {

inline ModelConfig tiny_config(int vocab = 5) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.context_len = 16;
  c.vocab_size = vocab;
  c.init_seed = 7;
  return c;
}

inline double gaussian(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
}

// Parameters drawn with a larger scale than the default init so that the
// nonlinearities are exercised.
template <class T>
Model<T> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.4) {
  Model<T> m(cfg);
  Rng rng(seed);
  for (auto& p : m.params()) p = static_cast<T>(scale * gaussian(rng));
  const auto& P = m.layout();
  auto shift = [&](std::size_t off) {
    for (int i = 0; i < cfg.d_model; ++i) m.params()[off + i] += T(1);
  };
  for (const auto& L : P.layers) {
    shift(L.ln1_g);
    shift(L.ln2_g);
  }
  shift(P.lnf_g);
  return m;
}

// Straightforward reference forward pass: nested loops, no Eigen expressions.
struct NaiveOutput {
  std::vector<std::vector<double>> logits;
  std::vector<double> values;
};

inline NaiveOutput naive_forward(const Model<double>& m, const std::vector<TokenId>& toks) {
  const auto& c = m.config();
  const auto& P = m.layout();
  const auto p = m.params();
  const int n = static_cast<int>(toks.size()), d = c.d_model, f = c.d_ff, H = c.n_heads, hd = d / H;
  using V = std::vector<double>;
  using M = std::vector<V>;
  auto ln = [&](const V& x, std::size_t g, std::size_t b) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= d;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= d;
    V y(d);
    for (int i = 0; i < d; ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * p[g + i] + p[b + i];
    return y;
  };
  auto affine = [&](const V& x, std::size_t w, std::size_t b, int in, int out) {
    V y(out);
    for (int o = 0; o < out; ++o) {
      double s = p[b + o];
      for (int i = 0; i < in; ++i) s += x[i] * p[w + static_cast<std::size_t>(i) * out + o];
      y[o] = s;
    }
    return y;
  };
  M x(n, V(d));
  for (int t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i) x[t][i] = p[P.wte + toks[t] * d + i] + p[P.wpe + t * d + i];
  for (const auto& L : P.layers) {
    M qkv(n);
    for (int t = 0; t < n; ++t) qkv[t] = affine(ln(x[t], L.ln1_g, L.ln1_b), L.w_qkv, L.b_qkv, d, 3 * d);
    M att(n, V(d, 0.0));
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < n; ++t) {
        V s(t + 1);
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          double dot = 0;
          for (int i = 0; i < hd; ++i) dot += qkv[t][h * hd + i] * qkv[u][d + h * hd + i];
          s[u] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (int u = 0; u <= t; ++u)
          for (int i = 0; i < hd; ++i) att[t][h * hd + i] += s[u] / z * qkv[u][2 * d + h * hd + i];
      }
    for (int t = 0; t < n; ++t) {
      const V proj = affine(att[t], L.w_attn_out, L.b_attn_out, d, d);
      for (int i = 0; i < d; ++i) x[t][i] += proj[i];
      V hid = affine(ln(x[t], L.ln2_g, L.ln2_b), L.w_fc, L.b_fc, d, f);
      for (auto& v : hid) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793) * (v + 0.044715 * v * v * v)));
      const V out = affine(hid, L.w_fc_out, L.b_fc_out, f, d);
      for (int i = 0; i < d; ++i) x[t][i] += out[i];
    }
  }
  NaiveOutput o;
  for (int t = 0; t < n; ++t) {
    const V h = ln(x[t], P.lnf_g, P.lnf_b);
    V lg(c.vocab_size);
    for (int v = 0; v < c.vocab_size; ++v) {
      double s = 0;
      for (int i = 0; i < d; ++i) s += h[i] * p[P.wte + v * d + i];
      lg[v] = s;
    }
    double val = p[P.b_value];
    for (int i = 0; i < d; ++i) val += h[i] * p[P.w_value + i];
    o.logits.push_back(lg);
    o.values.push_back(val);
  }
  return o;
}

struct GradCheckResult {
  int directions = 0;
  double worst_rel_error = 0.0;
};

// Compares the analytic directional derivative g.u with a central difference
// of `loss` along `directions` random unit directions.
inline GradCheckResult directional_grad_check(Model<double>& m, const std::function<double(const Model<double>&)>& loss,
                                              const std::vector<double>& grad, int directions, std::uint64_t seed,
                                              double eps = 1e-5) {
  Rng rng(seed);
  GradCheckResult r;
  auto params = m.params();
  const std::vector<double> base(params.begin(), params.end());
  for (int k = 0; k < directions; ++k) {
    std::vector<double> u(base.size());
    double norm = 0;
    for (auto& x : u) {
      x = gaussian(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    double analytic = 0;
    for (std::size_t i = 0; i < u.size(); ++i) analytic += grad[i] * (u[i] /= norm);
    for (std::size_t i = 0; i < u.size(); ++i) params[i] = base[i] + eps * u[i];
    const double lp = loss(m);
    for (std::size_t i = 0; i < u.size(); ++i) params[i] = base[i] - eps * u[i];
    const double lm = loss(m);
    const double fd = (lp - lm) / (2 * eps);
    const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-7});
    r.worst_rel_error = std::max(r.worst_rel_error, rel);
    ++r.directions;
  }
  std::copy(base.begin(), base.end(), params.begin());
  return r;
}

// A trajectory with random actions and hand-set reference statistics, scored
// only by the loss (no generation involved).
inline Trajectory synthetic_trajectory(const std::vector<TokenId>& prompt, int steps, int vocab, double reward,
                                       Rng& rng) {
  Trajectory tr;
  tr.prompt = prompt;
  for (int t = 0; t < steps; ++t) {
    tr.actions.push_back(static_cast<TokenId>(uniform_int(rng, 0, vocab - 1)));
    tr.values.push_back(0.5 * gaussian(rng));
    tr.logp_old.push_back(-0.2 - 2.0 * uniform01(rng));
    tr.certainty_old.push_back(uniform01(rng));
  }
  tr.reward = reward;
  return tr;
}

}  // namespace kllab::testing
