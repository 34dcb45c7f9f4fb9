#pragma once

// Decoder-only transformer (GPT-2 layout: pre-LayerNorm blocks, learned
// absolute positions, tied input/output embedding) with a linear value head
// on the final hidden state. Parameters live in one flat buffer so optimizers,
// checkpoints and finite-difference checks can treat them as a single vector.
//
// The model is templated on the scalar type: float for training, double for
// gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "kllab/rng.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int context_len = 512;
  int vocab_size = 33;
  double dropout_rate = 0.0;
  std::uint64_t init_seed = 1234;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || context_len < 1 || vocab_size < 2)
      throw std::invalid_argument("model dimensions must be positive: " + describe());
    if (d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be divisible by n_heads: " + describe());
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("dropout_rate must be in [0, 1): " + describe());
  }

  int head_dim() const { return d_model / n_heads; }

  std::string describe() const { return to_json().dump(); }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers}, {"d_model", d_model},       {"n_heads", n_heads},
            {"d_ff", d_ff},         {"context_len", context_len}, {"vocab_size", vocab_size},
            {"dropout_rate", dropout_rate}, {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.context_len = j.value("context_len", c.context_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.init_seed = j.value("init_seed", c.init_seed);
    return c;
  }

  // Architecture equality; the init seed does not change the shapes.
  bool same_architecture(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
           d_ff == o.d_ff && context_len == o.context_len && vocab_size == o.vocab_size;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Offsets of every tensor inside the flat parameter buffer.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_attn_out, b_attn_out;
    std::size_t ln2_g, ln2_b, w_fc, b_fc, w_fc_out, b_fc_out;
  };

  std::size_t wte = 0, wpe = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0, w_value = 0, b_value = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff;
    auto take = [this](std::size_t n) {
      const std::size_t at = total;
      total += n;
      return at;
    };
    wte = take(static_cast<std::size_t>(c.vocab_size) * d);
    wpe = take(static_cast<std::size_t>(c.context_len) * d);
    for (int l = 0; l < c.n_layers; ++l) {
      Layer L{};
      L.ln1_g = take(d);
      L.ln1_b = take(d);
      L.w_qkv = take(d * 3 * d);
      L.b_qkv = take(3 * d);
      L.w_attn_out = take(d * d);
      L.b_attn_out = take(d);
      L.ln2_g = take(d);
      L.ln2_b = take(d);
      L.w_fc = take(d * f);
      L.b_fc = take(f);
      L.w_fc_out = take(f * d);
      L.b_fc_out = take(d);
      layers.push_back(L);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_value = take(d);
    b_value = take(1);
  }
};

// Flat buffers get Eigen's alignment so vectorized reductions over them do not
// depend on where the allocator happened to put them.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
class Model {
 public:
  using MatMap = Eigen::Map<const RowMat<T>>;
  using VecMap = Eigen::Map<const RowVec<T>>;

  explicit Model(ModelConfig cfg) : cfg_(cfg), layout_(cfg), params_(layout_.total, T(0)) {
    cfg_.validate();
  }

  // GPT-2 style initialization: N(0, 0.02) weights, residual output
  // projections scaled by 1/sqrt(2 * n_layers), unit LayerNorm gains.
  static Model initialized(const ModelConfig& cfg) {
    Model m(cfg);
    Rng rng(derive_seed(cfg.init_seed, "model-init"));
    auto normal = [&rng]() {
      const double u1 = 1.0 - uniform01(rng);
      const double u2 = uniform01(rng);
      return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    };
    auto fill = [&](std::size_t off, std::size_t n, double stddev) {
      for (std::size_t i = 0; i < n; ++i) m.params_[off + i] = static_cast<T>(stddev * normal());
    };
    auto ones = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) m.params_[off + i] = T(1);
    };
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    const double resid = 0.02 / std::sqrt(2.0 * cfg.n_layers);
    fill(m.layout_.wte, cfg.vocab_size * d, 0.02);
    fill(m.layout_.wpe, cfg.context_len * d, 0.01);
    for (const auto& L : m.layout_.layers) {
      ones(L.ln1_g, d);
      fill(L.w_qkv, d * 3 * d, 0.02);
      fill(L.w_attn_out, d * d, resid);
      ones(L.ln2_g, d);
      fill(L.w_fc, d * f, 0.02);
      fill(L.w_fc_out, f * d, resid);
    }
    ones(m.layout_.lnf_g, d);
    fill(m.layout_.w_value, d, 0.02);
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    auto dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }

  MatMap mat(std::size_t off, Eigen::Index rows, Eigen::Index cols) const {
    return MatMap(params_.data() + off, rows, cols);
  }
  VecMap vec(std::size_t off, Eigen::Index n) const { return VecMap(params_.data() + off, n); }

  bool operator==(const Model& o) const { return cfg_ == o.cfg_ && params_ == o.params_; }

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  AlignedVector<T> params_;
};

template <class T>
struct PolicyValueOutput {
  RowMat<T> logits;  // [T, vocab]
  Vec<T> values;     // [T]
};

template <class T>
struct ForwardCache {
  struct Layer {
    RowMat<T> x_in;
    RowMat<T> ln1_hat, ln1;
    Vec<T> ln1_rstd;
    RowMat<T> qkv;
    std::vector<RowMat<T>> probs;  // per head, [T, T], zero above the diagonal
    RowMat<T> att;                 // concatenated head outputs before projection
    RowMat<T> drop_attn;           // dropout scale factors (empty when inactive)
    RowMat<T> x_mid;
    RowMat<T> ln2_hat, ln2;
    Vec<T> ln2_rstd;
    RowMat<T> fc_pre, fc_act;
    RowMat<T> drop_mlp;
  };
  std::vector<TokenId> tokens;
  std::vector<Layer> layers;
  RowMat<T> x_final;
  RowMat<T> lnf_hat, lnf;
  Vec<T> lnf_rstd;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layernorm_forward(const RowMat<T>& x, const Eigen::Map<const RowVec<T>>& g,
                       const Eigen::Map<const RowVec<T>>& b, RowMat<T>& y, RowMat<T>& xhat,
                       Vec<T>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd(i) = rs;
    xhat.row(i) = (x.row(i).array() - mean) * rs;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

// Accumulates dg, db and returns dx.
template <class T>
RowMat<T> layernorm_backward(const RowMat<T>& dy, const RowMat<T>& xhat, const Vec<T>& rstd,
                             const Eigen::Map<const RowVec<T>>& g, T* dg, T* db) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Eigen::Map<RowVec<T>> dgv(dg, d), dbv(db, d);
  dgv += dy.cwiseProduct(xhat).colwise().sum();
  dbv += dy.colwise().sum();
  RowMat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

// tanh-approximated GELU, elementwise over a dense matrix or row vector.
template <class M>
M gelu(const M& x) {
  using T = typename M::Scalar;
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const auto a = x.array();
  const M t = (c * (a + T(0.044715) * a.cube())).tanh().matrix();
  return (T(0.5) * a * (T(1) + t.array())).matrix();
}

// dy *= gelu'(x)
template <class T>
void gelu_backward(RowMat<T>& dy, const RowMat<T>& x) {
  const T c = T(0.7978845608028654);
  const auto a = x.array();
  const RowMat<T> t = (c * (a + T(0.044715) * a.cube())).tanh().matrix();
  const auto ta = t.array();
  dy.array() *= T(0.5) * (T(1) + ta) +
                T(0.5) * a * (T(1) - ta.square()) * c * (T(1) + T(3 * 0.044715) * a.square());
}

template <class T>
void make_dropout_mask(RowMat<T>& mask, Eigen::Index rows, Eigen::Index cols, double rate,
                       Rng& rng) {
  mask.resize(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = uniform01(rng) < rate ? T(0) : keep;
}

}  // namespace detail

// Full causal forward pass over one sequence. When `dropout_rng` is non-null
// and the config has a positive dropout rate, residual-branch dropout is
// applied and its masks are recorded in the cache for the backward pass.
template <class T>
PolicyValueOutput<T> forward(const Model<T>& m, std::span<const TokenId> tokens,
                             ForwardCache<T>& cache, Rng* dropout_rng = nullptr) {
  const ModelConfig& c = m.config();
  const ParamLayout& P = m.layout();
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index d = c.d_model, hd = c.head_dim();
  if (tokens.size() > static_cast<std::size_t>(c.context_len))
    throw std::length_error("sequence length " + std::to_string(tokens.size()) +
                            " exceeds context length " + std::to_string(c.context_len));
  if (n == 0) throw std::invalid_argument("forward on an empty sequence");
  const bool dropout = dropout_rng != nullptr && c.dropout_rate > 0.0;

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(c.n_layers);

  auto wte = m.mat(P.wte, c.vocab_size, d);
  auto wpe = m.mat(P.wpe, c.context_len, d);
  RowMat<T> x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const TokenId tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= c.vocab_size)
      throw std::out_of_range("token id " + std::to_string(tok) + " out of range at position " +
                              std::to_string(t));
    x.row(t) = wte.row(tok) + wpe.row(t);
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& L = P.layers[l];
    auto& C = cache.layers[l];
    C.x_in = x;
    detail::layernorm_forward<T>(x, m.vec(L.ln1_g, d), m.vec(L.ln1_b, d), C.ln1, C.ln1_hat, C.ln1_rstd);
    C.qkv.noalias() = C.ln1 * m.mat(L.w_qkv, d, 3 * d);
    C.qkv.rowwise() += m.vec(L.b_qkv, 3 * d);

    C.probs.resize(c.n_heads);
    C.att.resize(n, d);
    for (int h = 0; h < c.n_heads; ++h) {
      auto q = C.qkv.middleCols(h * hd, hd);
      auto k = C.qkv.middleCols(d + h * hd, hd);
      auto v = C.qkv.middleCols(2 * d + h * hd, hd);
      RowMat<T>& S = C.probs[h];
      S.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = S.row(i);
        const T mx = row.head(i + 1).maxCoeff();
        row.head(i + 1) = (row.head(i + 1).array() - mx).exp();
        row.head(i + 1) /= row.head(i + 1).sum();
        if (i + 1 < n) row.tail(n - i - 1).setZero();
      }
      C.att.middleCols(h * hd, hd).noalias() = S * v;
    }
    RowMat<T> proj = C.att * m.mat(L.w_attn_out, d, d);
    proj.rowwise() += m.vec(L.b_attn_out, d);
    if (dropout) {
      detail::make_dropout_mask(C.drop_attn, n, d, c.dropout_rate, *dropout_rng);
      proj = proj.cwiseProduct(C.drop_attn);
    } else {
      C.drop_attn.resize(0, 0);
    }
    C.x_mid = x + proj;

    detail::layernorm_forward<T>(C.x_mid, m.vec(L.ln2_g, d), m.vec(L.ln2_b, d), C.ln2, C.ln2_hat,
                                 C.ln2_rstd);
    C.fc_pre.noalias() = C.ln2 * m.mat(L.w_fc, d, c.d_ff);
    C.fc_pre.rowwise() += m.vec(L.b_fc, c.d_ff);
    C.fc_act = detail::gelu(C.fc_pre);
    RowMat<T> mlp = C.fc_act * m.mat(L.w_fc_out, c.d_ff, d);
    mlp.rowwise() += m.vec(L.b_fc_out, d);
    if (dropout) {
      detail::make_dropout_mask(C.drop_mlp, n, d, c.dropout_rate, *dropout_rng);
      mlp = mlp.cwiseProduct(C.drop_mlp);
    } else {
      C.drop_mlp.resize(0, 0);
    }
    x = C.x_mid + mlp;
  }

  cache.x_final = x;
  detail::layernorm_forward<T>(x, m.vec(P.lnf_g, d), m.vec(P.lnf_b, d), cache.lnf, cache.lnf_hat,
                               cache.lnf_rstd);
  PolicyValueOutput<T> out;
  out.logits.noalias() = cache.lnf * wte.transpose();
  out.values = cache.lnf * m.vec(P.w_value, d).transpose();
  out.values.array() += m.params()[P.b_value];
  return out;
}

template <class T>
PolicyValueOutput<T> forward(const Model<T>& m, std::span<const TokenId> tokens) {
  ForwardCache<T> cache;
  return forward(m, tokens, cache);
}

// Backpropagates output gradients (d loss / d logits, d loss / d values) and
// accumulates parameter gradients into `grad` (same layout as params).
template <class T>
void backward(const Model<T>& m, const ForwardCache<T>& cache, const RowMat<T>& dlogits,
              const Vec<T>& dvalues, std::span<T> grad) {
  const ModelConfig& c = m.config();
  const ParamLayout& P = m.layout();
  const Eigen::Index n = static_cast<Eigen::Index>(cache.tokens.size());
  const Eigen::Index d = c.d_model, hd = c.head_dim(), f = c.d_ff;
  if (grad.size() != m.num_params()) throw std::invalid_argument("gradient buffer size mismatch");
  if (dlogits.rows() != n || dlogits.cols() != c.vocab_size || dvalues.size() != n)
    throw std::invalid_argument("output gradient shape mismatch");
  auto gmat = [&](std::size_t off, Eigen::Index r, Eigen::Index k) {
    return Eigen::Map<RowMat<T>>(grad.data() + off, r, k);
  };
  auto gvec = [&](std::size_t off, Eigen::Index k) {
    return Eigen::Map<RowVec<T>>(grad.data() + off, k);
  };

  auto wte = m.mat(P.wte, c.vocab_size, d);
  // heads
  gmat(P.wte, c.vocab_size, d).noalias() += dlogits.transpose() * cache.lnf;
  RowMat<T> dh = dlogits * wte;
  gvec(P.w_value, d).noalias() += dvalues.transpose() * cache.lnf;
  grad[P.b_value] += dvalues.sum();
  dh.noalias() += dvalues * m.vec(P.w_value, d);

  RowMat<T> dx = detail::layernorm_backward<T>(dh, cache.lnf_hat, cache.lnf_rstd, m.vec(P.lnf_g, d),
                                               grad.data() + P.lnf_g, grad.data() + P.lnf_b);

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& L = P.layers[l];
    const auto& C = cache.layers[l];

    // MLP branch
    RowMat<T> dmlp = C.drop_mlp.size() ? RowMat<T>(dx.cwiseProduct(C.drop_mlp)) : dx;
    gmat(L.w_fc_out, f, d).noalias() += C.fc_act.transpose() * dmlp;
    gvec(L.b_fc_out, d) += dmlp.colwise().sum();
    RowMat<T> dfc = dmlp * m.mat(L.w_fc_out, f, d).transpose();
    detail::gelu_backward(dfc, C.fc_pre);
    gmat(L.w_fc, d, f).noalias() += C.ln2.transpose() * dfc;
    gvec(L.b_fc, f) += dfc.colwise().sum();
    RowMat<T> dln2 = dfc * m.mat(L.w_fc, d, f).transpose();
    dx += detail::layernorm_backward<T>(dln2, C.ln2_hat, C.ln2_rstd, m.vec(L.ln2_g, d),
                                        grad.data() + L.ln2_g, grad.data() + L.ln2_b);

    // attention branch
    RowMat<T> dproj = C.drop_attn.size() ? RowMat<T>(dx.cwiseProduct(C.drop_attn)) : dx;
    gmat(L.w_attn_out, d, d).noalias() += C.att.transpose() * dproj;
    gvec(L.b_attn_out, d) += dproj.colwise().sum();
    RowMat<T> datt = dproj * m.mat(L.w_attn_out, d, d).transpose();
    RowMat<T> dqkv(n, 3 * d);
    for (int h = 0; h < c.n_heads; ++h) {
      const RowMat<T>& Pm = C.probs[h];
      auto q = C.qkv.middleCols(h * hd, hd);
      auto k = C.qkv.middleCols(d + h * hd, hd);
      auto v = C.qkv.middleCols(2 * d + h * hd, hd);
      auto dO = datt.middleCols(h * hd, hd);
      RowMat<T> dP = dO * v.transpose();
      dqkv.middleCols(2 * d + h * hd, hd).noalias() = Pm.transpose() * dO;
      const Vec<T> rowdot = Pm.cwiseProduct(dP).rowwise().sum();
      RowMat<T> dS = Pm.cwiseProduct((dP.colwise() - rowdot)) * scale;
      dqkv.middleCols(h * hd, hd).noalias() = dS * k;
      dqkv.middleCols(d + h * hd, hd).noalias() = dS.transpose() * q;
    }
    gmat(L.w_qkv, d, 3 * d).noalias() += C.ln1.transpose() * dqkv;
    gvec(L.b_qkv, 3 * d) += dqkv.colwise().sum();
    RowMat<T> dln1 = dqkv * m.mat(L.w_qkv, d, 3 * d).transpose();
    dx += detail::layernorm_backward<T>(dln1, C.ln1_hat, C.ln1_rstd, m.vec(L.ln1_g, d),
                                        grad.data() + L.ln1_g, grad.data() + L.ln1_b);
  }

  auto gwte = gmat(P.wte, c.vocab_size, d);
  auto gwpe = gmat(P.wpe, c.context_len, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    gwte.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    gwpe.row(t) += dx.row(t);
  }
}

// Key/value cache for token-by-token decoding. Produces the same outputs as
// the full forward pass up to floating-point summation order.
template <class T>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Model<T>& m) : m_(m) {
    const auto& c = m.config();
    keys_.assign(c.n_layers, RowMat<T>(c.context_len, c.d_model));
    values_.assign(c.n_layers, RowMat<T>(c.context_len, c.d_model));
  }

  int position() const { return pos_; }
  bool full() const { return pos_ >= m_.config().context_len; }

  // Appends `tok` and writes the next-token logits and the state value.
  void push(TokenId tok, RowVec<T>& logits, T& value) {
    const ModelConfig& c = m_.config();
    const ParamLayout& P = m_.layout();
    const Eigen::Index d = c.d_model, hd = c.head_dim();
    if (full())
      throw std::length_error("decoder position " + std::to_string(pos_) +
                              " exceeds context length " + std::to_string(c.context_len));
    if (tok < 0 || tok >= c.vocab_size)
      throw std::out_of_range("token id " + std::to_string(tok) + " out of range");
    auto wte = m_.mat(P.wte, c.vocab_size, d);
    RowVec<T> x = wte.row(tok) + m_.mat(P.wpe, c.context_len, d).row(pos_);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const Eigen::Index len = pos_ + 1;
    for (int l = 0; l < c.n_layers; ++l) {
      const auto& L = P.layers[l];
      RowVec<T> h = layernorm(x, L.ln1_g, L.ln1_b);
      RowVec<T> qkv = h * m_.mat(L.w_qkv, d, 3 * d) + m_.vec(L.b_qkv, 3 * d);
      keys_[l].row(pos_) = qkv.segment(d, d);
      values_[l].row(pos_) = qkv.segment(2 * d, d);
      RowVec<T> att(d);
      for (int hh = 0; hh < c.n_heads; ++hh) {
        auto q = qkv.segment(hh * hd, hd);
        auto K = keys_[l].block(0, hh * hd, len, hd);
        auto V = values_[l].block(0, hh * hd, len, hd);
        RowVec<T> s = (q * K.transpose()) * scale;
        const T mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        att.segment(hh * hd, hd).noalias() = s * V;
      }
      x += att * m_.mat(L.w_attn_out, d, d) + m_.vec(L.b_attn_out, d);
      RowVec<T> h2 = layernorm(x, L.ln2_g, L.ln2_b);
      RowVec<T> fc = h2 * m_.mat(L.w_fc, d, c.d_ff) + m_.vec(L.b_fc, c.d_ff);
      fc = detail::gelu(fc);
      x += fc * m_.mat(L.w_fc_out, c.d_ff, d) + m_.vec(L.b_fc_out, d);
    }
    RowVec<T> hf = layernorm(x, P.lnf_g, P.lnf_b);
    logits.noalias() = hf * wte.transpose();
    value = hf.dot(m_.vec(P.w_value, d)) + m_.params()[P.b_value];
    ++pos_;
  }

 private:
  RowVec<T> layernorm(const RowVec<T>& x, std::size_t g, std::size_t b) const {
    const Eigen::Index d = x.size();
    const T mean = x.mean();
    const T var = (x.array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + T(detail::kLayerNormEps));
    return ((x.array() - mean) * rs).matrix().cwiseProduct(m_.vec(g, d)) + m_.vec(b, d);
  }

  const Model<T>& m_;
  std::vector<RowMat<T>> keys_, values_;
  int pos_ = 0;
};

// ---------------------------------------------------------------------------
// Distribution utilities (computed in double regardless of T)

template <class Derived>
std::vector<double> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  const Eigen::Index n = logits.size();
  double mx = -INFINITY;
  for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits(i)));
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) z += std::exp(static_cast<double>(logits(i)) - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(logits(i)) - lz;
  return out;
}

inline double entropy_from_log_probs(std::span<const double> logp) {
  double h = 0.0;
  for (double lp : logp)
    if (std::isfinite(lp)) h -= std::exp(lp) * lp;
  return h;
}

// Normalized negentropy (H_max - H) / H_max with H_max = log |V|, natural log.
inline double certainty_from_log_probs(std::span<const double> logp) {
  const double hmax = std::log(static_cast<double>(logp.size()));
  const double j = (hmax - entropy_from_log_probs(logp)) / hmax;
  return std::clamp(j, 0.0, 1.0);
}

template <class Derived>
double certainty(const Eigen::MatrixBase<Derived>& logits) {
  const auto lp = log_softmax(logits);
  return certainty_from_log_probs(lp);
}

}  // namespace kllab
