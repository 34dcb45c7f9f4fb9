#pragma once

// Supervised next-token pre-training on scratchpad documents. The loss is the
// mean token cross-entropy over positions after the prompt.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kllab/dataset.hpp"
#include "kllab/eval.hpp"
#include "kllab/model.hpp"
#include "kllab/optim.hpp"
#include "kllab/rng.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

struct PretrainConfig {
  std::string dataset_path;
  int batch_size = 32;
  long steps = 2000;
  double learning_rate = 3e-3;
  std::string lr_schedule = "cosine";  // constant | cosine
  long warmup_steps = 100;
  long eval_every = 250;
  int eval_examples = 200;  // held-out identical-digit problems at n_max
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  bool overfit_single_batch = false;

  void validate() const {
    if (batch_size < 1 || steps < 0 || eval_every < 1 || eval_examples < 0 || warmup_steps < 0)
      throw std::invalid_argument("pretrain counts must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (lr_schedule != "constant" && lr_schedule != "cosine")
      throw std::invalid_argument("lr_schedule must be constant or cosine");
  }

  nlohmann::json to_json() const {
    return {{"dataset_path", dataset_path}, {"batch_size", batch_size},
            {"steps", steps},               {"learning_rate", learning_rate},
            {"lr_schedule", lr_schedule},   {"warmup_steps", warmup_steps},
            {"eval_every", eval_every},     {"eval_examples", eval_examples},
            {"seed", seed},                 {"grad_clip", grad_clip},
            {"weight_decay", weight_decay}, {"overfit_single_batch", overfit_single_batch}};
  }

  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    c.dataset_path = j.value("dataset_path", c.dataset_path);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_examples = j.value("eval_examples", c.eval_examples);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.overfit_single_batch = j.value("overfit_single_batch", c.overfit_single_batch);
    return c;
  }
};

struct PretrainRecord {
  long step = 0;
  double loss = 0.0;
  std::optional<double> eval_accuracy;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}, {"loss", loss}};
    j["eval_accuracy"] = eval_accuracy ? nlohmann::json(*eval_accuracy) : nlohmann::json(nullptr);
    return j;
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, long step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

struct PretrainResult {
  Model<float> final_model;
  Model<float> best_model;
  long best_step = 0;
  double best_accuracy = -1.0;
  std::vector<PretrainRecord> records;
  std::string rng_state;
};

// A training example: token ids and the index of the first supervised target.
struct TrainingSequence {
  std::vector<TokenId> ids;
  std::size_t first_target = 0;
};

inline TrainingSequence make_training_sequence(const DatasetRecord& r,
                                               const Vocabulary& vocab = Vocabulary::standard()) {
  TrainingSequence s;
  s.ids = vocab.encode(r.text);
  s.ids.push_back(vocab.eos());
  s.first_target = r.prompt.size();
  return s;
}

inline double scheduled_lr(const PretrainConfig& cfg, long step) {
  double lr = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.lr_schedule == "cosine" && cfg.steps > cfg.warmup_steps) {
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.steps - cfg.warmup_steps);
    lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return lr;
}

// Cross-entropy of the post-prompt targets of one sequence. Adds the summed
// loss to `loss_sum` and, when `grad` is non-empty, accumulates gradients of
// (summed loss * scale).
template <class T>
void sequence_cross_entropy(const Model<T>& model, const TrainingSequence& seq, double scale,
                            double& loss_sum, std::span<T> grad, ForwardCache<T>& cache,
                            Rng* dropout_rng = nullptr) {
  const std::size_t n_in = seq.ids.size() - 1;
  const auto out = forward(model, std::span<const TokenId>(seq.ids.data(), n_in), cache, dropout_rng);
  RowMat<T> dlogits = RowMat<T>::Zero(out.logits.rows(), out.logits.cols());
  for (std::size_t t = seq.first_target - 1; t < n_in; ++t) {
    const auto row = out.logits.row(static_cast<Eigen::Index>(t));
    const T mx = row.maxCoeff();
    RowVec<T> e = (row.array() - mx).exp();
    const T z = e.sum();
    const TokenId y = seq.ids[t + 1];
    loss_sum += static_cast<double>(std::log(z) + mx - row(y));
    e /= z;
    e(y) -= T(1);
    dlogits.row(static_cast<Eigen::Index>(t)) = e * static_cast<T>(scale);
  }
  if (!grad.empty()) backward(model, cache, dlogits, Vec<T>(Vec<T>::Zero(out.values.size())), grad);
}

using PretrainSink = std::function<void(const PretrainRecord&)>;

inline PretrainResult pretrain(const Model<float>& init, const std::vector<DatasetRecord>& data, int n_max,
                               const PretrainConfig& cfg, const PretrainSink& sink = {}) {
  cfg.validate();
  if (data.empty() && cfg.steps > 0) throw std::invalid_argument("pretrain: empty dataset");
  std::vector<TrainingSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& r : data) {
    seqs.push_back(make_training_sequence(r));
    if (seqs.back().ids.size() - 1 > static_cast<std::size_t>(init.config().context_len))
      throw std::length_error("training document longer than context: " + r.text.substr(0, 40));
  }

  PretrainResult res{init, init, 0, -1.0, {}, {}};
  Model<float>& model = res.final_model;
  Rng rng(derive_seed(cfg.seed, "pretrain-batches"));
  Rng dropout_rng(derive_seed(cfg.seed, "pretrain-dropout"));
  Adam<float> opt(model.num_params(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.grad_clip});

  EvalConfig heldout;
  heldout.mode = EvalMode::identical;
  heldout.digit_length = n_max;
  heldout.n_examples = std::max(cfg.eval_examples, 1);
  heldout.seed = derive_seed(cfg.seed, "pretrain-heldout");
  const auto heldout_problems = eval_problems(heldout);

  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1))]);
      cursor = 0;
    }
    return order[cursor++];
  };

  AlignedVector<float> grad(model.num_params());
  ForwardCache<float> cache;
  std::vector<std::size_t> batch;
  for (long step = 0; step < cfg.steps; ++step) {
    if (!cfg.overfit_single_batch || batch.empty()) {
      batch.clear();
      for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(next_index());
    }
    std::size_t n_targets = 0;
    for (auto i : batch) n_targets += seqs[i].ids.size() - seqs[i].first_target;
    std::fill(grad.begin(), grad.end(), 0.0f);
    double loss_sum = 0.0;
    const double scale = 1.0 / static_cast<double>(n_targets);
    for (auto i : batch) {
      sequence_cross_entropy(model, seqs[i], scale, loss_sum, std::span<float>(grad), cache,
                             model.config().dropout_rate > 0.0 ? &dropout_rng : nullptr);
    }
    const double loss = loss_sum * scale;
    if (!std::isfinite(loss)) throw TrainingDiverged("non-finite pre-training loss", step);
    opt.step(model.params(), grad, scheduled_lr(cfg, step));

    PretrainRecord rec{step + 1, loss, std::nullopt};
    const bool last = step + 1 == cfg.steps;
    if (cfg.eval_examples > 0 && ((step + 1) % cfg.eval_every == 0 || last)) {
      rec.eval_accuracy = greedy_accuracy(model, std::span<const AdditionProblem>(heldout_problems));
      if (*rec.eval_accuracy > res.best_accuracy) {
        res.best_accuracy = *rec.eval_accuracy;
        res.best_step = step + 1;
        res.best_model = model;
      }
    }
    res.records.push_back(rec);
    if (sink) sink(rec);
  }
  if (res.best_accuracy < 0.0) res.best_model = model;
  res.rng_state = rng_state(rng);
  return res;
}

}  // namespace kllab
