#pragma once

// Experiment orchestration. A run lives in output_root/run_id:
//
//   manifest.json                   config snapshot, version, timestamps, artifacts
//   pretrain/N3/{data.jsonl, metrics.jsonl, checkpoint/}
//   eval/{identical,varying}.{txt,json}
//   rl/<arm>/seed-<s>/{metrics.jsonl, traces.jsonl, checkpoint/}
//   aggregate/<arm>.json, summary.json
//
// Only manifest.json carries wall-clock data; every other file is a pure
// function of the config snapshot.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kllab/a2c.hpp"
#include "kllab/checkpoint.hpp"
#include "kllab/dataset.hpp"
#include "kllab/eval.hpp"
#include "kllab/metrics.hpp"
#include "kllab/pretrain.hpp"
#include "kllab/token_analysis.hpp"
#include "kllab/version.hpp"

namespace kllab {

namespace fs = std::filesystem;

enum class ExperimentKind { pretrain_compare, kl_compare, beta_sweep };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::pretrain_compare: return "pretrain_compare";
    case ExperimentKind::kl_compare: return "kl_compare";
    case ExperimentKind::beta_sweep: return "beta_sweep";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "pretrain_compare") return ExperimentKind::pretrain_compare;
  if (s == "kl_compare") return ExperimentKind::kl_compare;
  if (s == "beta_sweep") return ExperimentKind::beta_sweep;
  throw std::invalid_argument("unknown experiment kind '" + s + "'");
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kl_compare;
  std::string run_id;  // defaults to the kind
  fs::path output_root = "runs";
  std::vector<int> n_pretrain{3};
  int rl_offset = 1;  // RL at N + rl_offset digits
  std::vector<std::uint64_t> seeds{0};

  ModelConfig model;
  int data_examples = 50000;
  PretrainConfig pretrain;
  RLConfig rl_standard = RLConfig::standard_kl();
  RLConfig rl_prioritized = RLConfig::prioritized_kl();

  // Accuracy tables: columns N .. N + eval_columns - 1.
  int eval_examples = 1000;
  int eval_resamples = 10000;
  double eval_confidence = 0.95;
  int eval_columns = 4;

  // Existing pre-trained checkpoint for kl_compare / beta_sweep; trained in
  // the run directory when empty.
  fs::path checkpoint;
  std::vector<double> betas;  // beta_sweep

  int probe_problems = 16;      // teacher-forced critical-token probes
  int probe_every = 0;          // rounds between probe records; 0: use rl test_every
  double uncertain_threshold = 0.8;  // initial probability below this marks a position uncertain

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("experiment needs at least one seed");
    if (n_pretrain.empty()) throw std::invalid_argument("experiment needs at least one n_pretrain value");
    for (int n : n_pretrain)
      if (n < 1) throw std::invalid_argument("n_pretrain values must be >= 1");
    if (rl_offset < 0) throw std::invalid_argument("rl_offset must be >= 0");
    if (kind == ExperimentKind::beta_sweep && betas.empty()) throw std::invalid_argument("beta_sweep needs betas");
    for (double b : betas)
      if (!(b >= 0.0)) throw std::invalid_argument("betas must be >= 0");
    if (!checkpoint.empty() && !fs::exists(checkpoint / "manifest.json"))
      throw std::invalid_argument("checkpoint not found: " + checkpoint.string());
    if (data_examples < 1 || eval_examples < 1 || eval_columns < 1 || probe_problems < 0)
      throw std::invalid_argument("experiment counts must be positive");
    model.validate();
    pretrain.validate();
    rl_standard.validate();
    rl_prioritized.validate();
  }

  std::string effective_run_id() const { return run_id.empty() ? std::string(to_string(kind)) : run_id; }
  fs::path run_dir() const { return output_root / effective_run_id(); }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"run_id", run_id},
            {"output_root", output_root.string()},
            {"n_pretrain", n_pretrain},
            {"rl_offset", rl_offset},
            {"seeds", seeds},
            {"model", model.to_json()},
            {"data_examples", data_examples},
            {"pretrain", pretrain.to_json()},
            {"rl_standard", rl_standard.to_json()},
            {"rl_prioritized", rl_prioritized.to_json()},
            {"eval_examples", eval_examples},
            {"eval_resamples", eval_resamples},
            {"eval_confidence", eval_confidence},
            {"eval_columns", eval_columns},
            {"checkpoint", checkpoint.string()},
            {"betas", betas},
            {"probe_problems", probe_problems},
            {"probe_every", probe_every},
            {"uncertain_threshold", uncertain_threshold}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("kind")) c.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    c.run_id = j.value("run_id", c.run_id);
    c.output_root = j.value("output_root", c.output_root.string());
    c.n_pretrain = j.value("n_pretrain", c.n_pretrain);
    c.rl_offset = j.value("rl_offset", c.rl_offset);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.data_examples = j.value("data_examples", c.data_examples);
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("rl_standard")) c.rl_standard = RLConfig::from_json(j.at("rl_standard"), RLConfig::standard_kl());
    if (j.contains("rl_prioritized"))
      c.rl_prioritized = RLConfig::from_json(j.at("rl_prioritized"), RLConfig::prioritized_kl());
    c.eval_examples = j.value("eval_examples", c.eval_examples);
    c.eval_resamples = j.value("eval_resamples", c.eval_resamples);
    c.eval_confidence = j.value("eval_confidence", c.eval_confidence);
    c.eval_columns = j.value("eval_columns", c.eval_columns);
    c.checkpoint = j.value("checkpoint", c.checkpoint.string());
    c.betas = j.value("betas", c.betas);
    c.probe_problems = j.value("probe_problems", c.probe_problems);
    c.probe_every = j.value("probe_every", c.probe_every);
    c.uncertain_threshold = j.value("uncertain_threshold", c.uncertain_threshold);
    return c;
  }
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  nlohmann::json config;
  std::string version = kVersion;
  std::vector<std::uint64_t> seeds;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> artifacts;  // relative to the run directory
  std::vector<std::string> failures;

  nlohmann::json to_json() const {
    return {{"config", config},         {"version", version},   {"seeds", seeds},
            {"started_at", started_at}, {"finished_at", finished_at}, {"artifacts", artifacts},
            {"failures", failures}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.config = j.at("config");
    m.version = j.value("version", std::string{});
    m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    m.started_at = j.value("started_at", std::string{});
    m.finished_at = j.value("finished_at", std::string{});
    m.artifacts = j.value("artifacts", std::vector<std::string>{});
    m.failures = j.value("failures", std::vector<std::string>{});
    return m;
  }
};

struct RunResult {
  fs::path dir;
  RunManifest manifest;
  nlohmann::json summary;
};

// Progress messages; silent by default.
using RunLog = std::function<void(const std::string&)>;

struct CurveStats {
  std::vector<int> rounds;
  std::vector<double> mean, ci_low, ci_high;
};

// Area under the success curve: mean collect success rate over rounds >= 1.
inline double success_auc(const std::vector<RoundRecord>& records) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : records)
    if (r.collect_round >= 1) {
      s += r.success_rate;
      ++n;
    }
  return n ? s / n : 0.0;
}

namespace detail {

inline std::string arm_dir_name(double beta) {
  std::ostringstream os;
  os << "beta-" << beta;
  return os.str();
}

class RunContext {
 public:
  RunContext(const ExperimentConfig& cfg, RunLog log) : cfg_(cfg), dir_(cfg.run_dir()), log_(std::move(log)) {}

  const fs::path& dir() const { return dir_; }
  void log(const std::string& s) const {
    if (log_) log_(s);
  }
  void artifact(const fs::path& p) { artifacts_.push_back(fs::relative(p, dir_).generic_string()); }
  std::vector<std::string>& artifacts() { return artifacts_; }

 private:
  const ExperimentConfig& cfg_;
  fs::path dir_;
  RunLog log_;
  std::vector<std::string> artifacts_;
};

}  // namespace detail

// Pre-trains at n_pretrain digits into `dir`; returns the best checkpoint.
// `dir/checkpoint` is reused when it already exists.
inline Model<float> pretrain_stage(const ExperimentConfig& cfg, int n_pretrain, const fs::path& dir,
                                   const RunLog& log = {}) {
  const auto ck = dir / "checkpoint";
  if (fs::exists(ck / "manifest.json")) return load_checkpoint(ck, cfg.model).model;
  const std::uint64_t seed0 = cfg.seeds.front();
  const auto n = static_cast<std::uint64_t>(n_pretrain);
  const auto data_path = dir / "data.jsonl";
  build_dataset({n_pretrain, static_cast<std::size_t>(cfg.data_examples), derive_seed(seed0, "data", n), "train"}, data_path);
  const auto data = load_dataset(data_path);

  ModelConfig mc = cfg.model;
  mc.init_seed = derive_seed(seed0, "init", n);
  PretrainConfig pc = cfg.pretrain;
  pc.dataset_path = data_path.filename().string();
  pc.seed = derive_seed(seed0, "pretrain", n);

  MetricsWriter mw(dir / "metrics.jsonl");
  auto res = pretrain(Model<float>::initialized(mc), data, n_pretrain, pc, [&](const PretrainRecord& r) {
    mw.write(r.to_json());
    if (r.eval_accuracy && log)
      log("pretrain N=" + std::to_string(n_pretrain) + " step " + std::to_string(r.step) + " loss " +
          std::to_string(r.loss) + " heldout " + std::to_string(*r.eval_accuracy));
  });
  CheckpointMeta meta;
  meta.step = res.best_step;
  meta.seed = pc.seed;
  meta.rng_state = res.rng_state;
  meta.extra = {{"n_pretrain", n_pretrain}, {"best_accuracy", res.best_accuracy}, {"pretrain", pc.to_json()}};
  save_checkpoint(res.best_model, ck, meta);
  return res.best_model;
}

// Accuracy tables (identical and varying) for pre-trained models.
inline std::pair<AccuracyTable, AccuracyTable> accuracy_tables(const ExperimentConfig& cfg,
                                                               const std::vector<int>& ns,
                                                               const std::vector<const Model<float>*>& models) {
  AccuracyTable ident{EvalMode::identical, ns, {}}, vary{EvalMode::varying, ns, {}};
  for (std::size_t r = 0; r < ns.size(); ++r) {
    for (auto* table : {&ident, &vary}) {
      std::vector<EvalReport> row;
      for (int k = 0; k < cfg.eval_columns; ++k) {
        EvalConfig ec;
        ec.mode = table->mode;
        ec.digit_length = ns[r] + k;
        ec.n_examples = cfg.eval_examples;
        ec.n_resamples = cfg.eval_resamples;
        ec.confidence = cfg.eval_confidence;
        ec.seed = derive_seed(cfg.seeds.front(), "eval");
        auto rep = evaluate(*models[r], ec);
        rep.outcomes.clear();
        row.push_back(std::move(rep));
      }
      table->cells.push_back(std::move(row));
    }
  }
  return {ident, vary};
}

struct RlRunOutput {
  std::vector<RoundRecord> records;
  std::vector<TokenProbTrace> traces;
  std::string checkpoint_hash;
};

// One fine-tuning run with metrics, probability traces and a final checkpoint.
inline RlRunOutput rl_run(const Model<float>& pretrained, RLConfig rl, const std::vector<CriticalProbe>& probes,
                          int probe_every, const fs::path& dir) {
  fs::create_directories(dir);
  MetricsWriter mw(dir / "metrics.jsonl");
  CriticalProbTracker tracker(probes);
  const int every = probe_every > 0 ? probe_every : std::max(rl.test_every, 1);
  FinetuneHooks hooks;
  hooks.on_record = [&](const RoundRecord& r) { mw.write(r.to_json()); };
  hooks.on_round = [&](int round, const Model<float>& policy) {
    if (!probes.empty() && (round % every == 0 || round == rl.collect_rounds)) tracker.record(round, policy);
  };
  hooks.on_abort = [&](int round, const Model<float>& policy, const std::exception& e) {
    CheckpointMeta meta;
    meta.step = round;
    meta.seed = rl.seed;
    meta.extra = {{"aborted", e.what()}};
    save_checkpoint(policy, dir / "abort_checkpoint", meta);
  };
  auto res = finetune(pretrained, rl, hooks);
  RlRunOutput out;
  out.records = std::move(res.records);
  out.traces = tracker.traces();
  MetricsWriter tw(dir / "traces.jsonl");
  for (const auto& t : out.traces) tw.write(t.to_json());
  CheckpointMeta meta;
  meta.step = rl.collect_rounds;
  meta.seed = rl.seed;
  meta.extra = {{"rl", rl.to_json()}};
  save_checkpoint(res.policy, dir / "checkpoint", meta);
  out.checkpoint_hash = hex64(params_hash(res.policy.params()));
  return out;
}

// Cross-seed mean and bootstrap CI of the collect success rate per round.
inline CurveStats aggregate_curves(const std::vector<std::vector<RoundRecord>>& runs, int n_resamples,
                                   double confidence, std::uint64_t seed) {
  CurveStats cs;
  std::map<int, std::vector<double>> by_round;
  for (const auto& run : runs)
    for (const auto& r : run)
      if (r.collect_round >= 1) by_round[r.collect_round].push_back(r.success_rate);
  for (const auto& [round, xs] : by_round) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    auto [lo, hi] = bootstrap_mean_ci(xs, n_resamples, confidence, derive_seed(seed, "curve", static_cast<std::uint64_t>(round)));
    cs.rounds.push_back(round);
    cs.mean.push_back(m);
    cs.ci_low.push_back(std::min(lo, m));
    cs.ci_high.push_back(std::max(hi, m));
  }
  return cs;
}

inline nlohmann::json arm_aggregate_json(const std::string& arm, const std::vector<std::uint64_t>& seeds,
                                         const std::vector<std::vector<RoundRecord>>& runs,
                                         const ExperimentConfig& cfg) {
  const auto cs = aggregate_curves(runs, cfg.eval_resamples, cfg.eval_confidence, derive_seed(cfg.seeds.front(), arm));
  nlohmann::json curve = nlohmann::json::array();
  for (std::size_t i = 0; i < cs.rounds.size(); ++i)
    curve.push_back({{"collect_round", cs.rounds[i]}, {"mean", cs.mean[i]}, {"ci_low", cs.ci_low[i]}, {"ci_high", cs.ci_high[i]}});
  std::vector<double> aucs;
  for (const auto& r : runs) aucs.push_back(success_auc(r));
  auto [lo, hi] = bootstrap_mean_ci(aucs, cfg.eval_resamples, cfg.eval_confidence, derive_seed(cfg.seeds.front(), arm + ":auc"));
  const auto ms = mean_std(aucs);
  return {{"arm", arm},
          {"seeds", seeds},
          {"curve", curve},
          {"auc", {{"per_seed", aucs}, {"mean", ms.mean}, {"ci_low", std::min(lo, ms.mean)}, {"ci_high", std::max(hi, ms.mean)}}}};
}

namespace detail {

inline std::vector<CriticalProbe> probes_for(const ExperimentConfig& cfg, int n_pretrain, int rl_digits) {
  if (cfg.probe_problems == 0) return {};
  Rng rng(derive_seed(cfg.seeds.front(), "probes", static_cast<std::uint64_t>(rl_digits)));
  std::vector<AdditionProblem> ps;
  for (int i = 0; i < cfg.probe_problems; ++i) ps.push_back(sample_problem_identical(rl_digits, rng));
  return make_critical_probes(ps, n_pretrain);
}

inline double trace_at(const TokenProbTrace& t, bool last) {
  return t.points.empty() ? 0.0 : (last ? t.points.back().second : t.points.front().second);
}

inline std::string seed_dir(std::uint64_t s) { return "seed-" + std::to_string(s); }

}  // namespace detail

struct ArmSpec {
  std::string name;
  RLConfig rl;
};

// Runs every arm over every seed from one pre-trained model. Per-(arm, seed)
// failures are recorded and the rest continue.
inline std::map<std::string, std::vector<RlRunOutput>> run_arms(const ExperimentConfig& cfg,
                                                                const Model<float>& pretrained, int n_pretrain,
                                                                const std::vector<ArmSpec>& arms,
                                                                detail::RunContext& ctx, RunManifest& man,
                                                                const fs::path& base) {
  const int rl_digits = n_pretrain + cfg.rl_offset;
  const auto probes = detail::probes_for(cfg, n_pretrain, rl_digits);
  std::map<std::string, std::vector<RlRunOutput>> out;
  for (const auto& arm : arms) {
    std::vector<std::vector<RoundRecord>> runs;
    std::vector<std::uint64_t> ok_seeds;
    for (auto s : cfg.seeds) {
      RLConfig rl = arm.rl;
      rl.rl_digits = rl_digits;
      rl.seed = derive_seed(s, "rl");
      const auto dir = base / arm.name / detail::seed_dir(s);
      ctx.log("rl arm " + arm.name + " seed " + std::to_string(s));
      try {
        auto r = rl_run(pretrained, rl, probes, cfg.probe_every, dir);
        ctx.artifact(dir / "metrics.jsonl");
        ctx.artifact(dir / "traces.jsonl");
        ctx.artifact(dir / "checkpoint");
        runs.push_back(r.records);
        ok_seeds.push_back(s);
        out[arm.name].push_back(std::move(r));
      } catch (const std::exception& e) {
        man.failures.push_back(arm.name + "/" + detail::seed_dir(s) + ": " + e.what());
        out[arm.name].push_back({});
      }
    }
    if (!runs.empty()) {
      const auto p = base.parent_path() / "aggregate" / (arm.name + ".json");
      write_json_file(p, arm_aggregate_json(arm.name, ok_seeds, runs, cfg));
      ctx.artifact(p);
    }
  }
  return out;
}

// Paired comparison of two arms run over the same seeds.
inline nlohmann::json paired_summary(const std::vector<RlRunOutput>& standard,
                                     const std::vector<RlRunOutput>& prioritized,
                                     const std::vector<std::uint64_t>& seeds, double uncertain_threshold) {
  nlohmann::json pairs = nlohmann::json::array();
  int wins = 0, n_pairs = 0;
  std::vector<double> gaps;
  for (std::size_t i = 0; i < seeds.size() && i < standard.size() && i < prioritized.size(); ++i) {
    if (standard[i].records.empty() || prioritized[i].records.empty()) continue;
    const double a_std = success_auc(standard[i].records);
    const double a_pri = success_auc(prioritized[i].records);
    ++n_pairs;
    wins += a_pri > a_std;
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& ts : standard[i].traces) {
      const auto it = std::find_if(prioritized[i].traces.begin(), prioritized[i].traces.end(),
                                   [&](const TokenProbTrace& t) { return t.label == ts.label; });
      if (it == prioritized[i].traces.end()) continue;
      const double init = detail::trace_at(ts, false);
      const bool uncertain = init < uncertain_threshold;
      const double end_std = detail::trace_at(ts, true), end_pri = detail::trace_at(*it, true);
      if (uncertain) gaps.push_back(end_pri - end_std);
      tr.push_back({{"label", ts.label}, {"initial", init}, {"uncertain", uncertain},
                    {"final_standard", end_std}, {"final_prioritized", end_pri}});
    }
    pairs.push_back({{"seed", seeds[i]}, {"auc_standard", a_std}, {"auc_prioritized", a_pri}, {"traces", tr}});
  }
  nlohmann::json j = {{"pairs", pairs}, {"n_pairs", n_pairs}, {"prioritized_wins", wins}};
  if (gaps.empty()) {
    j["uncertain_trace_gap"] = nullptr;
  } else {
    j["uncertain_trace_gap"] = mean_std(gaps).mean;
  }
  j["n_uncertain_traces"] = gaps.size();
  return j;
}

inline Model<float> resolve_pretrained(const ExperimentConfig& cfg, int n, detail::RunContext& ctx,
                                       std::string& hash) {
  if (!cfg.checkpoint.empty()) {
    auto ck = load_checkpoint(cfg.checkpoint, cfg.model);
    hash = ck.hash;
    return std::move(ck.model);
  }
  const auto dir = ctx.dir() / "pretrain" / ("N" + std::to_string(n));
  auto m = pretrain_stage(cfg, n, dir, [&](const std::string& s) { ctx.log(s); });
  ctx.artifact(dir / "metrics.jsonl");
  ctx.artifact(dir / "checkpoint");
  hash = hex64(params_hash(m.params()));
  return m;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunLog& log = {}) {
  cfg.validate();
  detail::RunContext ctx(cfg, log);
  const fs::path dir = ctx.dir();
  fs::create_directories(dir);
  RunManifest man;
  man.config = cfg.to_json();
  man.seeds = cfg.seeds;
  man.started_at = utc_timestamp();
  nlohmann::json summary = {{"kind", to_string(cfg.kind)}};

  auto finish = [&]() {
    man.finished_at = utc_timestamp();
    write_json_file(dir / "summary.json", summary);
    ctx.artifact(dir / "summary.json");
    man.artifacts = ctx.artifacts();
    write_json_file(dir / "manifest.json", man.to_json());
    return RunResult{dir, man, summary};
  };

  if (cfg.kind == ExperimentKind::pretrain_compare) {
    std::vector<int> ns;
    std::vector<Model<float>> models;
    nlohmann::json per_n = nlohmann::json::array();
    for (int n : cfg.n_pretrain) {
      try {
        std::string hash;
        models.push_back(resolve_pretrained(cfg, n, ctx, hash));
        ns.push_back(n);
        ArmSpec arm{"standard", cfg.rl_standard};
        auto runs = run_arms(cfg, models.back(), n, {arm}, ctx, man, dir / "rl" / ("N" + std::to_string(n)));
        std::vector<double> aucs;
        for (const auto& r : runs["standard"])
          if (!r.records.empty()) aucs.push_back(success_auc(r.records));
        per_n.push_back({{"n_pretrain", n}, {"checkpoint_hash", hash}, {"auc", aucs}});
      } catch (const std::exception& e) {
        man.failures.push_back("N" + std::to_string(n) + ": " + e.what());
      }
    }
    if (!ns.empty()) {
      std::vector<const Model<float>*> ptrs;
      for (const auto& m : models) ptrs.push_back(&m);
      auto [ident, vary] = accuracy_tables(cfg, ns, ptrs);
      for (const auto& [name, t] : {std::pair{"identical", &ident}, std::pair{"varying", &vary}}) {
        write_text_file(dir / "eval" / (std::string(name) + ".txt"), t->to_text());
        write_json_file(dir / "eval" / (std::string(name) + ".json"), t->to_json());
        ctx.artifact(dir / "eval" / (std::string(name) + ".txt"));
        ctx.artifact(dir / "eval" / (std::string(name) + ".json"));
      }
    }
    summary["per_n"] = per_n;
    return finish();
  }

  // kl_compare and beta_sweep share one pre-trained model at the first N.
  const int n = cfg.n_pretrain.front();
  std::string hash;
  const Model<float> pretrained = resolve_pretrained(cfg, n, ctx, hash);
  summary["n_pretrain"] = n;
  summary["checkpoint_hash"] = hash;

  if (cfg.kind == ExperimentKind::kl_compare) {
    auto runs = run_arms(cfg, pretrained, n, {{"standard", cfg.rl_standard}, {"prioritized", cfg.rl_prioritized}},
                         ctx, man, dir / "rl");
    summary["comparison"] = paired_summary(runs["standard"], runs["prioritized"], cfg.seeds, cfg.uncertain_threshold);
    return finish();
  }

  // beta_sweep: prioritized arms differing only in beta, plus a standard
  // reference with the same remaining hyperparameters.
  std::vector<ArmSpec> arms;
  RLConfig ref = cfg.rl_prioritized;
  ref.kl_mode = KlMode::standard;
  arms.push_back({"standard", ref});
  for (double b : cfg.betas) {
    RLConfig rl = cfg.rl_prioritized;
    rl.kl_mode = KlMode::prioritized;
    rl.beta = b;
    arms.push_back({detail::arm_dir_name(b), rl});
  }
  auto runs = run_arms(cfg, pretrained, n, arms, ctx, man, dir / "rl");
  nlohmann::json per_beta = nlohmann::json::array();
  for (double b : cfg.betas) {
    std::vector<double> aucs;
    for (const auto& r : runs[detail::arm_dir_name(b)])
      if (!r.records.empty()) aucs.push_back(success_auc(r.records));
    per_beta.push_back({{"beta", b}, {"arm", detail::arm_dir_name(b)}, {"auc", aucs}, {"auc_mean", mean_std(aucs).mean}});
  }
  summary["per_beta"] = per_beta;
  return finish();
}

// Re-runs the experiment recorded in a manifest. With a new output root (or
// run id) the original artifacts are left untouched.
inline RunResult rerun_from_manifest(const fs::path& manifest_path, const std::optional<fs::path>& output_root = {},
                                     const std::optional<std::string>& run_id = {}, const RunLog& log = {}) {
  const auto man = RunManifest::from_json(read_json_file(manifest_path));
  auto cfg = ExperimentConfig::from_json(man.config);
  if (output_root) cfg.output_root = *output_root;
  if (run_id) cfg.run_id = *run_id;
  if (fs::exists(cfg.run_dir() / "manifest.json") &&
      fs::equivalent(cfg.run_dir() / "manifest.json", manifest_path))
    throw std::invalid_argument("rerun would overwrite the original run; choose another output root or run id");
  return run_experiment(cfg, log);
}

// Files that differ (or exist on one side only) between two run directories,
// ignoring manifest.json.
inline std::vector<std::string> diff_run_dirs(const fs::path& a, const fs::path& b) {
  auto list = [](const fs::path& root) {
    std::map<std::string, fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = e.path();
    files.erase("manifest.json");
    return files;
  };
  auto read = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  const auto fa = list(a), fb = list(b);
  std::vector<std::string> diffs;
  for (const auto& [k, p] : fa) {
    auto it = fb.find(k);
    if (it == fb.end() || read(p) != read(it->second)) diffs.push_back(k);
  }
  for (const auto& [k, p] : fb)
    if (!fa.count(k)) diffs.push_back(k);
  return diffs;
}

}  // namespace kllab
