// kllab command line: data generation, pre-training, RL fine-tuning,
// evaluation, critical-token analysis and experiment sweeps.

#include <filesystem>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "kllab/runner.hpp"
#include "kllab/token_analysis.hpp"

using namespace kllab;
namespace fs = std::filesystem;

namespace {

void log_line(const std::string& s) { std::cerr << s << "\n"; }

// pretrain config file:
//   {"model": {...}, "pretrain": {...}, "n_max": 3, "data_examples": 50000,
//    "data_seed": 0, "out": "runs/pretrain"}
// pretrain.dataset_path, when set, names an existing dataset; otherwise one is
// generated into <out>/data.jsonl.
int cmd_pretrain(const fs::path& config_path) {
  const auto j = read_json_file(config_path);
  const auto mc = ModelConfig::from_json(j.value("model", nlohmann::json::object()));
  auto pc = PretrainConfig::from_json(j.value("pretrain", nlohmann::json::object()));
  const int n_max = j.value("n_max", 3);
  const fs::path out = j.value("out", std::string("runs/pretrain"));
  fs::create_directories(out);
  fs::path data_path = pc.dataset_path;
  if (data_path.empty()) {
    data_path = out / "data.jsonl";
    build_dataset({n_max, j.value("data_examples", std::size_t{50000}), j.value("data_seed", std::uint64_t{0}), "train"},
                  data_path);
    pc.dataset_path = data_path.string();
  } else if (data_path.is_relative()) {
    data_path = config_path.parent_path() / data_path;
  }
  const auto data = load_dataset(data_path);
  write_json_file(out / "config.json", {{"model", mc.to_json()}, {"pretrain", pc.to_json()}, {"n_max", n_max}});
  MetricsWriter mw(out / "metrics.jsonl");
  const auto res = pretrain(Model<float>::initialized(mc), data, n_max, pc, [&](const PretrainRecord& r) {
    mw.write(r.to_json());
    if (r.eval_accuracy)
      std::cerr << "step " << r.step << " loss " << r.loss << " heldout " << *r.eval_accuracy << "\n";
  });
  CheckpointMeta meta;
  meta.step = res.best_step;
  meta.seed = pc.seed;
  meta.rng_state = res.rng_state;
  meta.extra = {{"n_pretrain", n_max}, {"best_accuracy", res.best_accuracy}};
  save_checkpoint(res.best_model, out / "checkpoint", meta);
  std::cout << "checkpoint " << (out / "checkpoint").string() << " step " << res.best_step << " heldout accuracy "
            << res.best_accuracy << "\n";
  return 0;
}

// rl-finetune config file:
//   {"checkpoint": path, "rl": {...every RL hyperparameter...}, "n_pretrain": 3,
//    "probe_problems": 16, "probe_every": 0, "out": "runs/rl"}
int cmd_rl(const fs::path& config_path, const std::string& kl_mode, std::optional<double> beta) {
  const auto j = read_json_file(config_path);
  RLConfig rl = RLConfig::from_json(j.value("rl", nlohmann::json::object()));
  if (!kl_mode.empty()) rl.kl_mode = parse_kl_mode(kl_mode);
  if (beta) rl.beta = *beta;
  rl.validate();
  const fs::path ck = j.at("checkpoint").get<std::string>();
  const fs::path out = j.value("out", std::string("runs/rl"));
  const int n_pretrain = j.value("n_pretrain", rl.rl_digits - 1);
  const auto model = load_checkpoint(ck).model;

  Rng rng(derive_seed(rl.seed, "probes"));
  std::vector<AdditionProblem> ps;
  for (int i = 0; i < j.value("probe_problems", 16); ++i) ps.push_back(sample_problem_identical(rl.rl_digits, rng));
  const auto probes = make_critical_probes(ps, n_pretrain);
  write_json_file(out / "config.json", {{"checkpoint", ck.string()}, {"rl", rl.to_json()}, {"n_pretrain", n_pretrain}});
  const auto r = rl_run(model, rl, probes, j.value("probe_every", 0), out);
  std::cout << "collect rounds " << rl.collect_rounds << ", success AUC " << success_auc(r.records) << ", checkpoint "
            << (out / "checkpoint").string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& ck, const std::string& mode, int digits, int n, std::uint64_t seed, int resamples,
             const std::string& out) {
  const auto loaded = load_checkpoint(ck);
  EvalConfig ec;
  ec.mode = parse_eval_mode(mode);
  ec.digit_length = digits;
  ec.n_examples = n;
  ec.seed = seed;
  ec.n_resamples = resamples;
  auto rep = evaluate(loaded.model, ec);
  std::cout << to_string(ec.mode) << " digit length " << digits << ": " << std::fixed << std::setprecision(1)
            << 100 * rep.accuracy << "% +- " << 50 * (rep.ci_high - rep.ci_low) << "% (" << rep.n_correct << "/"
            << rep.n_examples << ", " << 100 * ec.confidence << "% CI " << 100 * rep.ci_low << "-" << 100 * rep.ci_high
            << "%)\n";
  if (!out.empty()) write_json_file(out, rep.to_json());
  return 0;
}

int cmd_analyze(const fs::path& ck, int n_pretrain, int digits, int generations, std::uint64_t seed,
                const fs::path& out, int transcripts) {
  const auto model = load_checkpoint(ck).model;
  const auto& v = Vocabulary::standard();
  Rng rng(derive_seed(seed, "analyze"));
  fs::create_directories(out / "transcripts");
  MetricsWriter pw(out / "profiles.jsonl");
  std::vector<CertaintyProfile> profiles;
  std::vector<AdditionProblem> problems;
  for (int i = 0; i < generations; ++i) {
    const auto p = sample_problem_identical(digits, rng);
    problems.push_back(p);
    const auto prompt = v.encode(render_prompt(p));
    GenerationConfig g;
    g.max_new_tokens = model.config().context_len - static_cast<int>(prompt.size());
    const auto gen = generate(model, std::span<const TokenId>(prompt), g);
    const auto loc = locate_critical_positions(v.decode(gen.tokens), p, n_pretrain);
    if (!loc.diagnostic.empty()) std::cerr << p.a << "+" << p.b << ": " << loc.diagnostic << "\n";
    auto prof = profile_generation(model, std::span<const TokenId>(prompt), std::span<const TokenId>(gen.tokens),
                                   std::span<const CriticalPosition>(loc.positions), n_pretrain, digits);
    pw.write(prof.to_json());
    if (i < transcripts) {
      const auto tr = render_certainty_transcript(prof);
      const auto stem = out / "transcripts" / ("gen-" + std::to_string(i));
      write_text_file(stem.string() + ".ansi", tr.ansi);
      write_text_file(stem.string() + ".html", tr.html);
    }
    profiles.push_back(std::move(prof));
  }
  const auto stats = aggregate_stats(profiles);
  write_json_file(out / "stats.json", stats.to_json());
  const std::string table = stats_table_header() + "\n" + format_stats_row(n_pretrain, stats) + "\n";
  write_text_file(out / "stats.txt", table);
  std::cout << table;

  // probabilities of the correct token at the critical positions under gold prefixes
  const auto probes = make_critical_probes(problems, n_pretrain);
  CriticalProbTracker tracker(probes);
  tracker.record(0, model);
  MetricsWriter tw(out / "traces.jsonl");
  for (const auto& t : tracker.traces()) tw.write(t.to_json());
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& manifest, const std::string& out_root,
              const std::string& run_id) {
  std::optional<fs::path> root;
  if (!out_root.empty()) root = out_root;
  std::optional<std::string> id;
  if (!run_id.empty()) id = run_id;
  RunResult r;
  if (!manifest.empty()) {
    r = rerun_from_manifest(manifest, root, id, log_line);
  } else {
    auto cfg = ExperimentConfig::from_json(read_json_file(config));
    if (root) cfg.output_root = *root;
    if (id) cfg.run_id = *id;
    r = run_experiment(cfg, log_line);
  }
  std::cout << "run directory " << r.dir.string() << "\n" << r.summary.dump(2) << "\n";
  for (const auto& f : r.manifest.failures) std::cerr << "failed: " << f << "\n";
  return r.manifest.failures.empty() ? 0 : 2;
}

nlohmann::json default_config(const std::string& kind) {
  if (kind == "pretrain")
    return {{"model", ModelConfig{}.to_json()}, {"pretrain", PretrainConfig{}.to_json()}, {"n_max", 3},
            {"data_examples", 50000}, {"data_seed", 0}, {"out", "runs/pretrain-n3"}};
  if (kind == "rl-finetune")
    return {{"checkpoint", "runs/pretrain-n3/checkpoint"}, {"rl", RLConfig::standard_kl().to_json()}, {"n_pretrain", 3},
            {"probe_problems", 16}, {"probe_every", 0}, {"out", "runs/rl-n3"}};
  ExperimentConfig c;
  c.kind = parse_experiment_kind(kind);
  if (c.kind == ExperimentKind::beta_sweep) c.betas = {0, 150, 10000};
  return c.to_json();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kllab: scratchpad addition, A2C fine-tuning with prioritized KL, critical-token analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  auto* gen = app.add_subcommand("gen-data", "write a class-balanced training dataset");
  int n_max = 3;
  std::size_t count = 50000;
  std::uint64_t seed = 0;
  std::string out, split = "train";
  gen->add_option("--n-max", n_max, "largest operand length")->check(CLI::PositiveNumber);
  gen->add_option("--count", count, "number of examples");
  gen->add_option("--seed", seed);
  gen->add_option("--split", split);
  gen->add_option("--out", out, "output .jsonl path")->required();

  auto* pre = app.add_subcommand("pretrain", "supervised pre-training on scratchpad documents");
  std::string config;
  pre->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);

  auto* rl = app.add_subcommand("rl-finetune", "A2C fine-tuning from a pre-trained checkpoint");
  std::string kl_mode;
  std::optional<double> beta;
  rl->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
  rl->add_option("--kl-mode", kl_mode, "standard or prioritized")->check(CLI::IsMember({"standard", "prioritized"}));
  rl->add_option("--beta", beta, "certainty exponent for the prioritized penalty");

  auto* ev = app.add_subcommand("eval", "greedy accuracy with a bootstrap interval");
  std::string checkpoint, mode = "identical";
  int digits = 3, n = 1000, resamples = 10000;
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--mode", mode)->check(CLI::IsMember({"identical", "varying"}));
  ev->add_option("--digits", digits)->check(CLI::PositiveNumber);
  ev->add_option("--n", n)->check(CLI::PositiveNumber);
  ev->add_option("--seed", seed);
  ev->add_option("--resamples", resamples)->check(CLI::PositiveNumber);
  ev->add_option("--out", out, "write the report as JSON");

  auto* an = app.add_subcommand("analyze", "critical-token statistics over generations");
  int n_pretrain = 3, generations = 50, transcripts = 5;
  std::string analyze_out = "analysis";
  an->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  an->add_option("--n-pretrain", n_pretrain)->check(CLI::PositiveNumber);
  an->add_option("--digits", digits)->check(CLI::PositiveNumber);
  an->add_option("--generations", generations)->check(CLI::PositiveNumber);
  an->add_option("--seed", seed);
  an->add_option("--transcripts", transcripts, "number of colored transcripts to write");
  an->add_option("--out", analyze_out, "output directory");

  auto* sw = app.add_subcommand("sweep", "run an experiment from a config, or rerun one from its manifest");
  std::string manifest, out_root, run_id;
  auto* cfg_opt = sw->add_option("--config", config, "experiment config file")->check(CLI::ExistingFile);
  auto* man_opt = sw->add_option("--manifest", manifest, "manifest.json of an earlier run")->check(CLI::ExistingFile);
  cfg_opt->excludes(man_opt);
  sw->add_option("--output-root", out_root);
  sw->add_option("--run-id", run_id);

  auto* cf = app.add_subcommand("config", "print a complete default config file");
  std::string kind = "kl_compare";
  cf->add_option("--kind", kind, "pretrain, rl-finetune, pretrain_compare, kl_compare or beta_sweep")
      ->check(CLI::IsMember({"pretrain", "rl-finetune", "pretrain_compare", "kl_compare", "beta_sweep"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) {
      const auto m = build_dataset({n_max, count, seed, split}, out);
      std::cout << to_json(m).dump(2) << "\n";
      return 0;
    }
    if (*cf) {
      std::cout << default_config(kind).dump(2) << "\n";
      return 0;
    }
    if (*pre) return cmd_pretrain(config);
    if (*rl) return cmd_rl(config, kl_mode, beta);
    if (*ev) return cmd_eval(checkpoint, mode, digits, n, seed, resamples, out);
    if (*an) {
      if (!an->count("--digits")) digits = n_pretrain + 1;
      return cmd_analyze(checkpoint, n_pretrain, digits, generations, seed, analyze_out, transcripts);
    }
    if (*sw) {
      if (config.empty() && manifest.empty()) throw std::invalid_argument("sweep needs --config or --manifest");
      return cmd_sweep(config, manifest, out_root, run_id);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
