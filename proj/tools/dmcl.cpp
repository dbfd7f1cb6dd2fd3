// dmcl: corpus generation, base training, continual runs, memory sweeps and
// the full-training upper bound.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <filesystem>
#include <map>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmcl/experiment.hpp"

namespace fs = std::filesystem;
using namespace dmcl;

namespace {

struct Common {
  std::string config_file;
  std::string corpus;
  std::string out;
  std::string base;
  std::map<std::string, std::string> raw;  // key -> flag text
  std::vector<std::pair<std::string, CLI::Option*>> bound;
};

void bind(CLI::App& cmd, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.bound.emplace_back(key, cmd.add_option(flag, c.raw[key], help));
}

void bind_run_flags(CLI::App& cmd, Common& c) {
  bind(cmd, c, "--seed", "seed", "first run seed (runs use seed, seed+1, ...)");
  bind(cmd, c, "--seeds", "seeds", "number of seeded repetitions");
  cmd.add_option("--config", c.config_file, "flat key = value file; flags override it")->check(CLI::ExistingFile);
}

ExperimentConfig resolve(const Common& c, GeneratorConfig* gen = nullptr, CorpusCounts* counts = nullptr) {
  ExperimentConfig cfg;
  if (!c.config_file.empty()) load_config_file(c.config_file, cfg, gen, counts);
  for (const auto& [key, opt] : c.bound)
    if (opt->count() > 0) apply_setting(cfg, gen, counts, key, c.raw.at(key));
  cfg.validate();
  return cfg;
}

StoredCorpus open_corpus(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw std::runtime_error("no corpus at " + dir + " (run dmcl generate first)");
  return read_corpus(dir);
}

fs::path checkpoint_path(const fs::path& dir, std::uint64_t seed) { return dir / ("base_" + seed_tag(seed) + ".ckpt"); }

void log_line(const std::string& text) { std::cerr << text << std::endl; }

int cmd_generate(const Common& c) {
  GeneratorConfig gen;
  CorpusCounts counts;
  const ExperimentConfig cfg = resolve(c, &gen, &counts);
  validate(counts);
  const Corpus corpus = build_corpus(gen, counts, cfg.seed);
  write_corpus(c.out, corpus, gen, counts, cfg.seed);
  log_line("corpus written to " + c.out + " (config hash " + hex64(corpus_config_hash(gen, counts)) + ")");
  return 0;
}

int cmd_train_base(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const StoredCorpus stored = open_corpus(c.corpus);
  fs::create_directories(c.out);
  const std::string hash = experiment_hash(cfg, stored.config_hash);
  nlohmann::json summary{{"schema", "dmcl-base-summary"}, {"schema_version", kSummarySchemaVersion}, {"config_hash", hash}};
  for (std::uint64_t seed : cfg.run_seeds()) {
    BaseRun run = run_base(cfg, stored.corpus, seed);
    nlohmann::json provenance{{"corpus_hash", hex64(stored.config_hash)}, {"config_hash", hash}, {"epochs", cfg.base_epochs},
                              {"learning_rate", cfg.base_learning_rate}, {"fisher_samples", cfg.fisher ? cfg.fisher_samples : 0}};
    save_checkpoint(checkpoint_path(c.out, seed).string(), run.model, CheckpointMeta{seed, provenance.dump()});
    run.log.write((fs::path(c.out) / ("base_" + seed_tag(seed) + "_metrics.csv")).string());
    summary["runs"].push_back({{"seed", seed}, {"validation_accuracy_A", run.validation_accuracy}, {"test_accuracy_A", run.test_accuracy},
                               {"fisher", cfg.fisher}});
    log_line("base " + seed_tag(seed) + ": task A validation accuracy " + format_value(run.validation_accuracy));
  }
  write_json(fs::path(c.out) / "base_summary.json", summary);
  return 0;
}

std::vector<ContinualRun> continual_runs(const Common& c, const ExperimentConfig& cfg, const StoredCorpus& stored,
                                         Strategy strategy, std::size_t memory, const fs::path& dir) {
  const fs::path base_dir = c.base.empty() ? fs::path(c.out) : fs::path(c.base);
  ExperimentConfig run_cfg = cfg;
  run_cfg.memory = memory;
  const std::string hash = experiment_hash(run_cfg, stored.config_hash);
  std::vector<ContinualRun> runs;
  for (std::uint64_t seed : cfg.run_seeds()) {
    const fs::path ckpt = checkpoint_path(base_dir, seed);
    if (!fs::exists(ckpt)) throw std::runtime_error("missing base checkpoint " + ckpt.string() + " (run dmcl train-base)");
    const Model base = load_checkpoint(ckpt.string());
    ContinualRun run = run_continual(cfg, stored.corpus, base, strategy, seed, memory, hash);
    write_run_files(dir, run);
    log_line(std::string(to_string(strategy)) + " " + seed_tag(seed) + ": final A/B/C " +
             format_value(run.summary.final_accuracy[0]) + " " + format_value(run.summary.final_accuracy[1]) + " " +
             format_value(run.summary.final_accuracy[2]) + ", BWT " + format_value(*run.summary.bwt));
    run.stream.clear();
    runs.push_back(std::move(run));
  }
  write_json(dir / "summary.json", aggregate_json(runs));
  return runs;
}

std::string run_dir_name(Strategy s, std::size_t memory) {
  std::string name(to_string(s));
  if (s == Strategy::dm) name += "_M" + std::to_string(memory);
  return name;
}

int cmd_continual(const Common& c, const std::string& strategy_name) {
  const ExperimentConfig cfg = resolve(c);
  const Strategy strategy = parse_strategy(strategy_name);
  const StoredCorpus stored = open_corpus(c.corpus);
  continual_runs(c, cfg, stored, strategy, cfg.memory, fs::path(c.out) / run_dir_name(strategy, cfg.memory));
  return 0;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const StoredCorpus stored = open_corpus(c.corpus);
  std::vector<SweepRow> rows;
  for (std::size_t m : cfg.sweep_sizes) {
    auto runs = continual_runs(c, cfg, stored, Strategy::dm, m, fs::path(c.out) / run_dir_name(Strategy::dm, m));
    rows.push_back(sweep_row(m, runs));
  }
  write_sweep_table(fs::path(c.out) / "sweep.csv", rows);
  return 0;
}

int cmd_full(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const StoredCorpus stored = open_corpus(c.corpus);
  const fs::path dir = fs::path(c.out) / "full";
  fs::create_directories(dir);
  const std::string hash = experiment_hash(cfg, stored.config_hash);
  std::vector<FullRun> runs;
  for (std::uint64_t seed : cfg.run_seeds()) {
    FullRun run = run_full(cfg, stored.corpus, seed, hash);
    run.log.write((dir / (seed_tag(seed) + "_metrics.csv")).string());
    write_json(dir / (seed_tag(seed) + "_summary.json"), summary_json(run));
    log_line("full " + seed_tag(seed) + ": final A/B/C " + format_value(run.summary.final_accuracy[0]) + " " +
             format_value(run.summary.final_accuracy[1]) + " " + format_value(run.summary.final_accuracy[2]));
    runs.push_back(std::move(run));
  }
  write_json(dir / "summary.json", aggregate_json(std::span<const FullRun>(runs)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-memory continual learning on a synthetic shifted stream"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common gen_c, base_c, cont_c, sweep_c, full_c;
  std::string strategy;

  auto* gen = app.add_subcommand("generate", "write the synthetic corpus (one binary file per split plus manifest.json)");
  gen->add_option("--out", gen_c.out, "corpus directory")->required();
  bind(*gen, gen_c, "--seed", "seed", "corpus seed");
  gen->add_option("--config", gen_c.config_file, "key = value file with generator keys (e.g. sharp_noise, count_base)")
      ->check(CLI::ExistingFile);

  auto* base = app.add_subcommand("train-base", "train one base model per seed on task A and store checkpoints");
  base->add_option("--corpus", base_c.corpus, "corpus directory")->required();
  base->add_option("--out", base_c.out, "output directory for checkpoints and metrics")->required();
  bind_run_flags(*base, base_c);
  bind(*base, base_c, "--base-epochs", "base_epochs", "training epochs");
  bind(*base, base_c, "--base-lr", "base_lr", "Adam learning rate");
  bind(*base, base_c, "--epoch-batch", "epoch_batch", "mini-batch size");
  bind(*base, base_c, "--fisher", "fisher", "store Fisher diagonal and anchor for EWC (true/false)");
  bind(*base, base_c, "--fisher-samples", "fisher_samples", "base samples used for the Fisher diagonal");

  auto* cont = app.add_subcommand("continual", "run one strategy over the stream for every seed");
  cont->add_option("--strategy", strategy, "naive, ewc, ewc-fbn or dm")->required();
  cont->add_option("--corpus", cont_c.corpus, "corpus directory")->required();
  cont->add_option("--out", cont_c.out, "output directory")->required();
  cont->add_option("--base", cont_c.base, "directory holding base checkpoints (default: --out)");
  bind_run_flags(*cont, cont_c);
  bind(*cont, cont_c, "--memory", "memory", "memory size M (dm)");
  bind(*cont, cont_c, "--lambda", "lambda", "EWC penalty weight");
  bind(*cont, cont_c, "--lr", "lr", "Adam learning rate for stream updates");
  bind(*cont, cont_c, "--input-batch", "input_batch", "stream samples per step (B)");
  bind(*cont, cont_c, "--train-batch", "train_batch", "training batch size (T)");
  bind(*cont, cont_c, "--probe-every", "probe_every", "validation cadence in steps");
  bind(*cont, cont_c, "--ramp-fraction", "ramp_fraction", "transition window as a fraction of segment length");
  bind(*cont, cont_c, "--refresh-signatures", "refresh_signatures", "recompute stored gram signatures every step (true/false)");

  auto* sweep = app.add_subcommand("sweep-memory", "run dm for each memory size and write sweep.csv");
  sweep->add_option("--corpus", sweep_c.corpus, "corpus directory")->required();
  sweep->add_option("--out", sweep_c.out, "output directory")->required();
  sweep->add_option("--base", sweep_c.base, "directory holding base checkpoints (default: --out)");
  bind_run_flags(*sweep, sweep_c);
  bind(*sweep, sweep_c, "--sizes", "sizes", "comma-separated memory sizes");
  bind(*sweep, sweep_c, "--lr", "lr", "Adam learning rate for stream updates");
  bind(*sweep, sweep_c, "--refresh-signatures", "refresh_signatures", "recompute stored gram signatures every step (true/false)");

  auto* full = app.add_subcommand("full-training", "train the upper-bound model on all training data at once");
  full->add_option("--corpus", full_c.corpus, "corpus directory")->required();
  full->add_option("--out", full_c.out, "output directory")->required();
  bind_run_flags(*full, full_c);
  bind(*full, full_c, "--full-epochs", "full_epochs", "training epochs");
  bind(*full, full_c, "--base-lr", "base_lr", "Adam learning rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*cont) {
    try {
      parse_strategy(strategy);
    } catch (const std::invalid_argument& e) {
      std::cerr << "dmcl: " << e.what() << '\n';
      return 2;
    }
  }

  try {
    if (*gen) return cmd_generate(gen_c);
    if (*base) return cmd_train_base(base_c);
    if (*cont) return cmd_continual(cont_c, strategy);
    if (*sweep) return cmd_sweep(sweep_c);
    if (*full) return cmd_full(full_c);
  } catch (const ConfigError& e) {
    std::cerr << "dmcl: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dmcl: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
