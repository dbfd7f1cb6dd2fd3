#pragma once

// Experiment orchestration shared by the command-line tool and the acceptance
// suite: base training, continual runs per strategy, the memory-size sweep and
// the full-training upper bound, plus their on-disk reports.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmcl/checkpoint.hpp"
#include "dmcl/corpus_io.hpp"
#include "dmcl/evaluation.hpp"
#include "dmcl/strategies.hpp"

namespace dmcl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;  // run seeds are seed, seed+1, ...
  std::size_t seeds = 5;
  std::size_t input_batch = 8;
  std::size_t train_batch = 8;
  std::size_t memory = 32;
  double lambda = 1e4;
  double learning_rate = 1e-3;       // continual phase
  double base_learning_rate = 1e-3;  // epoch trainers
  std::size_t base_epochs = 15;
  std::size_t full_epochs = 15;
  std::size_t epoch_batch = 16;
  std::size_t fisher_samples = 600;
  std::size_t probe_every = 30;
  std::size_t adaptation_every = 1;  // cadence of the task-C tracking used for steps-to-0.8
  double ramp_fraction = 0.15;
  bool refresh_signatures = false;
  bool fisher = true;
  double norm_momentum = 0.1;
  double norm_epsilon = 1e-5;
  std::vector<std::size_t> sweep_sizes{16, 32, 64, 80, 128, 160};

  void validate() const {
    if (seeds == 0) throw ConfigError("seeds must be positive");
    if (input_batch == 0 || train_batch == 0) throw ConfigError("batch sizes must be positive");
    if (input_batch > train_batch) throw ConfigError("input batch B must not exceed training batch T");
    if (memory < 2) throw ConfigError("memory size M must be at least 2");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(learning_rate > 0.0) || !(base_learning_rate > 0.0)) throw ConfigError("learning rates must be positive");
    if (epoch_batch == 0) throw ConfigError("epoch batch size must be positive");
    if (fisher && fisher_samples == 0) throw ConfigError("fisher_samples must be positive");
    if (probe_every == 0) throw ConfigError("probe_every must be positive");
    if (adaptation_every == 0) throw ConfigError("adaptation_every must be positive");
    if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) throw ConfigError("ramp_fraction must lie in [0, 1]");
    if (!(norm_momentum > 0.0 && norm_momentum <= 1.0)) throw ConfigError("norm_momentum must lie in (0, 1]");
    if (!(norm_epsilon > 0.0)) throw ConfigError("norm_epsilon must be positive");
    for (auto m : sweep_sizes)
      if (m < 2) throw ConfigError("sweep sizes must be at least 2");
  }

  std::vector<std::uint64_t> run_seeds() const {
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < seeds; ++i) out.push_back(seed + i);
    return out;
  }

  AdamSettings continual_adam() const { return AdamSettings{learning_rate}; }
  AdamSettings epoch_adam() const { return AdamSettings{base_learning_rate}; }
  NormSettings norm() const { return NormSettings{norm_momentum, norm_epsilon}; }
};

namespace detail {

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  const auto last = s.find_last_not_of(ws);
  s.erase(last == std::string::npos ? 0 : last + 1);
  return s;
}

}  // namespace detail

// Keys accepted in a config file, matching the command-line flag names with
// dashes replaced by underscores.
inline void set_option(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "seeds") cfg.seeds = parse_number<std::size_t>(key, value);
  else if (key == "input_batch") cfg.input_batch = parse_number<std::size_t>(key, value);
  else if (key == "train_batch") cfg.train_batch = parse_number<std::size_t>(key, value);
  else if (key == "memory") cfg.memory = parse_number<std::size_t>(key, value);
  else if (key == "lambda") cfg.lambda = parse_number<double>(key, value);
  else if (key == "lr") cfg.learning_rate = parse_number<double>(key, value);
  else if (key == "base_lr") cfg.base_learning_rate = parse_number<double>(key, value);
  else if (key == "base_epochs") cfg.base_epochs = parse_number<std::size_t>(key, value);
  else if (key == "full_epochs") cfg.full_epochs = parse_number<std::size_t>(key, value);
  else if (key == "epoch_batch") cfg.epoch_batch = parse_number<std::size_t>(key, value);
  else if (key == "fisher_samples") cfg.fisher_samples = parse_number<std::size_t>(key, value);
  else if (key == "probe_every") cfg.probe_every = parse_number<std::size_t>(key, value);
  else if (key == "adaptation_every") cfg.adaptation_every = parse_number<std::size_t>(key, value);
  else if (key == "ramp_fraction") cfg.ramp_fraction = parse_number<double>(key, value);
  else if (key == "refresh_signatures") cfg.refresh_signatures = detail::parse_bool(key, value);
  else if (key == "fisher") cfg.fisher = detail::parse_bool(key, value);
  else if (key == "norm_momentum") cfg.norm_momentum = parse_number<double>(key, value);
  else if (key == "norm_epsilon") cfg.norm_epsilon = parse_number<double>(key, value);
  else if (key == "sizes") {
    cfg.sweep_sizes.clear();
    std::stringstream ss(value);
    for (std::string item; std::getline(ss, item, ',');) cfg.sweep_sizes.push_back(parse_number<std::size_t>(key, detail::trim(item)));
    if (cfg.sweep_sizes.empty()) throw ConfigError("sizes must list at least one memory size");
  } else
    throw ConfigError("unknown config key '" + key + "'");
}

// Routes a key to the generator settings when `gen` is given, otherwise to the
// experiment settings. Generator keys are skipped by commands that read an
// existing corpus, since the corpus manifest already fixes them.
inline void apply_setting(ExperimentConfig& cfg, GeneratorConfig* gen, CorpusCounts* counts, const std::string& key,
                          const std::string& value) {
  GeneratorConfig scratch_gen;
  CorpusCounts scratch_counts;
  try {
    if (set_generator_option(gen ? *gen : scratch_gen, counts ? *counts : scratch_counts, key, value)) return;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  set_option(cfg, key, value);
}

// Flat "key = value" file; blank lines and lines starting with '#' are skipped.
inline void load_config_file(const std::filesystem::path& path, ExperimentConfig& cfg, GeneratorConfig* gen = nullptr,
                             CorpusCounts* counts = nullptr) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    apply_setting(cfg, gen, counts, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

// Hash of everything that influences a run's numbers except the run seed.
inline std::string experiment_hash(const ExperimentConfig& c, std::uint64_t corpus_hash) {
  using detail::canon;
  std::string s = "corpus=" + hex64(corpus_hash) + ";";
  s += "input_batch=" + std::to_string(c.input_batch) + ";train_batch=" + std::to_string(c.train_batch) + ";";
  s += "memory=" + std::to_string(c.memory) + ";lambda=" + canon(c.lambda) + ";";
  s += "lr=" + canon(c.learning_rate) + ";base_lr=" + canon(c.base_learning_rate) + ";";
  s += "base_epochs=" + std::to_string(c.base_epochs) + ";full_epochs=" + std::to_string(c.full_epochs) + ";";
  s += "epoch_batch=" + std::to_string(c.epoch_batch) + ";fisher_samples=" + std::to_string(c.fisher_samples) + ";";
  s += "probe_every=" + std::to_string(c.probe_every) + ";adaptation_every=" + std::to_string(c.adaptation_every) + ";ramp_fraction=" + canon(c.ramp_fraction) + ";";
  s += "refresh=" + std::to_string(c.refresh_signatures) + ";fisher=" + std::to_string(c.fisher) + ";";
  s += "norm_momentum=" + canon(c.norm_momentum) + ";norm_epsilon=" + canon(c.norm_epsilon) + ";";
  return hex64(fnv1a(s));
}

// Independent random streams per run seed.
namespace seed_stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t base_shuffle = 2;
inline constexpr std::uint64_t stream = 3;
inline constexpr std::uint64_t draws = 4;
inline constexpr std::uint64_t full_shuffle = 5;
}  // namespace seed_stream

inline std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

// ---------------------------------------------------------------------------
// Base training

struct BaseRun {
  Model model;
  MetricsLog log;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
};

inline BaseRun run_base(const ExperimentConfig& cfg, const Corpus& corpus, std::uint64_t seed) {
  Architecture arch;
  arch.image_size = corpus.base.empty() ? arch.image_size : static_cast<std::size_t>(std::sqrt(corpus.base.front().pixels.size()));
  BaseRun run{Model(arch, cfg.norm()), {}, 0.0, 0.0};
  Rng init(derive_seed(seed, seed_stream::init));
  run.model.initialize(init);
  AdamState<float> adam(run.model.parameter_count(), cfg.epoch_adam());
  Rng shuffle(derive_seed(seed, seed_stream::base_shuffle));
  const auto& val_a = corpus.validation[task_index(Task::A)];
  train_base(run.model, adam, corpus.base, TrainOptions{cfg.base_epochs, cfg.epoch_batch}, shuffle,
             [&](std::size_t epoch, double loss) {
               run.log.add({epoch, "base", seed, "all", "train", "loss", loss});
               run.log.add({epoch, "base", seed, "A", "val", "accuracy", accuracy(run.model, std::span<const Sample>(val_a))});
             });
  run.validation_accuracy = accuracy(run.model, std::span<const Sample>(val_a));
  run.test_accuracy = accuracy(run.model, std::span<const Sample>(corpus.test[task_index(Task::A)]));
  run.log.add({cfg.base_epochs, "base", seed, "A", "val", "accuracy", run.validation_accuracy});
  run.log.add({cfg.base_epochs, "base", seed, "A", "test", "accuracy", run.test_accuracy});
  if (cfg.fisher) {
    const std::size_t n = std::min(cfg.fisher_samples, corpus.base.size());
    std::vector<std::vector<float>> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      images.push_back(corpus.base[i].pixels);
      labels.push_back(corpus.base[i].label);
    }
    run.model.consolidate(fisher_diagonal(run.model, images, labels));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Continual runs

// Update counts (not positions) at which the R matrix rows are measured. A
// task's row is taken once every complete input batch ending before the end of
// its pure segment has been consumed and nothing after it has.
struct StreamCheckpoints {
  std::uint64_t after_a = 0;
  std::uint64_t after_b = 0;
  std::uint64_t final = 0;
  std::uint64_t c_start = 0;  // updates completed before any input batch can hold a task-C sample

  std::uint64_t after(Task t) const { return t == Task::A ? after_a : t == Task::B ? after_b : final; }
};

inline StreamCheckpoints stream_checkpoints(const StreamSchedule& schedule, std::size_t input_batch) {
  StreamCheckpoints c;
  c.after_a = schedule.pure_end(Task::A) / input_batch;
  c.after_b = schedule.pure_end(Task::B) / input_batch;
  c.final = schedule.total() / input_batch;  // a trailing partial input batch is dropped
  if (c.final == 0) throw ConfigError("stream is shorter than one input batch");
  c.c_start = std::min<std::uint64_t>(schedule.first_presence(Task::C) / input_batch, c.final);
  return c;
}

struct ContinualRun {
  RunSummary summary;
  std::size_t memory_size = 0;  // 0 unless the strategy is dm
  std::array<double, kTaskCount> final_validation{};
  std::array<double, kTaskCount> pre_c_validation{};  // measured after step c_start
  double task_b_drop = 0.0;         // peak B validation accuracy before task C minus final
  std::uint64_t steps_to_c80 = 0;   // updates after c_start; censored at the stream end when not reached
  bool c80_reached = false;
  StreamCheckpoints checkpoints;
  MetricsLog log;
  std::vector<ProbeRecord> probes;
  Dataset stream;
  std::optional<DynamicMemory> memory;
};

inline Dataset build_stream(const ExperimentConfig& cfg, const Corpus& corpus, std::uint64_t seed) {
  std::array<std::size_t, kTaskCount> lengths{};
  for (Task t : kTasks) lengths[task_index(t)] = corpus.continuous[task_index(t)].size();
  Rng rng(derive_seed(seed, seed_stream::stream));
  return emit_stream(corpus.continuous, StreamSchedule(lengths, cfg.ramp_fraction), rng);
}

inline void check_compatible(Strategy strategy, const Model& base) {
  if ((strategy == Strategy::ewc || strategy == Strategy::ewc_fbn) && !base.has_ewc())
    throw StrategyError("strategy " + std::string(to_string(strategy)) +
                        " needs a base checkpoint with Fisher diagonal and anchor (train-base with fisher enabled)");
  if (base.norms_frozen()) throw StrategyError("base checkpoint already has frozen normalization");
}

// Runs one seed of one strategy from a copy of the base model. `memory_size`
// only matters for dm.
inline ContinualRun run_continual(const ExperimentConfig& cfg, const Corpus& corpus, const Model& base, Strategy strategy,
                                  std::uint64_t seed, std::size_t memory_size, const std::string& config_hash) {
  check_compatible(strategy, base);
  const std::string name(to_string(strategy));
  ContinualRun run;
  run.memory_size = strategy == Strategy::dm ? memory_size : 0;
  run.summary.strategy = name;
  run.summary.seed = seed;
  run.summary.config_hash = config_hash;

  Model model = base;
  if (strategy == Strategy::ewc_fbn) model.freeze_norms();
  AdamState<float> adam(model.parameter_count(), cfg.continual_adam());
  Rng draws(derive_seed(seed, seed_stream::draws));
  if (strategy == Strategy::dm) run.memory.emplace(memory_size);
  DmOptions dm_opts{cfg.train_batch, model.default_taps(), cfg.refresh_signatures};

  std::array<std::size_t, kTaskCount> lengths{};
  for (Task t : kTasks) lengths[task_index(t)] = corpus.continuous[task_index(t)].size();
  const StreamSchedule schedule(lengths, cfg.ramp_fraction);
  run.stream = build_stream(cfg, corpus, seed);
  run.checkpoints = stream_checkpoints(schedule, cfg.input_batch);
  const auto& cp = run.checkpoints;

  RMatrix r;
  auto record_row = [&](std::size_t row, std::uint64_t step) {
    r.values[row] = task_accuracies(model, corpus.test);
    for (Task t : kTasks) run.log.add({step, name, seed, std::string(1, task_name(t)), "test", "accuracy", r.values[row][task_index(t)]});
  };
  const auto probe_steps = probe_schedule(cp.final, cfg.probe_every);
  std::size_t next_probe = 0;
  auto observe = [&](std::uint64_t step) {
    if (next_probe < probe_steps.size() && probe_steps[next_probe] == step) {
      run.probes.push_back(validation_probe(model, corpus.validation, step, name, seed, run.log));
      ++next_probe;
    }
    if (step == cp.c_start) {
      run.pre_c_validation = task_accuracies(model, corpus.validation);
      for (Task t : kTasks)
        run.log.add({step, name, seed, std::string(1, task_name(t)), "val", "pre_c_accuracy", run.pre_c_validation[task_index(t)]});
    }
    if (!run.c80_reached && step >= cp.c_start && (step - cp.c_start) % cfg.adaptation_every == 0) {
      const double acc_c = accuracy(model, std::span<const Sample>(corpus.validation[task_index(Task::C)]));
      if (acc_c >= 0.8) {
        run.steps_to_c80 = step - cp.c_start;
        run.c80_reached = true;
      }
    }
    if (step == cp.after_a) record_row(RMatrix::row_after(Task::A), step);
    if (step == cp.after_b) record_row(RMatrix::row_after(Task::B), step);
    if (step == cp.final) record_row(RMatrix::final_row(), step);
  };

  record_row(RMatrix::kBase, 0);
  observe(0);
  const std::span<const Sample> stream(run.stream);
  for (std::uint64_t step = 1; step <= cp.final; ++step) {
    const std::size_t start = (step - 1) * cfg.input_batch;
    const auto input = stream.subspan(start, cfg.input_batch);
    StepReport rep;
    switch (strategy) {
      case Strategy::naive: rep = naive_step(model, adam, input, step); break;
      case Strategy::ewc: rep = ewc_step(model, adam, input, cfg.lambda, step); break;
      case Strategy::ewc_fbn: rep = ewc_fbn_step(model, adam, input, cfg.lambda, step); break;
      case Strategy::dm: rep = dm_step(model, adam, *run.memory, input, draws, dm_opts, step); break;
    }
    run.log.add({step, name, seed, "all", "train", "loss", rep.loss});
    if (strategy == Strategy::ewc || strategy == Strategy::ewc_fbn)
      run.log.add({step, name, seed, "all", "train", "penalty", rep.penalty});
    run.log.add({step, name, seed, "all", "stream", "accuracy", rep.input_accuracy});
    if (strategy == Strategy::dm) {
      std::size_t replaced = 0;
      for (const auto& o : rep.outcomes) replaced += o.replaced();
      run.log.add({step, name, seed, "all", "stream", "misclassified", static_cast<double>(rep.misclassified)});
      run.log.add({step, name, seed, "all", "memory", "replaced", static_cast<double>(replaced)});
    }
    observe(step);
  }

  run.summary.r_matrix = r;
  run.summary.final_accuracy = r.values[RMatrix::final_row()];
  run.summary.bwt = bwt(r);
  run.summary.fwt = fwt(r);
  run.final_validation = run.probes.back().accuracy;

  double peak_b = run.pre_c_validation[task_index(Task::B)];
  for (const auto& p : run.probes)
    if (p.step <= cp.c_start) peak_b = std::max(peak_b, p.accuracy[task_index(Task::B)]);
  run.task_b_drop = peak_b - run.final_validation[task_index(Task::B)];

  if (!run.c80_reached) run.steps_to_c80 = cp.final - cp.c_start + 1;

  run.log.add({cp.final, name, seed, "all", "test", "bwt", *run.summary.bwt});
  run.log.add({cp.final, name, seed, "all", "test", "fwt", *run.summary.fwt});
  run.log.add({cp.final, name, seed, "B", "val", "drop_from_peak", run.task_b_drop});
  run.log.add({cp.final, name, seed, "C", "val", "steps_to_0.8", static_cast<double>(run.steps_to_c80)});
  return run;
}

// ---------------------------------------------------------------------------
// Full-training upper bound

struct FullRun {
  RunSummary summary;
  std::array<double, kTaskCount> final_validation{};
  MetricsLog log;
};

inline Dataset union_of_training_data(const Corpus& corpus) {
  Dataset all = corpus.base;
  for (const auto& part : corpus.continuous) all.insert(all.end(), part.begin(), part.end());
  return all;
}

inline FullRun run_full(const ExperimentConfig& cfg, const Corpus& corpus, std::uint64_t seed, const std::string& config_hash) {
  Architecture arch;
  arch.image_size = static_cast<std::size_t>(std::sqrt(corpus.base.front().pixels.size()));
  Model model(arch, cfg.norm());
  Rng init(derive_seed(seed, seed_stream::init));
  model.initialize(init);
  AdamState<float> adam(model.parameter_count(), cfg.epoch_adam());
  Rng shuffle(derive_seed(seed, seed_stream::full_shuffle));
  const Dataset all = union_of_training_data(corpus);
  FullRun run;
  run.summary.strategy = "full";
  run.summary.seed = seed;
  run.summary.config_hash = config_hash;
  train_full(model, adam, all, TrainOptions{cfg.full_epochs, cfg.epoch_batch}, shuffle, [&](std::size_t epoch, double loss) {
    run.log.add({epoch, "full", seed, "all", "train", "loss", loss});
    validation_probe(model, corpus.validation, epoch, "full", seed, run.log);
  });
  run.final_validation = task_accuracies(model, corpus.validation);
  run.summary.final_accuracy = task_accuracies(model, corpus.test);
  for (Task t : kTasks)
    run.log.add({cfg.full_epochs, "full", seed, std::string(1, task_name(t)), "test", "accuracy",
                 run.summary.final_accuracy[task_index(t)]});
  return run;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kSummarySchemaVersion = 1;

namespace detail {

inline nlohmann::json per_task(const std::array<double, kTaskCount>& v) {
  nlohmann::json j;
  for (Task t : kTasks) j[std::string(1, task_name(t))] = v[task_index(t)];
  return j;
}

inline nlohmann::json to_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}, {"n", m.count}}; }

inline nlohmann::json summary_core(const RunSummary& s) {
  nlohmann::json j;
  j["schema"] = "dmcl-run-summary";
  j["schema_version"] = kSummarySchemaVersion;
  j["strategy"] = s.strategy;
  j["seed"] = s.seed;
  j["config_hash"] = s.config_hash;
  j["final_test_accuracy"] = per_task(s.final_accuracy);
  if (s.bwt) j["bwt"] = *s.bwt;
  if (s.fwt) j["fwt"] = *s.fwt;
  if (s.r_matrix) {
    static constexpr std::array<const char*, kTaskCount + 1> rows{"base", "after_A", "after_B", "after_C"};
    nlohmann::json rm = nlohmann::json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) rm.push_back({{"checkpoint", rows[i]}, {"accuracy", per_task(s.r_matrix->values[i])}});
    j["r_matrix"] = rm;
  }
  return j;
}

}  // namespace detail

inline nlohmann::json summary_json(const ContinualRun& run) {
  auto j = detail::summary_core(run.summary);
  if (run.memory_size) j["memory"] = run.memory_size;
  j["final_validation_accuracy"] = detail::per_task(run.final_validation);
  j["checkpoint_steps"] = {{"after_A", run.checkpoints.after_a},
                           {"after_B", run.checkpoints.after_b},
                           {"after_C", run.checkpoints.final},
                           {"before_C", run.checkpoints.c_start}};
  j["task_b_drop"] = run.task_b_drop;
  j["steps_to_c80"] = run.steps_to_c80;
  j["steps_to_c80_reached"] = run.c80_reached;
  return j;
}

inline nlohmann::json summary_json(const FullRun& run) {
  auto j = detail::summary_core(run.summary);
  j["final_validation_accuracy"] = detail::per_task(run.final_validation);
  return j;
}

inline nlohmann::json aggregate_json(std::span<const ContinualRun> runs) {
  std::vector<RunSummary> summaries;
  for (const auto& r : runs) summaries.push_back(r.summary);
  const AggregateSummary agg = aggregate(summaries);
  nlohmann::json j;
  j["schema"] = "dmcl-aggregate-summary";
  j["schema_version"] = kSummarySchemaVersion;
  j["strategy"] = agg.strategy;
  j["runs"] = agg.runs;
  j["config_hash"] = runs.front().summary.config_hash;
  if (runs.front().memory_size) j["memory"] = runs.front().memory_size;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : runs) seeds.push_back(r.summary.seed);
  j["seeds"] = seeds;
  for (Task t : kTasks) j["final_test_accuracy"][std::string(1, task_name(t))] = detail::to_json(agg.final_accuracy[task_index(t)]);
  if (agg.bwt) j["bwt"] = detail::to_json(*agg.bwt);
  if (agg.fwt) j["fwt"] = detail::to_json(*agg.fwt);
  auto collect = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(get(r));
    return detail::to_json(mean_sd(v));
  };
  for (Task t : kTasks)
    j["final_validation_accuracy"][std::string(1, task_name(t))] =
        collect([&](const ContinualRun& r) { return r.final_validation[task_index(t)]; });
  j["task_b_drop"] = collect([](const ContinualRun& r) { return r.task_b_drop; });
  j["steps_to_c80"] = collect([](const ContinualRun& r) { return static_cast<double>(r.steps_to_c80); });
  return j;
}

inline nlohmann::json aggregate_json(std::span<const FullRun> runs) {
  std::vector<RunSummary> summaries;
  for (const auto& r : runs) summaries.push_back(r.summary);
  const AggregateSummary agg = aggregate(summaries);
  nlohmann::json j;
  j["schema"] = "dmcl-aggregate-summary";
  j["schema_version"] = kSummarySchemaVersion;
  j["strategy"] = "full";
  j["runs"] = agg.runs;
  j["config_hash"] = runs.front().summary.config_hash;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : runs) seeds.push_back(r.summary.seed);
  j["seeds"] = seeds;
  for (Task t : kTasks) j["final_test_accuracy"][std::string(1, task_name(t))] = detail::to_json(agg.final_accuracy[task_index(t)]);
  for (Task t : kTasks) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.final_validation[task_index(t)]);
    j["final_validation_accuracy"][std::string(1, task_name(t))] = detail::to_json(mean_sd(v));
  }
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline void write_stream_order(const std::filesystem::path& path, const Dataset& stream) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "position,sample_id,task,label\n";
  for (std::size_t i = 0; i < stream.size(); ++i)
    os << i << ',' << stream[i].id << ',' << task_name(stream[i].task) << ',' << stream[i].label << '\n';
}

// Per-run files: <tag>_metrics.csv, <tag>_summary.json, <tag>_stream.csv and,
// for dm, <tag>_memory.csv.
inline void write_run_files(const std::filesystem::path& dir, const ContinualRun& run) {
  std::filesystem::create_directories(dir);
  const std::string tag = seed_tag(run.summary.seed);
  run.log.write((dir / (tag + "_metrics.csv")).string());
  write_json(dir / (tag + "_summary.json"), summary_json(run));
  write_stream_order(dir / (tag + "_stream.csv"), run.stream);
  if (run.memory) {
    std::ofstream os(dir / (tag + "_memory.csv"), std::ios::binary);
    if (!os) throw FormatError("cannot write memory dump in " + dir.string());
    run.memory->dump(os);
  }
}

// One row per memory size with mean final validation
// accuracy per task and their average, plus mean steps to 0.8 on task C.
struct SweepRow {
  std::size_t memory = 0;
  std::array<double, kTaskCount> validation{};
  double average = 0.0;
  std::array<double, kTaskCount> test{};
  double steps_to_c80 = 0.0;
};

inline SweepRow sweep_row(std::size_t memory, std::span<const ContinualRun> runs) {
  SweepRow row;
  row.memory = memory;
  for (const auto& r : runs) {
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      row.validation[k] += r.final_validation[k];
      row.test[k] += r.summary.final_accuracy[k];
    }
    row.steps_to_c80 += static_cast<double>(r.steps_to_c80);
  }
  const double n = static_cast<double>(runs.size());
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    row.validation[k] /= n;
    row.test[k] /= n;
    row.average += row.validation[k] / static_cast<double>(kTaskCount);
  }
  row.steps_to_c80 /= n;
  return row;
}

inline void write_sweep_table(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "memory,val_A,val_B,val_C,val_average,steps_to_c80\n";
  for (const auto& r : rows)
    os << r.memory << ',' << format_value(r.validation[0]) << ',' << format_value(r.validation[1]) << ','
       << format_value(r.validation[2]) << ',' << format_value(r.average) << ',' << format_value(r.steps_to_c80) << '\n';
}

}  // namespace dmcl
