#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmcl/classifier.hpp"
#include "dmcl/synthetic.hpp"

namespace dmcl {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inference-mode logits for a dataset, computed in chunks.
template <typename T>
std::vector<T> dataset_logits(Classifier<T>& model, std::span<const Sample> data, std::size_t chunk = 64) {
  std::vector<T> logits;
  logits.reserve(data.size());
  const std::size_t s = model.architecture().image_size;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    auto fwd = model.forward(to_batch<T>(data.subspan(start, n), s), Pass::inference);
    logits.insert(logits.end(), fwd.logits.begin(), fwd.logits.end());
  }
  return logits;
}

inline double accuracy_from_predictions(std::span<const int> predicted, std::span<const int> truth) {
  if (truth.empty()) throw EvaluationError("accuracy of an empty dataset is undefined");
  if (predicted.size() != truth.size()) throw EvaluationError("prediction/label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

template <typename T>
double accuracy(Classifier<T>& model, std::span<const Sample> data) {
  if (data.empty()) throw EvaluationError("accuracy of an empty dataset is undefined");
  const auto logits = dataset_logits(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += predict_label(logits[i]) == data[i].label;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
std::array<double, kTaskCount> task_accuracies(Classifier<T>& model, const std::array<Dataset, kTaskCount>& sets) {
  std::array<double, kTaskCount> acc{};
  for (Task t : kTasks) acc[task_index(t)] = accuracy(model, std::span<const Sample>(sets[task_index(t)]));
  return acc;
}

// Rows: checkpoints {base, after A, after B, after C}; columns: tasks A, B, C.
struct RMatrix {
  static constexpr std::size_t kBase = 0;
  std::array<std::array<double, kTaskCount>, kTaskCount + 1> values{};

  // Row holding accuracies measured at the end of `task`'s pure segment.
  static constexpr std::size_t row_after(Task t) { return static_cast<std::size_t>(t) + 1; }
  static constexpr std::size_t final_row() { return kTaskCount; }

  double& at(std::size_t row, Task col) { return values.at(row)[task_index(col)]; }
  double at(std::size_t row, Task col) const { return values.at(row)[task_index(col)]; }
};

// BWT = 1/(K-1) * sum_{i<K} (R[final, i] - R[after i, i]).
inline double bwt(const RMatrix& r) {
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < kTaskCount; ++i) {
    const Task t = kTasks[i];
    sum += r.at(RMatrix::final_row(), t) - r.at(RMatrix::row_after(t), t);
  }
  return sum / static_cast<double>(kTaskCount - 1);
}

// FWT = 1/(K-1) * sum_{i>1} (R[after i-1, i] - baseline_i), the baseline being
// the base model's accuracy on task i.
inline double fwt(const RMatrix& r, const std::array<double, kTaskCount>& baseline) {
  double sum = 0.0;
  for (std::size_t i = 1; i < kTaskCount; ++i)
    sum += r.at(RMatrix::row_after(kTasks[i - 1]), kTasks[i]) - baseline[i];
  return sum / static_cast<double>(kTaskCount - 1);
}

inline double fwt(const RMatrix& r) { return fwt(r, r.values[RMatrix::kBase]); }

// ---------------------------------------------------------------------------
// Metrics log

inline std::string format_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct MetricRow {
  std::uint64_t step = 0;
  std::string strategy;
  std::uint64_t seed = 0;
  std::string task;    // "A", "B", "C" or "all"
  std::string split;   // "val", "test", "train", "stream"
  std::string metric;
  double value = 0.0;
};

class MetricsLog {
 public:
  static constexpr const char* kHeader = "step,strategy,seed,task,split,metric,value";

  void add(MetricRow row) { rows_.push_back(std::move(row)); }
  const std::vector<MetricRow>& rows() const noexcept { return rows_; }

  void write(std::ostream& os) const {
    os << kHeader << '\n';
    for (const auto& r : rows_)
      os << r.step << ',' << r.strategy << ',' << r.seed << ',' << r.task << ',' << r.split << ',' << r.metric << ','
         << format_value(r.value) << '\n';
  }

  void write(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw EvaluationError("cannot write metrics file " + path);
    write(os);
  }

 private:
  std::vector<MetricRow> rows_;
};

// Steps at which validation is probed in a run of `total_steps` updates:
// step 0, every multiple of `every`, and the final step.
inline std::vector<std::uint64_t> probe_schedule(std::uint64_t total_steps, std::uint64_t every) {
  if (every == 0) throw std::invalid_argument("probe cadence must be positive");
  std::vector<std::uint64_t> steps{0};
  for (std::uint64_t s = every; s <= total_steps; s += every) steps.push_back(s);
  if (steps.back() != total_steps) steps.push_back(total_steps);
  return steps;
}

struct ProbeRecord {
  std::uint64_t step = 0;
  std::array<double, kTaskCount> accuracy{};
};

// Appends one validation accuracy row per task. Inference mode only, so the
// model's parameters and running statistics are untouched.
template <typename T>
ProbeRecord validation_probe(Classifier<T>& model, const std::array<Dataset, kTaskCount>& validation,
                             std::uint64_t step, const std::string& strategy, std::uint64_t seed, MetricsLog& log) {
  ProbeRecord rec{step, task_accuracies(model, validation)};
  for (Task t : kTasks)
    log.add({step, strategy, seed, std::string(1, task_name(t)), "val", "accuracy", rec.accuracy[task_index(t)]});
  return rec;
}

// ---------------------------------------------------------------------------
// Run summaries

struct RunSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::array<double, kTaskCount> final_accuracy{};
  std::optional<double> bwt;
  std::optional<double> fwt;
  std::optional<RMatrix> r_matrix;
};

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single run
  std::size_t count = 0;
};

inline MeanSd mean_sd(std::span<const double> values) {
  MeanSd out;
  out.count = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return out;
}

struct AggregateSummary {
  std::string strategy;
  std::size_t runs = 0;
  std::array<MeanSd, kTaskCount> final_accuracy{};
  std::optional<MeanSd> bwt;
  std::optional<MeanSd> fwt;
};

inline AggregateSummary aggregate(std::span<const RunSummary> runs) {
  if (runs.empty()) throw EvaluationError("cannot aggregate zero runs");
  AggregateSummary agg;
  agg.strategy = runs.front().strategy;
  agg.runs = runs.size();
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.final_accuracy[k]);
    agg.final_accuracy[k] = mean_sd(v);
  }
  auto collect = [&](auto member) -> std::optional<MeanSd> {
    std::vector<double> v;
    for (const auto& r : runs) {
      if (!(r.*member)) return std::nullopt;
      v.push_back(*(r.*member));
    }
    return mean_sd(v);
  };
  agg.bwt = collect(&RunSummary::bwt);
  agg.fwt = collect(&RunSummary::fwt);
  return agg;
}

}  // namespace dmcl
