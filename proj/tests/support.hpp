#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <vector>

#include "dmcl/classifier.hpp"
#include "dmcl/evaluation.hpp"
#include "dmcl/experiment.hpp"
#include "dmcl/gradcheck.hpp"
#include "dmcl/gram.hpp"
#include "dmcl/memory.hpp"
#include "dmcl/synthetic.hpp"

namespace dmcl::testing {

inline Tensor<double> random_images(std::size_t n, std::size_t s, Rng& rng) {
  Tensor<double> t({n, 1, s, s});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

inline std::vector<std::size_t> random_coordinates(std::size_t count, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> all(limit);
  for (std::size_t i = 0; i < limit; ++i) all[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(limit - i)]);
  all.resize(count);
  return all;
}

// Analytic gradient of the mean BCE over a two-image batch against central
// differences, in double precision, at `coordinates` random parameters.
inline GradCheckResult full_model_gradcheck(std::uint64_t seed, std::size_t coordinates, NormMode mode) {
  Rng rng(seed);
  Model f;
  f.initialize(rng);
  Classifier<double> model = f.cast<double>();
  const std::size_t s = model.architecture().image_size;
  const Tensor<double> batch = random_images(2, s, rng);
  const std::vector<int> labels{0, 1};
  // Move the running statistics away from their initial values.
  model.forward(random_images(4, s, rng), NormMode::train);
  const auto analytic = bce_loss_and_grad(model, batch, labels, mode).grads;
  const auto coords = random_coordinates(coordinates, model.parameter_count(), rng);
  auto loss = [&](std::span<double>) { return bce_loss_and_grad(model, batch, labels, mode).loss; };
  return finite_diff_check(loss, model.parameters(), analytic, coords);
}

// Signature from raw per-layer maps laid out channel-major.
inline GramSignature signature_of(const std::vector<std::vector<double>>& layers, const std::vector<std::size_t>& channels,
                                  const std::vector<std::size_t>& planes) {
  GramSignature sig;
  for (std::size_t l = 0; l < layers.size(); ++l)
    sig.layers.push_back(gram_matrix<double>(layers[l], channels[l], planes[l]));
  return sig;
}

// Straightforward triple loop over channel pairs and positions.
inline std::vector<std::vector<double>> brute_force_gram(const std::vector<double>& maps, std::size_t channels,
                                                         std::size_t plane) {
  std::vector<std::vector<double>> g(channels, std::vector<double>(channels, 0.0));
  for (std::size_t i = 0; i < channels; ++i)
    for (std::size_t j = 0; j < channels; ++j) {
      for (std::size_t k = 0; k < plane; ++k) g[i][j] += maps[i * plane + k] * maps[j * plane + k];
      g[i][j] /= static_cast<double>(channels * plane);
    }
  return g;
}

inline double brute_force_distance(const GramSignature& a, const GramSignature& b) {
  double total = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const std::size_t n = a.layers[l].n;
    double layer = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double d = a.layers[l](i, j) - b.layers[l](i, j);
        layer += d * d;
      }
    total += layer / static_cast<double>(n * n);
  }
  return total;
}

// Two small layers of values on a coarse grid, so equal distances are common.
inline GramSignature random_signature(Rng& rng, std::size_t levels = 3) {
  GramSignature sig;
  for (std::size_t n : {2u, 3u}) {
    GramMatrix g{n, std::vector<double>(n * n)};
    for (double& v : g.values) v = static_cast<double>(rng.below(levels));
    sig.layers.push_back(std::move(g));
  }
  return sig;
}

struct MemoryOracleReport {
  std::size_t insertions = 0;
  std::size_t replacements = 0;
  std::size_t ties = 0;  // replacements where several items shared the minimum
  std::size_t index_mismatches = 0;
  std::size_t invariant_violations = 0;
};

// Streams random samples into memories of random capacity (at most
// `max_capacity`) and compares every replacement with an exhaustive scan that
// picks the minimum distance and, among equals, the lowest index.
inline MemoryOracleReport memory_oracle(std::uint64_t seed, std::size_t insertions, std::size_t max_capacity = 160) {
  Rng rng(seed);
  MemoryOracleReport report;
  while (report.insertions < insertions) {
    DynamicMemory memory(2 + rng.below(max_capacity - 1));
    const std::size_t run = std::min<std::size_t>(insertions - report.insertions, 3 * memory.capacity() + rng.below(50));
    for (std::size_t i = 0; i < run; ++i, ++report.insertions) {
      Sample s;
      s.id = report.insertions;
      s.label = static_cast<int>(rng.below(2));
      s.task = kTasks[rng.below(3)];
      GramSignature sig = random_signature(rng);
      std::size_t expected = memory.size();
      double best = 0.0;
      std::size_t at_best = 0;
      for (std::size_t j = 0; j < memory.size(); ++j) {
        if (memory[j].sample.label != s.label) continue;
        const double d = brute_force_distance(sig, memory[j].signature);
        if (expected == memory.size() || d < best) {
          expected = j;
          best = d;
          at_best = 1;
        } else if (d == best) {
          ++at_best;
        }
      }
      const bool full = memory.class_count(s.label) >= memory.quota(s.label);
      const auto outcome = memory.insert(s, std::move(sig), i);
      if (full) {
        ++report.replacements;
        if (at_best > 1) ++report.ties;
        if (!outcome.replaced() || outcome.index != expected) ++report.index_mismatches;
      } else if (outcome.replaced() || outcome.index + 1 != memory.size()) {
        ++report.index_mismatches;
      }
      std::size_t count[2] = {0, 0};
      for (const auto& item : memory.items()) ++count[item.sample.label];
      if (memory.size() > memory.capacity() || count[0] > memory.capacity() / 2 || count[1] > memory.capacity() / 2 ||
          count[0] != memory.class_count(0) || count[1] != memory.class_count(1))
        ++report.invariant_violations;
    }
  }
  return report;
}

// Cell-by-cell recomputation of transfer metrics from the R matrix rows
// (base, after A, after B, final) and columns (A, B, C).
inline double oracle_bwt(const RMatrix& r) {
  const auto& v = r.values;
  return ((v[3][0] - v[1][0]) + (v[3][1] - v[2][1])) / 2.0;
}

inline double oracle_fwt(const RMatrix& r) {
  const auto& v = r.values;
  return ((v[1][1] - v[0][1]) + (v[2][2] - v[0][2])) / 2.0;
}

inline RMatrix random_r_matrix(Rng& rng) {
  RMatrix r;
  for (auto& row : r.values)
    for (double& x : row) x = static_cast<double>(rng.below(151)) / 150.0;
  return r;
}

inline CorpusCounts small_counts() {
  CorpusCounts c;
  c.base = 48;
  c.continuous = {64, 48, 64};
  c.validation = 24;
  c.test = 24;
  return c;
}

inline ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.seeds = 2;
  cfg.base_epochs = 2;
  cfg.full_epochs = 1;
  cfg.fisher_samples = 16;
  cfg.probe_every = 5;
  return cfg;
}

}  // namespace dmcl::testing
