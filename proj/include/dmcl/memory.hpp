#pragma once

// Fixed-size rehearsal memory with class quotas and gram-distance replacement.
//
// While a class is below its quota, incoming samples of that class are
// appended. Afterwards a sample replaces the stored item of the same class
// whose gram signature is closest to its own; ties go to the lowest index.

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "dmcl/gram.hpp"
#include "dmcl/random.hpp"
#include "dmcl/synthetic.hpp"

namespace dmcl {

struct MemoryItem {
  Sample sample;
  GramSignature signature;
  std::uint64_t inserted_at = 0;  // stream step of insertion
  double replaced_distance = std::numeric_limits<double>::quiet_NaN();  // NaN when appended
};

struct InsertOutcome {
  enum class Kind { appended, replaced };
  Kind kind = Kind::appended;
  std::size_t index = 0;
  double distance = 0.0;  // only meaningful for replacements

  bool replaced() const noexcept { return kind == Kind::replaced; }
};

class MemoryError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DynamicMemory {
 public:
  static constexpr std::size_t kClasses = 2;

  explicit DynamicMemory(std::size_t capacity) : capacity_(capacity), quota_(capacity / kClasses) {
    if (capacity < kClasses) throw std::invalid_argument("memory capacity must be at least 2");
    items_.reserve(capacity);
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t quota(int /*label*/) const noexcept { return quota_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const std::vector<MemoryItem>& items() const noexcept { return items_; }
  const MemoryItem& operator[](std::size_t i) const { return items_.at(i); }

  std::size_t class_count(int label) const { return counts_.at(check_label(label)); }

  // Index of the same-class item closest to `signature`, lowest index on ties.
  std::size_t argmin_replacement_index(int label, const GramSignature& signature) const {
    check_label(label);
    std::size_t best = items_.size();
    double best_distance = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < items_.size(); ++j) {
      if (items_[j].sample.label != label) continue;
      const double d = gram_distance(signature, items_[j].signature);
      if (best == items_.size() || d < best_distance) {
        best = j;
        best_distance = d;
      }
    }
    if (best == items_.size()) throw MemoryError("no stored item of class " + std::to_string(label) + " to replace");
    return best;
  }

  InsertOutcome insert(const Sample& sample, GramSignature signature, std::uint64_t step = 0) {
    const std::size_t label = check_label(sample.label);
    if (counts_[label] < quota_) {
      items_.push_back({sample, std::move(signature), step});
      ++counts_[label];
      return {InsertOutcome::Kind::appended, items_.size() - 1, 0.0};
    }
    const std::size_t index = argmin_replacement_index(sample.label, signature);
    const double distance = gram_distance(signature, items_[index].signature);
    items_[index] = {sample, std::move(signature), step, distance};
    return {InsertOutcome::Kind::replaced, index, distance};
  }

  // Uniform draw of min(k, size) distinct item indices.
  std::vector<std::size_t> draw_indices(std::size_t k, Rng& rng) const {
    std::vector<std::size_t> idx(items_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t take = std::min(k, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(take);
    return idx;
  }

  std::vector<const Sample*> draw_rehearsal(std::size_t k, Rng& rng) const {
    std::vector<const Sample*> out;
    for (std::size_t i : draw_indices(k, rng)) out.push_back(&items_[i].sample);
    return out;
  }

  // Recomputes every stored signature under the given model.
  template <typename T>
  void refresh_signatures(Classifier<T>& model, const TapSpec& taps, std::size_t chunk = 64) {
    const std::size_t s = model.architecture().image_size;
    for (std::size_t start = 0; start < items_.size(); start += chunk) {
      const std::size_t end = std::min(items_.size(), start + chunk);
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&items_[i].sample);
      auto sigs = signatures(model, to_batch<T>(std::span<const Sample* const>(batch), s), taps);
      for (std::size_t i = start; i < end; ++i) items_[i].signature = std::move(sigs[i - start]);
    }
  }

  // Diagnostic dump: one line per item,
  // "index,inserted_at,label,task,sample_id,replaced_distance".
  void dump(std::ostream& os) const {
    os << "index,inserted_at,label,task,sample_id,replaced_distance\n";
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const MemoryItem& it = items_[i];
      os << i << ',' << it.inserted_at << ',' << it.sample.label << ',' << task_name(it.sample.task) << ','
         << it.sample.id << ',';
      if (std::isnan(it.replaced_distance)) os << "fill";
      else {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", it.replaced_distance);
        os << buf;
      }
      os << '\n';
    }
  }

  std::array<std::size_t, kTaskCount> task_histogram() const {
    std::array<std::size_t, kTaskCount> h{};
    for (const auto& it : items_) ++h[task_index(it.sample.task)];
    return h;
  }

 private:
  static std::size_t check_label(int label) {
    if (label != 0 && label != 1) throw std::invalid_argument("memory labels must be 0 or 1");
    return static_cast<std::size_t>(label);
  }

  std::size_t capacity_;
  std::size_t quota_;
  std::vector<MemoryItem> items_;
  std::array<std::size_t, kClasses> counts_{};
};

}  // namespace dmcl
