#pragma once

// Synthetic three-task image corpus and the gradually shifting stream built
// from it. Task A is smooth images with dark targets, task B swaps in the
// sharp modality, task C flips the target to bright. Labels mark whether a
// plus-shaped target was imprinted.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmcl/random.hpp"
#include "dmcl/tensor.hpp"

namespace dmcl {

enum class Task : std::uint8_t { A = 0, B = 1, C = 2 };
inline constexpr std::array<Task, 3> kTasks{Task::A, Task::B, Task::C};
inline constexpr std::size_t kTaskCount = 3;

inline char task_name(Task t) { return static_cast<char>('A' + static_cast<int>(t)); }
inline std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }

enum class Modality : std::uint8_t { smooth, sharp };
enum class Polarity : std::uint8_t { low, high };

struct TaskSpec {
  Task task;
  Modality modality;
  Polarity polarity;
  double prevalence = 0.5;
};

inline constexpr TaskSpec task_spec(Task t) {
  switch (t) {
    case Task::A: return {Task::A, Modality::smooth, Polarity::low};
    case Task::B: return {Task::B, Modality::sharp, Polarity::low};
    case Task::C: return {Task::C, Modality::sharp, Polarity::high};
  }
  return {Task::A, Modality::smooth, Polarity::low};
}

struct Sample {
  std::uint64_t id = 0;
  Task task = Task::A;
  int label = 0;
  std::vector<float> pixels;  // S*S, row-major, values in [0, 1]
};

using Dataset = std::vector<Sample>;

class GeneratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeneratorConfig {
  std::size_t image_size = 32;
  double base_level = 0.5;
  double texture_contrast = 0.12;
  double smooth_blur = 3.0;   // gaussian sigma, pixels
  double smooth_noise = 0.02;
  double sharp_blur = 1.0;
  double sharp_noise = 0.05;
  double offset_min = 0.3;
  double offset_max = 0.5;
  double scale_min = 0.75;
  double scale_max = 1.5;
  std::size_t sprite_size = 7;
  std::size_t sprite_arm = 3;  // arm thickness of the plus

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct CorpusCounts {
  std::size_t base = 600;                                    // task A only
  std::array<std::size_t, kTaskCount> continuous{600, 400, 950};
  std::size_t validation = 150;                              // per task
  std::size_t test = 150;                                    // per task

  friend bool operator==(const CorpusCounts&, const CorpusCounts&) = default;
};

// Binary plus-shaped mask, sprite_size x sprite_size.
inline std::vector<std::uint8_t> plus_sprite(std::size_t size, std::size_t arm) {
  if (arm == 0 || arm > size || (size - arm) % 2 != 0) throw GeneratorError("plus sprite: arm must center inside sprite");
  std::vector<std::uint8_t> mask(size * size, 0);
  const std::size_t lo = (size - arm) / 2, hi = lo + arm;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      mask[y * size + x] = ((y >= lo && y < hi) || (x >= lo && x < hi)) ? 1 : 0;
  return mask;
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable circular blur.
inline std::vector<double> blur(const std::vector<double>& img, std::size_t s, const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  const int n = static_cast<int>(s);
  std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * img[y * n + ((x + d) % n + n) % n];
      tmp[y * n + x] = acc;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp[(((y + d) % n + n) % n) * n + x];
      out[y * n + x] = acc;
    }
  return out;
}

// Standard deviation of unit white noise after the separable blur: the 2-D
// kernel is k_i k_j, so the variance is (sum k^2)^2.
inline double blurred_noise_std(const std::vector<double>& k) {
  double sq = 0.0;
  for (double v : k) sq += v * v;
  return sq;
}

}  // namespace detail

// Correlated-noise background. Both modalities share the recipe; the sharp
// one uses a narrower blur and stronger pixel noise.
inline std::vector<float> generate_background(Modality modality, const GeneratorConfig& cfg, Rng& rng) {
  const std::size_t s = cfg.image_size;
  if (s == 0) throw GeneratorError("image size must be positive");
  std::vector<double> white(s * s);
  for (double& v : white) v = rng.normal();
  const double sigma = modality == Modality::smooth ? cfg.smooth_blur : cfg.sharp_blur;
  const double noise = modality == Modality::smooth ? cfg.smooth_noise : cfg.sharp_noise;
  const auto kernel = detail::gaussian_kernel(sigma);
  const auto texture = detail::blur(white, s, kernel);
  const double scale = cfg.texture_contrast / detail::blurred_noise_std(kernel);
  std::vector<float> img(s * s);
  for (std::size_t i = 0; i < s * s; ++i) {
    const double v = cfg.base_level + scale * texture[i] + noise * rng.normal();
    img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return img;
}

struct ImprintInfo {
  double angle = 0.0;
  double scale = 1.0;
  double center_x = 0.0, center_y = 0.0;
  double offset = 0.0;  // signed intensity change
  std::vector<std::uint8_t> footprint;  // S*S mask of touched pixels
};

// Stamps the rotated, scaled sprite at a random fully contained position and
// shifts the covered pixels by +u (high) or -u (low), clamped to [0, 1].
inline ImprintInfo imprint_target(std::vector<float>& image, Polarity polarity, const GeneratorConfig& cfg, Rng& rng) {
  const std::size_t s = cfg.image_size;
  if (image.size() != s * s) throw GeneratorError("imprint_target: image size mismatch");
  const auto mask = plus_sprite(cfg.sprite_size, cfg.sprite_arm);
  const double half = 0.5 * static_cast<double>(cfg.sprite_size);
  const double reach = half * cfg.scale_max * std::numbers::sqrt2;
  if (2.0 * reach > static_cast<double>(s)) throw GeneratorError("imprint_target: sprite cannot fit inside the image");

  ImprintInfo info;
  info.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  info.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double r = half * info.scale * std::numbers::sqrt2;
  info.center_x = rng.uniform(r, static_cast<double>(s) - r);
  info.center_y = rng.uniform(r, static_cast<double>(s) - r);
  const double u = rng.uniform(cfg.offset_min, cfg.offset_max);
  info.offset = polarity == Polarity::high ? u : -u;
  info.footprint.assign(s * s, 0);

  const double c = std::cos(info.angle), sn = std::sin(info.angle);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - info.center_x;
      const double dy = static_cast<double>(y) + 0.5 - info.center_y;
      const double su = (c * dx + sn * dy) / info.scale + half;
      const double sv = (-sn * dx + c * dy) / info.scale + half;
      if (su < 0.0 || sv < 0.0 || su >= 2.0 * half || sv >= 2.0 * half) continue;
      const auto mx = static_cast<std::size_t>(su), my = static_cast<std::size_t>(sv);
      if (!mask[my * cfg.sprite_size + mx]) continue;
      float& px = image[y * s + x];
      px = static_cast<float>(std::clamp(static_cast<double>(px) + info.offset, 0.0, 1.0));
      info.footprint[y * s + x] = 1;
    }
  return info;
}

inline Sample generate_sample(Task task, int label, std::uint64_t id, const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, id));
  const TaskSpec spec = task_spec(task);
  Sample sample{id, task, label, generate_background(spec.modality, cfg, rng)};
  if (label) imprint_target(sample.pixels, spec.polarity, cfg, rng);
  return sample;
}

struct Corpus {
  Dataset base;
  std::array<Dataset, kTaskCount> continuous;
  std::array<Dataset, kTaskCount> validation;
  std::array<Dataset, kTaskCount> test;
};

inline void validate(const CorpusCounts& counts) {
  auto check = [](std::size_t n, const char* what) {
    if (n == 0 || n % 2 != 0) throw GeneratorError(std::string(what) + " count must be positive and even for 50/50 labels");
  };
  check(counts.base, "base");
  for (std::size_t n : counts.continuous) check(n, "continuous");
  check(counts.validation, "validation");
  check(counts.test, "test");
}

// Each split/task holds exactly half positives. Sample ids are assigned
// sequentially, so they are unique across the whole corpus.
inline Corpus build_corpus(const GeneratorConfig& cfg, const CorpusCounts& counts, std::uint64_t seed) {
  validate(counts);
  std::uint64_t next_id = 0;
  std::uint64_t group = 0;
  auto make = [&](Task task, std::size_t n) {
    std::vector<int> labels(n, 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n / 2), 1);
    Rng order(derive_seed(seed, 0xC0FFEEull + group++));
    order.shuffle(labels);
    Dataset d;
    d.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.push_back(generate_sample(task, labels[i], next_id++, cfg, seed));
    return d;
  };
  Corpus corpus;
  corpus.base = make(Task::A, counts.base);
  for (Task t : kTasks) corpus.continuous[task_index(t)] = make(t, counts.continuous[task_index(t)]);
  for (Task t : kTasks) corpus.validation[task_index(t)] = make(t, counts.validation);
  for (Task t : kTasks) corpus.test[task_index(t)] = make(t, counts.test);
  return corpus;
}

// Three consecutive task segments joined by linear ramps. The ramp between
// segments k and k+1 is centred on their boundary and spans
// ramp_fraction * (len_k + len_{k+1}) / 2 positions.
class StreamSchedule {
 public:
  StreamSchedule(std::array<std::size_t, kTaskCount> lengths, double ramp_fraction = 0.15)
      : lengths_(lengths), ramp_fraction_(ramp_fraction) {
    if (ramp_fraction < 0.0 || ramp_fraction > 1.0) throw GeneratorError("ramp fraction must lie in [0, 1]");
    double boundary = 0.0;
    for (std::size_t k = 0; k + 1 < kTaskCount; ++k) {
      boundary += static_cast<double>(lengths_[k]);
      const double width = ramp_fraction_ * 0.5 * static_cast<double>(lengths_[k] + lengths_[k + 1]);
      ramp_start_[k] = boundary - 0.5 * width;
      ramp_width_[k] = width;
    }
    if (ramp_start_[0] < 0.0 || ramp_start_[0] + ramp_width_[0] > ramp_start_[1] ||
        ramp_start_[1] + ramp_width_[1] > static_cast<double>(total()))
      throw GeneratorError("stream ramps overlap; pure segments would vanish");
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (auto l : lengths_) n += l;
    return n;
  }
  const std::array<std::size_t, kTaskCount>& lengths() const { return lengths_; }
  double ramp_fraction() const { return ramp_fraction_; }

  // Mixture weights at a stream position; they are non-negative and sum to 1.
  std::array<double, kTaskCount> weights(std::size_t position) const {
    const double x = static_cast<double>(position) + 0.5;
    const double t1 = ramp_progress(0, x), t2 = ramp_progress(1, x);
    return {1.0 - t1, t1 * (1.0 - t2), t2};
  }

  // One past the last position where the task's weight is exactly 1.
  std::size_t pure_end(Task task) const {
    std::size_t end = 0;
    for (std::size_t p = 0; p < total(); ++p)
      if (weights(p)[task_index(task)] == 1.0) end = p + 1;
    return end;
  }
  // First position where the task's weight is exactly 1.
  std::size_t pure_begin(Task task) const {
    for (std::size_t p = 0; p < total(); ++p)
      if (weights(p)[task_index(task)] == 1.0) return p;
    return total();
  }
  // First position where the task's weight is positive.
  std::size_t first_presence(Task task) const {
    for (std::size_t p = 0; p < total(); ++p)
      if (weights(p)[task_index(task)] > 0.0) return p;
    return total();
  }

 private:
  double ramp_progress(std::size_t k, double x) const {
    if (ramp_width_[k] <= 0.0) return x >= ramp_start_[k] ? 1.0 : 0.0;
    return std::clamp((x - ramp_start_[k]) / ramp_width_[k], 0.0, 1.0);
  }

  std::array<std::size_t, kTaskCount> lengths_;
  double ramp_fraction_;
  std::array<double, kTaskCount - 1> ramp_start_{};
  std::array<double, kTaskCount - 1> ramp_width_{};
};

// Orders the continuous samples into a stream. Each position draws a task
// from the schedule's mixture (restricted to tasks with samples left) and
// takes that task's next sample; every sample is emitted exactly once.
inline Dataset emit_stream(const std::array<Dataset, kTaskCount>& continuous, const StreamSchedule& schedule, Rng& rng) {
  for (Task t : kTasks)
    if (continuous[task_index(t)].size() != schedule.lengths()[task_index(t)])
      throw GeneratorError(std::string("stream schedule expects ") +
                           std::to_string(schedule.lengths()[task_index(t)]) + " samples of task " + task_name(t) +
                           ", corpus has " + std::to_string(continuous[task_index(t)].size()));
  std::array<std::vector<std::size_t>, kTaskCount> order;
  for (Task t : kTasks) {
    auto& o = order[task_index(t)];
    o.resize(continuous[task_index(t)].size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = i;
    rng.shuffle(o);
  }
  std::array<std::size_t, kTaskCount> cursor{};
  Dataset stream;
  stream.reserve(schedule.total());
  for (std::size_t p = 0; p < schedule.total(); ++p) {
    auto w = schedule.weights(p);
    double mass = 0.0;
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      if (cursor[k] >= order[k].size()) w[k] = 0.0;
      mass += w[k];
    }
    if (mass <= 0.0) {  // mixture tasks exhausted; fall back to any remaining
      for (std::size_t k = 0; k < kTaskCount; ++k) w[k] = cursor[k] < order[k].size() ? 1.0 : 0.0;
      mass = w[0] + w[1] + w[2];
    }
    const double u = rng.uniform() * mass;
    std::size_t pick = 0;
    double acc = 0.0;
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      if (w[k] <= 0.0) continue;
      pick = k;
      acc += w[k];
      if (u < acc) break;
    }
    stream.push_back(continuous[pick][order[pick][cursor[pick]++]]);
  }
  return stream;
}

// Stacks samples into an N x 1 x S x S batch.
template <typename T = float>
Tensor<T> to_batch(std::span<const Sample> samples, std::size_t image_size) {
  if (samples.empty()) throw std::invalid_argument("to_batch: no samples");
  Tensor<T> batch({samples.size(), 1, image_size, image_size});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].pixels.size() != image_size * image_size)
      throw ShapeError("sample pixels", Shape{image_size, image_size}, Shape{samples[n].pixels.size()});
    std::copy(samples[n].pixels.begin(), samples[n].pixels.end(), batch.data() + n * image_size * image_size);
  }
  return batch;
}

template <typename T = float>
Tensor<T> to_batch(std::span<const Sample* const> samples, std::size_t image_size) {
  if (samples.empty()) throw std::invalid_argument("to_batch: no samples");
  Tensor<T> batch({samples.size(), 1, image_size, image_size});
  for (std::size_t n = 0; n < samples.size(); ++n)
    std::copy(samples[n]->pixels.begin(), samples[n]->pixels.end(), batch.data() + n * image_size * image_size);
  return batch;
}

}  // namespace dmcl
