#pragma once

// Update rules for continual training over a sample stream, plus the
// conventional epoch-based trainers used for the base and upper-bound models.

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dmcl/adam.hpp"
#include "dmcl/classifier.hpp"
#include "dmcl/gram.hpp"
#include "dmcl/memory.hpp"
#include "dmcl/random.hpp"
#include "dmcl/synthetic.hpp"

namespace dmcl {

enum class Strategy { naive, ewc, ewc_fbn, dm };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::naive: return "naive";
    case Strategy::ewc: return "ewc";
    case Strategy::ewc_fbn: return "ewc-fbn";
    case Strategy::dm: return "dm";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::naive, Strategy::ewc, Strategy::ewc_fbn, Strategy::dm})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "' (naive, ewc, ewc-fbn, dm)");
}

class StrategyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepReport {
  std::uint64_t step = 0;
  std::size_t input_size = 0;
  std::size_t misclassified = 0;     // input samples the model got wrong before the update
  std::size_t drawn = 0;             // rehearsal samples added from memory
  std::size_t train_size = 0;
  double loss = 0.0;                 // mean BCE over the training batch
  double penalty = 0.0;              // EWC term, 0 otherwise
  double input_accuracy = 0.0;       // on the input batch, before the update
  std::vector<InsertOutcome> outcomes;
  std::vector<std::uint64_t> train_ids;
};

struct UpdateResult {
  double loss = 0.0;
  double penalty = 0.0;
  std::vector<float> logits;
};

// One update-pass forward/backward and one Adam step on `batch`. With
// `lambda` set, the EWC penalty is added to the objective.
inline UpdateResult apply_update(Model& model, AdamState<float>& adam, std::span<const Sample* const> batch,
                                 std::optional<double> lambda = std::nullopt) {
  if (batch.empty()) throw StrategyError("training batch is empty");
  std::vector<int> labels;
  for (const Sample* s : batch) labels.push_back(s->label);
  auto lg = bce_loss_and_grad(model, to_batch<float>(batch, model.architecture().image_size), labels,
                              model.mode_for(Pass::update));
  UpdateResult out{lg.loss, 0.0, std::move(lg.logits)};
  if (lambda) out.penalty = model.ewc_penalty(*lambda, lg.grads);
  const auto mask = model.frozen_mask();
  adam_step<float>(model.parameters(), lg.grads, adam, mask);
  model.mark_updated();
  return out;
}

inline std::vector<const Sample*> pointers(std::span<const Sample> samples) {
  std::vector<const Sample*> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(&s);
  return out;
}

namespace detail {

inline StepReport plain_step(Model& model, AdamState<float>& adam, std::span<const Sample> input,
                             std::optional<double> lambda, std::uint64_t step) {
  if (input.empty()) throw StrategyError("input batch is empty");
  const auto batch = pointers(input);
  auto upd = apply_update(model, adam, batch, lambda);
  StepReport rep;
  rep.step = step;
  rep.input_size = rep.train_size = input.size();
  rep.loss = upd.loss;
  rep.penalty = upd.penalty;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < input.size(); ++i) correct += predict_label(upd.logits[i]) == input[i].label;
  rep.misclassified = input.size() - correct;
  rep.input_accuracy = static_cast<double>(correct) / static_cast<double>(input.size());
  for (const Sample& s : input) rep.train_ids.push_back(s.id);
  return rep;
}

}  // namespace detail

// Sequential training on the raw input batch.
inline StepReport naive_step(Model& model, AdamState<float>& adam, std::span<const Sample> input,
                             std::uint64_t step = 0) {
  return detail::plain_step(model, adam, input, std::nullopt, step);
}

// Input batch plus the quadratic Fisher-weighted penalty. Normalization keeps
// adapting its running statistics to the stream.
inline StepReport ewc_step(Model& model, AdamState<float>& adam, std::span<const Sample> input, double lambda,
                           std::uint64_t step = 0) {
  if (!model.has_ewc()) throw StrategyError("ewc step requires a Fisher diagonal and anchor in the model");
  if (model.norms_frozen()) throw StrategyError("ewc step expects adaptive normalization; use ewc-fbn for frozen norms");
  return detail::plain_step(model, adam, input, lambda, step);
}

// As ewc_step, with normalization statistics and affine parameters frozen.
inline StepReport ewc_fbn_step(Model& model, AdamState<float>& adam, std::span<const Sample> input, double lambda,
                               std::uint64_t step = 0) {
  if (!model.has_ewc()) throw StrategyError("ewc-fbn step requires a Fisher diagonal and anchor in the model");
  if (!model.norms_frozen()) throw StrategyError("ewc-fbn step requires frozen normalization layers");
  return detail::plain_step(model, adam, input, lambda, step);
}

struct DmOptions {
  std::size_t train_batch = 8;
  TapSpec taps;
  bool refresh_signatures = false;
};

// Dynamic-memory step:
//  1. one inference pass over the input batch gives predictions and signatures;
//  2. every input sample is inserted into memory, in order;
//  3. the training batch is the misclassified inputs topped up with uniform
//     draws from memory;
//  4. one update on that batch.
inline StepReport dm_step(Model& model, AdamState<float>& adam, DynamicMemory& memory, std::span<const Sample> input,
                          Rng& rng, const DmOptions& opts, std::uint64_t step = 0) {
  if (input.empty()) throw StrategyError("input batch is empty");
  if (input.size() > opts.train_batch)
    throw StrategyError("input batch (" + std::to_string(input.size()) + ") larger than training batch (" +
                        std::to_string(opts.train_batch) + ")");
  const std::size_t s = model.architecture().image_size;
  const TapSpec taps = opts.taps.blocks.empty() ? model.default_taps() : opts.taps;

  auto fwd = model.forward(to_batch<float>(input, s), Pass::inference);
  auto sigs = signatures_from_taps(fwd.taps, taps, model.version());

  if (opts.refresh_signatures) memory.refresh_signatures(model, taps);

  StepReport rep;
  rep.step = step;
  rep.input_size = input.size();
  std::vector<const Sample*> train;
  for (std::size_t i = 0; i < input.size(); ++i)
    if (predict_label(fwd.logits[i]) != input[i].label) train.push_back(&input[i]);
  rep.misclassified = train.size();
  rep.input_accuracy = 1.0 - static_cast<double>(rep.misclassified) / static_cast<double>(input.size());
  if (train.size() > opts.train_batch) throw StrategyError("more misclassified samples than training slots");

  for (std::size_t i = 0; i < input.size(); ++i) rep.outcomes.push_back(memory.insert(input[i], std::move(sigs[i]), step));

  // Draws reference memory items; the memory is not touched again until the
  // update below has consumed them.
  const auto drawn = memory.draw_rehearsal(opts.train_batch - train.size(), rng);
  rep.drawn = drawn.size();
  train.insert(train.end(), drawn.begin(), drawn.end());
  if (train.empty()) throw StrategyError("empty training batch");
  rep.train_size = train.size();
  for (const Sample* t : train) rep.train_ids.push_back(t->id);

  auto upd = apply_update(model, adam, train);
  rep.loss = upd.loss;
  return rep;
}

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
};

struct TrainReport {
  std::vector<double> epoch_loss;
};

// Index batches for one epoch: a fresh shuffled order cut into consecutive
// batches; the final partial batch is kept, so every index appears once.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw StrategyError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

// Conventional multi-epoch training over `data`.
inline TrainReport train_epochs(Model& model, AdamState<float>& adam, std::span<const Sample> data,
                                const TrainOptions& opts, Rng& rng,
                                const std::function<void(std::size_t epoch, double loss)>& on_epoch = {}) {
  if (data.empty()) throw StrategyError("training set is empty");
  if (opts.batch_size == 0) throw StrategyError("batch size must be positive");
  TrainReport report;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& indices : epoch_batches(data.size(), opts.batch_size, rng)) {
      std::vector<const Sample*> batch;
      for (std::size_t i : indices) batch.push_back(&data[i]);
      loss_sum += apply_update(model, adam, batch).loss * static_cast<double>(batch.size());
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(epoch + 1, report.epoch_loss.back());
  }
  return report;
}

inline TrainReport train_base(Model& model, AdamState<float>& adam, std::span<const Sample> base,
                              const TrainOptions& opts, Rng& rng,
                              const std::function<void(std::size_t, double)>& on_epoch = {}) {
  return train_epochs(model, adam, base, opts, rng, on_epoch);
}

// Upper bound: conventional training on every split at once.
inline TrainReport train_full(Model& model, AdamState<float>& adam, std::span<const Sample> all_tasks,
                              const TrainOptions& opts, Rng& rng,
                              const std::function<void(std::size_t, double)>& on_epoch = {}) {
  return train_epochs(model, adam, all_tasks, opts, rng, on_epoch);
}

}  // namespace dmcl
