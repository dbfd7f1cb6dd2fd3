#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dmcl/experiment.hpp"
#include "dmcl/strategies.hpp"
#include "support.hpp"

using namespace dmcl;

namespace {

Model initialized_model(std::uint64_t seed) {
  Rng rng(seed);
  Model m;
  m.initialize(rng);
  return m;
}

// Every logit is +100, so every sample is predicted as class 1.
Model always_positive() {
  Model m = initialized_model(1);
  for (const ParamBlock& p : m.layout())
    if (p.kind == ParamKind::dense_weight)
      std::fill_n(m.parameters().begin() + static_cast<std::ptrdiff_t>(p.offset), p.size(), 0.0f);
  m.parameters().back() = 100.0f;
  return m;
}

Dataset images(std::size_t n, std::uint64_t seed, int label = -1) {
  Dataset out;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = label >= 0 ? label : static_cast<int>(i % 2);
    out.push_back(generate_sample(Task::A, l, seed * 1000 + i, GeneratorConfig{}, seed));
  }
  return out;
}

Dataset with_labels(const std::vector<int>& labels, std::uint64_t seed) {
  Dataset out = images(labels.size(), seed);
  for (std::size_t i = 0; i < labels.size(); ++i) out[i].label = labels[i];
  return out;
}

bool same_parameters(const Model& a, const Model& b) {
  return std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin());
}

struct DmCase {
  std::size_t misclassified;
  std::size_t drawn;
};

}  // namespace

class DmBatchComposition : public ::testing::TestWithParam<DmCase> {};

TEST_P(DmBatchComposition, MisclassifiedFirstThenDraws) {
  const DmCase c = GetParam();
  std::vector<int> labels(8, 1);
  for (std::size_t i = 0; i < c.misclassified; ++i) labels[2 * i % 8 + (2 * i / 8)] = 0;
  const Dataset input = with_labels(labels, 3);
  Model model = always_positive();
  AdamState<float> adam(model.parameter_count(), AdamSettings{});
  DynamicMemory memory(32);
  Rng rng(4);
  const auto rep = dm_step(model, adam, memory, input, rng, DmOptions{8, {}, false}, 1);
  EXPECT_EQ(rep.misclassified, c.misclassified);
  EXPECT_EQ(rep.drawn, c.drawn);
  ASSERT_EQ(rep.train_size, 8u);
  std::vector<std::uint64_t> wrong;
  for (const Sample& s : input)
    if (s.label == 0) wrong.push_back(s.id);
  EXPECT_TRUE(std::equal(wrong.begin(), wrong.end(), rep.train_ids.begin()));
  std::set<std::uint64_t> draws(rep.train_ids.begin() + static_cast<std::ptrdiff_t>(wrong.size()), rep.train_ids.end());
  EXPECT_EQ(draws.size(), c.drawn);  // draws are distinct memory items
}

INSTANTIATE_TEST_SUITE_P(Boundaries, DmBatchComposition,
                         ::testing::Values(DmCase{2, 6}, DmCase{0, 8}, DmCase{8, 0}));

TEST(DmStep, RejectsInputLargerThanTrainingBatch) {
  Model model = initialized_model(1);
  AdamState<float> adam(model.parameter_count(), AdamSettings{});
  DynamicMemory memory(32);
  Rng rng(1);
  const Dataset input = images(9, 1);
  EXPECT_THROW(dm_step(model, adam, memory, input, rng, DmOptions{8, {}, false}), StrategyError);
}

TEST(DmStep, MemoryIsUpdatedBeforeTheModel) {
  Model model = initialized_model(2);
  AdamState<float> adam(model.parameter_count(), AdamSettings{1e-3});
  DynamicMemory memory(4);
  Rng rng(3);
  const std::uint64_t version_before = model.version();
  const Dataset input = images(8, 5);
  const Model before = model;
  const auto rep = dm_step(model, adam, memory, input, rng, DmOptions{8, {}, false}, 7);
  ASSERT_EQ(rep.outcomes.size(), 8u);
  EXPECT_FALSE(same_parameters(model, before));
  for (const auto& item : memory.items()) {
    EXPECT_EQ(item.signature.model_version, version_before);
    EXPECT_EQ(item.inserted_at, 7u);
  }

  // The stored signatures are those of the pre-update model.
  Model reference = before;
  for (const auto& item : memory.items()) {
    Tensor<float> image({32, 32}, item.sample.pixels);
    EXPECT_EQ(gram_distance(item.signature, signature(reference, image)), 0.0);
  }
}

TEST(NaiveStep, IsDeterministic) {
  Model a = initialized_model(9), b = initialized_model(9);
  AdamState<float> sa(a.parameter_count(), AdamSettings{1e-3}), sb(b.parameter_count(), AdamSettings{1e-3});
  const Dataset input = images(8, 2);
  for (int i = 0; i < 5; ++i) {
    naive_step(a, sa, input);
    naive_step(b, sb, input);
  }
  EXPECT_TRUE(same_parameters(a, b));
  EXPECT_TRUE(std::equal(a.running_statistics().begin(), a.running_statistics().end(), b.running_statistics().begin()));
}

TEST(NaiveStep, LossFallsOnRepeatedExposure) {
  Model m = initialized_model(9);
  AdamState<float> adam(m.parameter_count(), AdamSettings{1e-3});
  const Dataset input = images(8, 2);
  const double first = naive_step(m, adam, input).loss;
  double last = first;
  for (int i = 0; i < 30; ++i) last = naive_step(m, adam, input).loss;
  EXPECT_LT(last, 0.5 * first);
}

TEST(EwcStep, ZeroLambdaMatchesNaive) {
  Model a = initialized_model(9);
  a.consolidate(std::vector<float>(a.parameter_count(), 1.0f));
  Model b = a;
  AdamState<float> sa(a.parameter_count(), AdamSettings{1e-3}), sb(b.parameter_count(), AdamSettings{1e-3});
  const Dataset input = images(8, 2);
  for (int i = 0; i < 5; ++i) {
    naive_step(a, sa, input);
    const auto rep = ewc_step(b, sb, input, 0.0);
    EXPECT_EQ(rep.penalty, 0.0);
  }
  EXPECT_TRUE(same_parameters(a, b));
}

TEST(EwcStep, PenaltyIsZeroAtTheAnchor) {
  Model m = initialized_model(9);
  m.consolidate(std::vector<float>(m.parameter_count(), 5.0f));
  AdamState<float> adam(m.parameter_count(), AdamSettings{});
  EXPECT_EQ(ewc_step(m, adam, images(4, 1), 100.0).penalty, 0.0);
  EXPECT_GT(ewc_step(m, adam, images(4, 1), 100.0).penalty, 0.0);
}

TEST(EwcStep, RequiresConsolidatedModelAndMatchingNormState) {
  Model m = initialized_model(9);
  AdamState<float> adam(m.parameter_count(), AdamSettings{});
  const Dataset input = images(4, 1);
  EXPECT_THROW(ewc_step(m, adam, input, 1.0), StrategyError);
  EXPECT_THROW(ewc_fbn_step(m, adam, input, 1.0), StrategyError);
  m.consolidate(std::vector<float>(m.parameter_count(), 1.0f));
  EXPECT_THROW(ewc_fbn_step(m, adam, input, 1.0), StrategyError);
  m.freeze_norms();
  EXPECT_THROW(ewc_step(m, adam, input, 1.0), StrategyError);
  EXPECT_NO_THROW(ewc_fbn_step(m, adam, input, 1.0));
}

TEST(EwcFbnStep, NormalizationStateStaysFixed) {
  Model m = initialized_model(9);
  m.forward(to_batch(std::span<const Sample>(images(8, 4)), 32), NormMode::train);
  m.consolidate(std::vector<float>(m.parameter_count(), 0.01f));
  m.freeze_norms();
  const Model before = m;
  AdamState<float> adam(m.parameter_count(), AdamSettings{1e-3});
  Rng rng(6);
  const Dataset pool = images(64, 8);
  for (int step = 0; step < 100; ++step) {
    Dataset input;
    for (int i = 0; i < 8; ++i) input.push_back(pool[rng.below(pool.size())]);
    ewc_fbn_step(m, adam, input, 1.0);
  }
  EXPECT_TRUE(std::equal(m.running_statistics().begin(), m.running_statistics().end(),
                         before.running_statistics().begin()));
  bool others_moved = false;
  for (const ParamBlock& p : m.layout()) {
    const bool norm = p.kind == ParamKind::norm_scale || p.kind == ParamKind::norm_shift;
    for (std::size_t i = p.offset; i < p.offset + p.size(); ++i) {
      if (norm) ASSERT_EQ(m.parameters()[i], before.parameters()[i]) << p.name;
      else others_moved |= m.parameters()[i] != before.parameters()[i];
    }
  }
  EXPECT_TRUE(others_moved);
}

TEST(EwcStep, HugeLambdaPinsParametersToAnchor) {
  CorpusCounts counts{64, {2, 2, 2}, 2, 2};
  const Corpus corpus = build_corpus(GeneratorConfig{}, counts, 5);
  Model m = initialized_model(3);
  AdamState<float> base_adam(m.parameter_count(), AdamSettings{1e-3});
  Rng shuffle(1);
  train_base(m, base_adam, corpus.base, TrainOptions{2, 16}, shuffle);
  std::vector<int> labels;
  std::vector<std::vector<float>> pixels;
  for (const Sample& s : corpus.base) {
    labels.push_back(s.label);
    pixels.push_back(s.pixels);
  }
  m.consolidate(fisher_diagonal(m, pixels, labels));

  AdamState<float> adam(m.parameter_count(), AdamSettings{});
  const Dataset stream = images(800, 11, 1);
  for (std::size_t step = 0; step < 100; ++step)
    ewc_step(m, adam, std::span<const Sample>(stream).subspan(8 * step, 8), 1e9);  // lr 1e-4
  // Coordinates with (near) zero Fisher feel no restoring force at any lambda;
  // the property is checked where the penalty curvature lambda * F is >= 10.
  const double lambda = 1e9;
  double worst = 0.0;
  std::size_t pinned = 0;
  for (std::size_t i = 0; i < m.parameter_count(); ++i) {
    if (lambda * m.fisher()[i] < 10.0) continue;
    ++pinned;
    worst = std::max(worst, static_cast<double>(std::abs(m.parameters()[i] - m.anchor()[i])));
  }
  EXPECT_GT(pinned, m.parameter_count() * 98 / 100);
  EXPECT_LT(worst, 1e-3);
}

TEST(EpochTraining, BatchesCoverEveryIndexOnce) {
  Rng rng(1);
  const auto batches = epoch_batches(37, 8, rng);
  ASSERT_EQ(batches.size(), 5u);
  EXPECT_EQ(batches.back().size(), 5u);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  ASSERT_EQ(seen.size(), 37u);
  for (std::size_t i = 0; i < 37; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(EpochTraining, ZeroEpochsLeaveModelUnchanged) {
  Model m = initialized_model(4);
  const Model before = m;
  AdamState<float> adam(m.parameter_count(), AdamSettings{1e-3});
  Rng rng(1);
  const Dataset data = images(16, 3);
  EXPECT_TRUE(train_base(m, adam, data, TrainOptions{0, 8}, rng).epoch_loss.empty());
  EXPECT_TRUE(same_parameters(m, before));
}

TEST(EpochTraining, EpochLossFallsOnLearnableSet) {
  const Corpus corpus = build_corpus(GeneratorConfig{}, CorpusCounts{96, {2, 2, 2}, 2, 2}, 5);
  Model m = initialized_model(4);
  AdamState<float> adam(m.parameter_count(), AdamSettings{1e-3});
  Rng rng(1);
  const auto report = train_base(m, adam, corpus.base, TrainOptions{6, 16}, rng);
  ASSERT_EQ(report.epoch_loss.size(), 6u);
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
  for (std::size_t e = 1; e < report.epoch_loss.size(); ++e)
    EXPECT_LT(report.epoch_loss[e], report.epoch_loss[0]);
}

TEST(Strategies, ShareTheStreamOrderForASeed) {
  const ExperimentConfig cfg = dmcl::testing::small_config();
  const Corpus corpus = build_corpus(GeneratorConfig{}, dmcl::testing::small_counts(), 2);
  const BaseRun base = run_base(cfg, corpus, 1);
  std::vector<std::uint64_t> reference;
  for (Strategy s : {Strategy::naive, Strategy::ewc, Strategy::ewc_fbn, Strategy::dm}) {
    const auto run = run_continual(cfg, corpus, base.model, s, 1, 8, "test");
    std::vector<std::uint64_t> ids;
    for (const Sample& sample : run.stream) ids.push_back(sample.id);
    if (reference.empty()) reference = ids;
    EXPECT_EQ(ids, reference) << to_string(s);
  }
  EXPECT_NE(build_stream(cfg, corpus, 1).front().id + 1000 * build_stream(cfg, corpus, 1)[5].id,
            build_stream(cfg, corpus, 2).front().id + 1000 * build_stream(cfg, corpus, 2)[5].id);
}

TEST(Strategies, ParseNamesAndRejectUnknown) {
  EXPECT_EQ(parse_strategy("ewc-fbn"), Strategy::ewc_fbn);
  EXPECT_EQ(parse_strategy("dm"), Strategy::dm);
  EXPECT_THROW(parse_strategy("replay"), std::invalid_argument);
}
