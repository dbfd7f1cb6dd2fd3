#include <gtest/gtest.h>

#include "dmcl/gram.hpp"
#include "support.hpp"

using namespace dmcl;
using dmcl::testing::brute_force_distance;
using dmcl::testing::brute_force_gram;
using dmcl::testing::signature_of;

TEST(Gram, HandExample) {
  // Two 2x2 maps: f0 = [1,2,3,4], f1 = [0,1,0,1]. N*M = 8.
  const std::vector<double> maps{1, 2, 3, 4, 0, 1, 0, 1};
  const GramMatrix g = gram_matrix<double>(maps, 2, 4);
  EXPECT_DOUBLE_EQ(g(0, 0), 30.0 / 8.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 6.0 / 8.0);
  EXPECT_DOUBLE_EQ(g(1, 0), 6.0 / 8.0);
  EXPECT_DOUBLE_EQ(g(1, 1), 2.0 / 8.0);

  Tensor<double> t({2, 2, 2}, maps);
  EXPECT_EQ(gram_matrix(t), g);
}

TEST(Gram, DistanceHandExample) {
  GramSignature a{{GramMatrix{2, {1, 0, 0, 1}}}, 0};
  GramSignature b{{GramMatrix{2, {1, 2, 2, 1}}}, 0};
  EXPECT_DOUBLE_EQ(gram_distance(a, b), 8.0 / 4.0);
  a.layers.push_back(GramMatrix{1, {3}});
  b.layers.push_back(GramMatrix{1, {1}});
  EXPECT_DOUBLE_EQ(gram_distance(a, b), 2.0 + 4.0);
}

TEST(Gram, MatchesBruteForceOnRandomInputs) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng.below(9), plane = 1 + rng.below(40);
    std::vector<double> maps(c * plane);
    for (double& v : maps) v = rng.uniform(-2.0, 2.0);
    const GramMatrix g = gram_matrix<double>(maps, c, plane);
    const auto oracle = brute_force_gram(maps, c, plane);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j) ASSERT_NEAR(g(i, j), oracle[i][j], 1e-6);
  }
}

TEST(Gram, DistanceIsAPseudometricOnRandomSignatures) {
  Rng rng(23);
  std::vector<GramSignature> sigs;
  for (int k = 0; k < 12; ++k) {
    std::vector<std::vector<double>> layers;
    for (std::size_t c : {3u, 5u}) {
      std::vector<double> maps(c * 6);
      for (double& v : maps) v = rng.uniform();
      layers.push_back(std::move(maps));
    }
    sigs.push_back(signature_of(layers, {3, 5}, {6, 6}));
  }
  for (const auto& a : sigs) {
    EXPECT_EQ(gram_distance(a, a), 0.0);
    for (const auto& b : sigs) {
      const double d = gram_distance(a, b);
      EXPECT_GE(d, 0.0);
      EXPECT_EQ(d, gram_distance(b, a));
      EXPECT_NEAR(d, brute_force_distance(a, b), 1e-6);
    }
  }
}

TEST(Gram, RejectsMismatchedSignatures) {
  GramSignature a{{GramMatrix{2, {1, 0, 0, 1}}}, 0};
  GramSignature b{{GramMatrix{3, std::vector<double>(9, 0.0)}}, 0};
  EXPECT_THROW(gram_distance(a, b), SignatureMismatch);
  GramSignature c{{GramMatrix{2, {1, 0, 0, 1}}, GramMatrix{1, {0}}}, 0};
  EXPECT_THROW(gram_distance(a, c), SignatureMismatch);
  EXPECT_THROW(gram_matrix<double>(std::vector<double>(5), 2, 3), ShapeError);
  EXPECT_THROW(gram_matrix<double>(std::vector<double>{}, 0, 3), std::invalid_argument);
}

TEST(Gram, ModelSignatureHasOneMatrixPerTap) {
  Rng rng(4);
  Model m;
  m.initialize(rng);
  Tensor<float> image({32, 32});
  for (float& v : image.values()) v = static_cast<float>(rng.uniform());
  const GramSignature sig = signature(m, image);
  ASSERT_EQ(sig.layers.size(), 4u);
  const std::vector<std::size_t> channels{8, 16, 32, 64};
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(sig.layers[l].n, channels[l]);
  EXPECT_EQ(sig.model_version, m.version());
  EXPECT_EQ(gram_distance(sig, signature(m, image)), 0.0);

  TapSpec partial{{1, 3}};
  image.reshape({1, 1, 32, 32});
  const auto subset = signatures(m, image, partial).front();
  ASSERT_EQ(subset.layers.size(), 2u);
  EXPECT_EQ(subset.layers[0], sig.layers[1]);
  EXPECT_EQ(subset.layers[1], sig.layers[3]);
  EXPECT_THROW(signatures(m, image, TapSpec{{2, 1}}), std::invalid_argument);
}
