// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pkt/error.hpp"
#include "pkt/rng.hpp"
#include "pkt/tinylm.hpp"
#include "test_support.hpp"

using namespace pkt;
using namespace pkt::tinylm;
using pkt::testing::kind_of;
using pkt::testing::randomized_model;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  cfg.num_layers = 1;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.seed = 3;
  return cfg;
}

TokenBatch sample_batch() {
  TokenBatch b = TokenBatch::full_sequence({{1, 5, 9, 2, 7, 7}, {3, 0, 15}, {4, 4, 8, 12, 1}});
  b.loss_mask[2][3] = false;
  return b;
}

}  // namespace

TEST(ParamName, RendersAndParses) {
  ParamName a{3, Role::kFfnW2, ""};
  EXPECT_EQ(a.str(), "layer3.ffn.w2");
  ParamName b{-1, Role::kNorm, "final"};
  EXPECT_EQ(b.str(), "norm.final");
  for (const auto& n : parameter_names(small_config())) EXPECT_EQ(ParamName::parse(n.str()), n);
  EXPECT_EQ(kind_of([] { ParamName::parse("layerX.attn.wq"); }), ErrorKind::kInvalidInput);
}

TEST(InitModel, CountsTensorsFromArchitecture) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_dim = 16;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.vocab_size = 16;
  Model m = init_model(cfg);
  std::size_t matrices = 0, vectors = 0, layer_matrices = 0;
  for (const auto& [name, e] : m.params) {
    if (e.is_vector) {
      ++vectors;
      EXPECT_EQ(e.name.role, Role::kNorm);
    } else {
      ++matrices;
      if (e.name.layer >= 0) ++layer_matrices;
    }
  }
  EXPECT_EQ(layer_matrices, 2u * 7u);
  EXPECT_EQ(matrices, 2u * 7u + 3u);
  EXPECT_EQ(vectors, 2u * 2u + 1u);
  EXPECT_TRUE(m.params.contains("embed.tok"));
  EXPECT_TRUE(m.params.contains("embed.pos"));
  EXPECT_TRUE(m.params.contains("head.out"));
  EXPECT_EQ(m.params.at("layer1.ffn.w2").rows(), 32u);
  EXPECT_EQ(m.params.at("layer1.ffn.w2").cols(), 16u);
  EXPECT_EQ(m.params.at("head.out").rows(), 16u);
  for (double v : m.params.at("head.out").values()) EXPECT_EQ(v, 0.0);
}

TEST(InitModel, DeterministicAndSeedSensitive) {
  ModelConfig cfg = small_config();
  EXPECT_EQ(init_model(cfg).params, init_model(cfg).params);
  ModelConfig other = cfg;
  other.seed = cfg.seed + 1;
  EXPECT_FALSE(init_model(cfg).params == init_model(other).params);
}

TEST(InitModel, RejectsIndivisibleHeads) {
  ModelConfig cfg = small_config();
  cfg.hidden_dim = 15;
  cfg.num_heads = 2;
  EXPECT_EQ(kind_of([&] { init_model(cfg); }), ErrorKind::kConfig);
  cfg.hidden_dim = 16;
  cfg.num_layers = 0;
  EXPECT_EQ(kind_of([&] { init_model(cfg); }), ErrorKind::kConfig);
}

TEST(ForwardLoss, FreshModelIsUniform) {
  Model m = init_model(small_config());
  EXPECT_NEAR(forward_loss(m, sample_batch()), std::log(16.0), 1e-12);
}

TEST(ForwardLoss, SinglePositionIsNegativeLogProb) {
  Model m = randomized_model(small_config(), 1);
  TokenBatch b;
  b.sequences = {{2, 9, 4, 11}};
  b.loss_mask = {{false, false, true, false}};
  const std::vector<double> z = next_token_logits(m, {2, 9});
  double lse = 0.0;
  const double mx = *std::max_element(z.begin(), z.end());
  for (double v : z) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  EXPECT_NEAR(forward_loss(m, b), lse - z[4], 1e-12);
}

TEST(ForwardLoss, DuplicateAndPermutationInvariance) {
  Model m = randomized_model(small_config(), 2);
  TokenBatch one = TokenBatch::full_sequence({{1, 2, 3, 4, 5}});
  TokenBatch two = TokenBatch::full_sequence({{1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}});
  EXPECT_NEAR(forward_loss(m, one), forward_loss(m, two), 1e-14);

  TokenBatch b = sample_batch();
  TokenBatch p = b;
  std::reverse(p.sequences.begin(), p.sequences.end());
  std::reverse(p.loss_mask.begin(), p.loss_mask.end());
  EXPECT_NEAR(forward_loss(m, b), forward_loss(m, p), 1e-13);
}

TEST(ForwardLoss, DataErrors) {
  Model m = init_model(small_config());
  EXPECT_EQ(kind_of([&] { forward_loss(m, TokenBatch::full_sequence({{1, 16}})); }), ErrorKind::kData);
  EXPECT_EQ(kind_of([&] { forward_loss(m, TokenBatch::full_sequence({std::vector<Token>(9, 1)})); }),
            ErrorKind::kData);
  TokenBatch none;
  none.sequences = {{1, 2, 3}};
  none.loss_mask = {{true, false, false}};
  EXPECT_EQ(kind_of([&] { forward_loss(m, none); }), ErrorKind::kData);
}

TEST(Backward, MatchesCentralFiniteDifferences) {
  const ModelConfig cfg = small_config();
  Model m = randomized_model(cfg, 4);
  const TokenBatch batch = sample_batch();
  const ParamStore grad = backward(m, batch);
  ASSERT_TRUE(grad.congruent(m.params));
  constexpr double kStep = 1e-4;
  std::size_t checked = 0;
  for (auto& [name, e] : m.params) {
    auto values = e.value.values();
    auto g = grad.at(name).values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + kStep;
      const double up = forward_loss(m, batch);
      values[i] = saved - kStep;
      const double down = forward_loss(m, batch);
      values[i] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      ASSERT_LE(std::abs(g[i] - fd), 1e-5 + 1e-3 * std::abs(fd)) << name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_EQ(checked, m.params.num_values());
}

TEST(Backward, UnusedPositionRowsHaveZeroGradient) {
  Model m = randomized_model(small_config(), 5);
  const ParamStore grad = backward(m, TokenBatch::full_sequence({{1, 2, 3, 4}}));
  const DenseMatrix& dpos = grad.at("embed.pos");
  // Inputs are tokens [0, 3) so position rows 3.. never participate.
  for (std::size_t r = 3; r < dpos.rows(); ++r)
    for (double v : dpos.row(r)) EXPECT_EQ(v, 0.0);
  double used = 0.0;
  for (double v : dpos.row(0)) used += std::abs(v);
  EXPECT_GT(used, 0.0);
}

TEST(Backward, DuplicatedSequenceGivesSameMeanGradient) {
  Model m = randomized_model(small_config(), 6);
  const ParamStore g1 = backward(m, TokenBatch::full_sequence({{7, 3, 1, 9}}));
  const ParamStore g2 = backward(m, TokenBatch::full_sequence({{7, 3, 1, 9}, {7, 3, 1, 9}}));
  for (const auto& [name, e] : g1) {
    auto a = e.value.values();
    auto b = g2.at(name).values();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-13 + 1e-12 * std::abs(a[i])) << name;
  }
}

TEST(Backward, BitDeterministic) {
  Model m = randomized_model(small_config(), 8);
  const TokenBatch b = sample_batch();
  const LossAndGrad x = loss_and_grad(m, b);
  const LossAndGrad y = loss_and_grad(m, b);
  EXPECT_EQ(x.loss, y.loss);
  EXPECT_EQ(x.grad, y.grad);
}

TEST(Generate, NoOpAndDeterministic) {
  Model m = randomized_model(small_config(), 9);
  const std::vector<Token> prompt{1, 2, 3};
  EXPECT_EQ(generate(m, prompt, 0), prompt);
  const auto a = generate(m, prompt, 4);
  EXPECT_EQ(a, generate(m, prompt, 4));
  EXPECT_EQ(a.size(), 7u);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), a.begin()));
}

TEST(Generate, TiesPickLowestTokenAndLengthLimits) {
  Model m = init_model(small_config());  // zero head: all logits tie
  EXPECT_EQ(generate(m, {5}, 2), (std::vector<Token>{5, 0, 0}));
  EXPECT_EQ(generate(m, {5}, 100).size(), small_config().max_seq_len);
  EXPECT_EQ(kind_of([&] { generate(m, std::vector<Token>(9, 1), 1); }), ErrorKind::kData);
  EXPECT_EQ(kind_of([&] { generate(m, {}, 1); }), ErrorKind::kData);
}
