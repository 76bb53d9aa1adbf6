// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "pkt/sensitivity.hpp"
#include "test_support.hpp"

using namespace pkt;
using namespace pkt::sensitivity;
using pkt::testing::kind_of;
using pkt::testing::randomized_model;
using tinylm::ModelConfig;
using tinylm::ParamName;
using tinylm::Role;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  cfg.num_layers = 2;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.seed = 5;
  return cfg;
}

std::vector<SeedSample> make_seeds(std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SeedSample> out;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<tinylm::Token> seq(3 + rng.below(6));
    for (auto& t : seq) t = static_cast<tinylm::Token>(rng.below(16));
    out.push_back({i, TokenBatch::full_sequence({seq})});
  }
  return out;
}

ParamStore single_tensor_store(std::vector<double> values) {
  ParamStore s;
  const std::size_t n = values.size();
  s.insert(ParamName{0, Role::kAttnWq, ""}, linalg::DenseMatrix(1, n, std::move(values)));
  return s;
}

}  // namespace

TEST(SensitivityFromGradient, ElementwiseAbsoluteProduct) {
  const ParamStore theta = single_tensor_store({1.0, -2.0, 0.0});
  const ParamStore grad = single_tensor_store({0.5, 0.25, 7.0});
  const SensitivityMap m = sensitivity_from_gradient(theta, grad);
  EXPECT_EQ(m.sample_count, 1u);
  const auto v = m.scores.at("layer0.attn.wq").values();
  EXPECT_EQ(std::vector<double>(v.begin(), v.end()), (std::vector<double>{0.5, 0.5, 0.0}));
}

TEST(SensitivityFromGradient, RejectsIncongruentGradient) {
  EXPECT_EQ(kind_of([] {
              sensitivity_from_gradient(single_tensor_store({1.0, 2.0}), single_tensor_store({1.0}));
            }),
            ErrorKind::kShape);
}

TEST(SampleSensitivity, LiteralIdentityAndNonnegativity) {
  const tinylm::Model m = randomized_model(small_config(), 1);
  const TokenBatch sample = TokenBatch::full_sequence({{2, 7, 1, 9, 4}});
  const SensitivityMap s = sample_sensitivity(m, sample);
  const ParamStore g = tinylm::backward(m, sample);
  ASSERT_TRUE(s.scores.congruent(m.params));
  for (const auto& [name, e] : s.scores) {
    const auto theta = m.params.at(name).values();
    const auto grad = g.at(name).values();
    const auto score = e.value.values();
    for (std::size_t i = 0; i < score.size(); ++i) {
      EXPECT_GE(score[i], 0.0);
      EXPECT_EQ(score[i], std::abs(theta[i]) * std::abs(grad[i])) << name << "[" << i << "]";
    }
  }
}

TEST(SampleSensitivity, ZeroParameterHasZeroScore) {
  tinylm::Model m = randomized_model(small_config(), 2);
  m.params.at("layer1.ffn.w2")(3, 4) = 0.0;
  const SensitivityMap s = sample_sensitivity(m, TokenBatch::full_sequence({{1, 2, 3, 4, 5}}));
  EXPECT_EQ(s.scores.at("layer1.ffn.w2")(3, 4), 0.0);
}

TEST(SampleSensitivity, RequiresExactlyOneSequence) {
  const tinylm::Model m = randomized_model(small_config(), 3);
  EXPECT_EQ(kind_of([&] { sample_sensitivity(m, TokenBatch::full_sequence({{1, 2}, {3, 4}})); }),
            ErrorKind::kInvalidInput);
  EXPECT_EQ(kind_of([&] { sample_sensitivity(m, TokenBatch::full_sequence({{1, 99}})); }),
            ErrorKind::kData);
}

// Zeroing a small parameter changes the loss by about theta * dL/dtheta.
// Embeddings are kept at unit scale so the first RMS norm is not dominated
// by a single entry.
TEST(SampleSensitivity, FirstOrderAgreesWithZeroOutOracle) {
  const tinylm::Model m = randomized_model(small_config(), 4, 0.5, 0.1, 1.0);
  const TokenBatch sample = TokenBatch::full_sequence({{3, 1, 4, 1, 5, 9, 2, 6}});
  const SensitivityMap s = sample_sensitivity(m, sample);
  const double base_loss = tinylm::forward_loss(m, sample);

  std::vector<std::pair<std::string, std::size_t>> candidates;
  for (const auto& [name, e] : m.params) {
    const auto v = e.value.values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] != 0.0 && std::abs(v[i]) <= 0.05) candidates.emplace_back(name, i);
  }
  ASSERT_GE(candidates.size(), 20u);
  Rng rng(17);
  for (std::size_t pick : rng.sample_sorted(candidates.size(), 20)) {
    const auto& [name, i] = candidates[pick];
    tinylm::Model zeroed = m;
    zeroed.params.at(name).values()[i] = 0.0;
    const double delta = std::abs(base_loss - tinylm::forward_loss(zeroed, sample));
    const double score = s.scores.at(name).values()[i];
    const bool ok = std::abs(delta - score) <= 0.1 * std::abs(delta) || std::abs(delta - score) <= 1e-4;
    EXPECT_TRUE(ok) << name << "[" << i << "] delta=" << delta << " score=" << score;
  }
}

TEST(AccumulateSensitivity, SumsPerSampleMaps) {
  SensitivityMap a{single_tensor_store({0.5, 0.0}), 1};
  const SensitivityMap b{single_tensor_store({0.25, 1.0}), 1};
  a += b;
  const auto v = a.scores.at("layer0.attn.wq").values();
  EXPECT_EQ(std::vector<double>(v.begin(), v.end()), (std::vector<double>{0.75, 1.0}));
  EXPECT_EQ(a.sample_count, 2u);
}

TEST(AccumulateSensitivity, SingleSampleEqualsSampleSensitivity) {
  const tinylm::Model m = randomized_model(small_config(), 5);
  const auto seeds = make_seeds(1, 9);
  EXPECT_EQ(accumulate_sensitivity(m, seeds).scores, sample_sensitivity(m, seeds[0].sample).scores);
}

TEST(AccumulateSensitivity, PermutationGivesIdenticalResult) {
  const tinylm::Model m = randomized_model(small_config(), 6);
  auto seeds = make_seeds(8, 10);
  const SensitivityMap ref = accumulate_sensitivity(m, seeds);
  EXPECT_EQ(ref.sample_count, 8u);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(seeds);
    EXPECT_EQ(accumulate_sensitivity(m, seeds).scores, ref.scores);
  }
}

TEST(AccumulateSensitivity, EmptySeedListIsAnError) {
  const tinylm::Model m = randomized_model(small_config(), 7);
  EXPECT_EQ(kind_of([&] { accumulate_sensitivity(m, {}); }), ErrorKind::kInvalidInput);
}

// With integer-valued per-sample maps every partial sum is exact, so the
// split and joint reductions must agree bit-for-bit.
TEST(AccumulateSensitivity, AdditiveOnExactValues) {
  Rng rng(21);
  std::vector<SensitivityMap> parts;
  for (int j = 0; j < 6; ++j) {
    std::vector<double> v(5);
    for (double& x : v) x = static_cast<double>(rng.below(1000));
    parts.push_back({single_tensor_store(v), 1});
  }
  SensitivityMap all = parts[0];
  for (int j = 1; j < 6; ++j) all += parts[j];
  SensitivityMap left = parts[0];
  for (int j = 1; j < 3; ++j) left += parts[j];
  SensitivityMap right = parts[3];
  for (int j = 4; j < 6; ++j) right += parts[j];
  left += right;
  EXPECT_EQ(left.scores, all.scores);
  EXPECT_EQ(left.sample_count, 6u);
}

TEST(AccumulateSensitivity, AdditiveOnModelSeedsWithinRounding) {
  const tinylm::Model m = randomized_model(small_config(), 8);
  const auto seeds = make_seeds(6, 11);
  const SensitivityMap all = accumulate_sensitivity(m, seeds);
  SensitivityMap split = accumulate_sensitivity(m, {seeds.begin(), seeds.begin() + 3});
  split += accumulate_sensitivity(m, {seeds.begin() + 3, seeds.end()});
  EXPECT_EQ(split.sample_count, all.sample_count);
  for (const auto& [name, e] : all.scores) {
    const auto a = e.value.values();
    const auto b = split.scores.at(name).values();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * (1.0 + a[i]));
  }
}

TEST(LayerScores, SumsPerLayerIncludingNorms) {
  ParamStore s;
  s.insert(ParamName{0, Role::kAttnWq, ""}, linalg::DenseMatrix(1, 1, {0.1}));
  s.insert(ParamName{0, Role::kNorm, "attn"}, linalg::DenseMatrix(1, 1, {0.2}), true);
  s.insert(ParamName{1, Role::kFfnW1, ""}, linalg::DenseMatrix(1, 1, {0.5}));
  s.insert(ParamName{-1, Role::kEmbedTok, ""}, linalg::DenseMatrix(1, 1, {100.0}));
  const LayerScores ls = layer_scores({s, 1});
  ASSERT_EQ(ls.per_layer.size(), 2u);
  EXPECT_DOUBLE_EQ(ls.per_layer[0], 0.3);
  EXPECT_EQ(ls.per_layer[1], 0.5);
}

TEST(LayerScores, AllZeroMap) {
  const tinylm::Model m = tinylm::init_model(small_config());
  const LayerScores ls = layer_scores({m.params.zeros_like(), 1});
  EXPECT_EQ(ls.per_layer, std::vector<double>(2, 0.0));
}

// Round-trips the map through a JSON dump and re-sums it flat, layer by
// layer, in the dump's own order.
TEST(LayerScores, MatchesFlatSummationOverSerializedDump) {
  const tinylm::Model m = randomized_model(small_config(), 9);
  const SensitivityMap smap = accumulate_sensitivity(m, make_seeds(4, 12));
  nlohmann::json dump = nlohmann::json::object();
  for (const auto& [name, e] : smap.scores)
    dump[name] = std::vector<double>(e.value.values().begin(), e.value.values().end());
  const nlohmann::json parsed = nlohmann::json::parse(dump.dump());

  std::vector<double> oracle(2, 0.0);
  for (const auto& [name, values] : parsed.items()) {
    if (name.rfind("layer", 0) != 0) continue;
    const std::size_t layer = std::stoul(name.substr(5, name.find('.') - 5));
    for (double v : values.get<std::vector<double>>()) oracle[layer] += v;
  }
  EXPECT_EQ(layer_scores(smap).per_layer, oracle);
}
