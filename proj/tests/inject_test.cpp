// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "pkt/inject.hpp"
#include "pkt/sensitivity.hpp"
#include "test_support.hpp"

using namespace pkt;
using namespace pkt::inject;
using pkt::testing::kind_of;
using pkt::testing::random_matrix;
using pkt::testing::randomized_model;
using tinylm::ModelConfig;
using tinylm::TokenBatch;

namespace {

ModelConfig teacher_config() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 8;
  cfg.num_layers = 2;
  cfg.hidden_dim = 16;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.seed = 1;
  return cfg;
}

ModelConfig student_config() {
  ModelConfig cfg = teacher_config();
  cfg.num_layers = 1;
  cfg.hidden_dim = 8;
  cfg.ffn_dim = 16;
  cfg.seed = 2;
  return cfg;
}

struct Fixture {
  tinylm::Model teacher = randomized_model(teacher_config(), 11);
  tinylm::Model student = randomized_model(student_config(), 12);
  extract::ExtractionPlan plan;

  explicit Fixture(extract::ExtractionOptions opts = {}) {
    std::vector<sensitivity::SeedSample> seeds;
    seeds.push_back({0, TokenBatch::full_sequence({{1, 4, 2, 7, 3}})});
    seeds.push_back({1, TokenBatch::full_sequence({{5, 5, 0, 11, 6, 2}})});
    plan = extract::build_extraction_plan(teacher, sensitivity::accumulate_sensitivity(teacher, seeds),
                                          student_config(), opts);
  }

  InjectedModel inject(InitStrategy kind, std::size_t rank = 4) const {
    InjectOptions opts;
    opts.rank = rank;
    opts.init = {kind, 5};
    return build_injected_model(student, plan, opts, &teacher);
  }
};

TokenBatch batch() {
  TokenBatch b = TokenBatch::full_sequence({{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11}});
  b.loss_mask[0][1] = false;
  return b;
}

double rel_diff(const DenseMatrix& x, const DenseMatrix& y) {
  return linalg::frobenius_norm(x - y) / (1.0 + linalg::frobenius_norm(y));
}

}  // namespace

TEST(FactorizeExtracted, DiagonalExample) {
  const LoraInit init = factorize_extracted({{3, 0}, {0, 2}}, 1);
  EXPECT_EQ(init.rank, 1u);
  EXPECT_NEAR(linalg::frobenius_norm(init.b - DenseMatrix{{3}, {0}}), 0.0, 1e-12);
  EXPECT_NEAR(linalg::frobenius_norm(init.a - DenseMatrix{{1, 0}}), 0.0, 1e-12);
  ASSERT_TRUE(init.subtract.has_value());
  EXPECT_NEAR(linalg::frobenius_norm(*init.subtract - DenseMatrix{{3, 0}, {0, 0}}), 0.0, 1e-12);
}

TEST(FactorizeExtracted, RankOneIsExact) {
  const DenseMatrix w{{2, 4}, {1, 2}};
  const LoraInit init = factorize_extracted(w, 1);
  EXPECT_LE(linalg::frobenius_norm(*init.subtract - w), 1e-8 * linalg::frobenius_norm(w));
}

TEST(FactorizeExtracted, TailErrorMatchesSpectrum) {
  Rng rng(8);
  const DenseMatrix w = random_matrix(rng, 16, 12, -1.0, 1.0);
  const LoraInit init = factorize_extracted(w, 4);
  const auto sigma = linalg::svd(w).sigma;
  double tail = 0.0;
  for (std::size_t i = 4; i < sigma.size(); ++i) tail += sigma[i] * sigma[i];
  const double err = linalg::frobenius_norm(w - linalg::matmul(init.b, init.a));
  EXPECT_NEAR(err, std::sqrt(tail), 1e-8 * std::sqrt(tail));
  EXPECT_EQ(*init.subtract, linalg::matmul(init.b, init.a));
}

TEST(FactorizeExtracted, RankOutOfRange) {
  EXPECT_EQ(kind_of([] { factorize_extracted(DenseMatrix(3, 2), 3); }), ErrorKind::kRank);
  EXPECT_EQ(kind_of([] { factorize_extracted(DenseMatrix(3, 2), 0); }), ErrorKind::kRank);
}

TEST(EffectiveWeight, Examples) {
  const DenseMatrix eye = DenseMatrix::identity(2);
  LoraInit with_sub{{{3}, {0}}, {{1, 0}}, DenseMatrix{{3, 0}, {0, 0}}, 1};
  EXPECT_EQ(effective_weight(eye, with_sub, InitStrategy::kPaperDefault), eye);

  LoraInit plain{{{1}, {0}}, {{0, 1}}, std::nullopt, 1};
  EXPECT_EQ(effective_weight(eye, plain, InitStrategy::kLoraResidual), (DenseMatrix{{1, 1}, {0, 1}}));

  LoraInit zero_a{{{1}, {2}}, DenseMatrix(1, 2), std::nullopt, 1};
  EXPECT_EQ(effective_weight(eye, zero_a, InitStrategy::kGaussianZero), eye);
  EXPECT_EQ(effective_weight(eye, zero_a, InitStrategy::kLoraResidual), eye);

  EXPECT_EQ(kind_of([&] { effective_weight(eye, plain, InitStrategy::kPaperDefault); }), ErrorKind::kState);
  EXPECT_EQ(kind_of([&] { effective_weight(DenseMatrix::identity(3), plain, InitStrategy::kGaussianZero); }),
            ErrorKind::kShape);
}

TEST(BuildInjectedModel, DefaultTargets) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kPaperDefault);
  std::vector<std::string> names;
  for (const auto& [name, _] : m.lora) names.push_back(name);
  EXPECT_EQ(names, (std::vector<std::string>{"embed.tok", "layer0.attn.wk", "layer0.attn.wo", "layer0.attn.wq",
                                             "layer0.attn.wv", "layer0.ffn.w1", "layer0.ffn.w2",
                                             "layer0.ffn.w3"}));
  InjectOptions opts;
  opts.targets.insert(extract::RoleGroup::kHead);
  EXPECT_EQ(lora_target_names(student_config(), opts).size(), 9u);
}

TEST(BuildInjectedModel, PaperDefaultStartsFromBase) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kPaperDefault);
  for (const auto& [name, t] : m.lora) {
    EXPECT_EQ(t.semantics, InitStrategy::kPaperDefault);
    const DenseMatrix& base = m.base.params.at(name);
    EXPECT_LE(linalg::frobenius_norm(effective_weight(base, t.init, t.semantics) - base),
              1e-6 * (1.0 + linalg::frobenius_norm(base)))
        << name;
    // The teacher knowledge lives in b a, a rank-r matrix.
    const DenseMatrix low_rank = effective_weight(base, t.init, t.semantics) - base + *t.init.subtract;
    const auto sigma = linalg::svd(low_rank).sigma;
    EXPECT_LE(sigma[t.init.rank], 1e-6 * sigma[0]) << name;
    EXPECT_GT(sigma[0], 0.0) << name;
  }
  const TokenBatch b = batch();
  EXPECT_NEAR(injected_forward_backward(m, b).loss, tinylm::forward_loss(f.student, b), 1e-6);
}

TEST(BuildInjectedModel, GaussianZeroIsExactlyTheBase) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kGaussianZero);
  for (const auto& [name, t] : m.lora) {
    EXPECT_FALSE(t.init.subtract.has_value());
    EXPECT_EQ(linalg::sum(t.init.a), 0.0);
    EXPECT_GT(linalg::frobenius_norm(t.init.b), 0.0);
  }
  EXPECT_EQ(effective_model(m).params, f.student.params);
  const TokenBatch b = batch();
  EXPECT_EQ(injected_forward_backward(m, b).loss, tinylm::forward_loss(f.student, b));
}

TEST(BuildInjectedModel, LoraResidualAddsTeacherTerm) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kLoraResidual);
  for (const auto& [name, t] : m.lora) {
    EXPECT_FALSE(t.init.subtract.has_value());
    const DenseMatrix& base = m.base.params.at(name);
    const DenseMatrix expected = factorize_extracted(f.plan.matrices.at(name).values, 4).subtract.value();
    EXPECT_EQ(effective_weight(base, t.init, t.semantics) - base,
              (base + linalg::matmul(t.init.b, t.init.a)) - base);
    EXPECT_LE(rel_diff(effective_weight(base, t.init, t.semantics) - base, expected), 1e-12) << name;
  }
}

TEST(BuildInjectedModel, RandomSubmatrixUsesRedrawnBlocks) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kRandomSubmatrix);
  const extract::ExtractionPlan rnd = extract::randomize_plan(f.plan, f.teacher, 5);
  for (const auto& [name, t] : m.lora) {
    const DenseMatrix& base = m.base.params.at(name);
    EXPECT_LE(rel_diff(effective_weight(base, t.init, t.semantics), base), 1e-6) << name;
    EXPECT_EQ(*t.init.subtract, factorize_extracted(rnd.matrices.at(name).values, 4).subtract.value()) << name;
  }
  InjectOptions opts;
  opts.init = {InitStrategy::kRandomSubmatrix, 5};
  EXPECT_EQ(kind_of([&] { build_injected_model(f.student, f.plan, opts); }), ErrorKind::kConfig);
}

TEST(BuildInjectedModel, UncoveredTargetsFallBackToGaussianZero) {
  extract::ExtractionOptions eo;
  eo.roles = {extract::RoleGroup::kFfn};
  const Fixture f(eo);
  const InjectedModel m = f.inject(InitStrategy::kPaperDefault);
  EXPECT_EQ(m.lora.at("layer0.ffn.w2").semantics, InitStrategy::kPaperDefault);
  EXPECT_EQ(m.lora.at("layer0.attn.wq").semantics, InitStrategy::kGaussianZero);
  EXPECT_EQ(m.lora.at("embed.tok").semantics, InitStrategy::kGaussianZero);
}

TEST(BuildInjectedModel, Errors) {
  const Fixture f;
  EXPECT_EQ(kind_of([&] { f.inject(InitStrategy::kPaperDefault, 9); }), ErrorKind::kRank);
  EXPECT_EQ(kind_of([&] { f.inject(InitStrategy::kGaussianZero, 9); }), ErrorKind::kRank);
  ModelConfig other = student_config();
  other.hidden_dim = 4;
  const tinylm::Model wrong = tinylm::init_model(other);
  EXPECT_EQ(kind_of([&] { build_injected_model(wrong, f.plan, {}); }), ErrorKind::kConfig);
}

TEST(InjectedForwardBackward, GradientsCoverExactlyTheTargets) {
  const Fixture f;
  const InjectedModel m = f.inject(InitStrategy::kPaperDefault);
  const auto lg = injected_forward_backward(m, batch());
  ASSERT_EQ(lg.grad.size(), m.lora.size());
  for (const auto& [name, t] : m.lora) {
    ASSERT_TRUE(lg.grad.contains(name));
    EXPECT_EQ(lg.grad.at(name).b.rows(), t.init.b.rows());
    EXPECT_EQ(lg.grad.at(name).b.cols(), t.init.b.cols());
    EXPECT_EQ(lg.grad.at(name).a.rows(), t.init.a.rows());
    EXPECT_EQ(lg.grad.at(name).a.cols(), t.init.a.cols());
  }
}

TEST(InjectedForwardBackward, MatchesCentralFiniteDifferences) {
  const Fixture f;
  for (InitStrategy kind : {InitStrategy::kPaperDefault, InitStrategy::kLoraResidual}) {
    InjectedModel m = f.inject(kind, 2);
    const TokenBatch b = batch();
    const auto lg = injected_forward_backward(m, b);
    constexpr double kStep = 1e-4;
    auto loss = [&] { return tinylm::forward_loss(effective_model(m), b); };
    for (auto& [name, t] : m.lora) {
      for (DenseMatrix* factor : {&t.init.b, &t.init.a}) {
        const DenseMatrix& g = factor == &t.init.b ? lg.grad.at(name).b : lg.grad.at(name).a;
        auto values = factor->values();
        for (std::size_t i = 0; i < values.size(); ++i) {
          const double saved = values[i];
          values[i] = saved + kStep;
          const double up = loss();
          values[i] = saved - kStep;
          const double down = loss();
          values[i] = saved;
          const double fd = (up - down) / (2.0 * kStep);
          ASSERT_LE(std::abs(g.values()[i] - fd), 1e-5 + 1e-3 * std::abs(fd)) << name << "[" << i << "]";
        }
      }
    }
  }
}

TEST(InitStrategyNames, RoundTrip) {
  for (auto k : {InitStrategy::kPaperDefault, InitStrategy::kLoraResidual, InitStrategy::kGaussianZero,
                 InitStrategy::kRandomSubmatrix})
    EXPECT_EQ(init_strategy_from_string(to_string(k)), k);
  EXPECT_EQ(kind_of([] { init_strategy_from_string("xavier"); }), ErrorKind::kInvalidInput);
}
