// SPDX-License-Identifier: Apache-2.0
#include "pkt/inject.hpp"

#include <algorithm>

#include "pkt/error.hpp"
#include "pkt/rng.hpp"

namespace pkt::inject {

using tinylm::ParamName;
using tinylm::Role;

LoraInit factorize_extracted(const DenseMatrix& w, std::size_t rank) {
  linalg::LowRankFactors f = linalg::truncated_factors(linalg::svd(w), rank);
  DenseMatrix product = linalg::matmul(f.b, f.a);
  return {std::move(f.b), std::move(f.a), std::move(product), rank};
}

LoraInit gaussian_zero_init(std::size_t rows, std::size_t cols, std::size_t rank, Rng& rng,
                            double stddev) {
  require(rank >= 1 && rank <= std::min(rows, cols), ErrorKind::kRank,
          "rank " + std::to_string(rank) + " out of range for " + std::to_string(rows) + "x" +
              std::to_string(cols));
  DenseMatrix b(rows, rank);
  for (double& v : b.values()) v = rng.normal(0.0, stddev);
  return {std::move(b), DenseMatrix(rank, cols), std::nullopt, rank};
}

namespace {

bool subtracts(InitStrategy s) {
  return s == InitStrategy::kPaperDefault || s == InitStrategy::kRandomSubmatrix;
}

}  // namespace

DenseMatrix effective_weight(const DenseMatrix& base, const LoraInit& init, InitStrategy semantics) {
  require(init.b.rows() == base.rows() && init.a.cols() == base.cols() && init.b.cols() == init.a.rows(),
          ErrorKind::kShape, "LoRA factors do not match the base weight");
  DenseMatrix out = base;
  if (subtracts(semantics)) {
    require(init.subtract.has_value(), ErrorKind::kState, "strategy requires a subtract term");
    require(init.subtract->rows() == base.rows() && init.subtract->cols() == base.cols(), ErrorKind::kShape,
            "subtract term does not match the base weight");
    out = out - *init.subtract;
  }
  return out + linalg::matmul(init.b, init.a);
}

std::vector<std::string> lora_target_names(const tinylm::ModelConfig& cfg, const InjectOptions& options) {
  using extract::RoleGroup;
  std::vector<std::string> names;
  for (const ParamName& n : tinylm::parameter_names(cfg)) {
    bool wanted = false;
    switch (n.role) {
      case Role::kEmbedTok: wanted = options.targets.contains(RoleGroup::kEmbed); break;
      case Role::kAttnWq:
      case Role::kAttnWk:
      case Role::kAttnWv:
      case Role::kAttnWo: wanted = options.targets.contains(RoleGroup::kAttn); break;
      case Role::kFfnW1:
      case Role::kFfnW2:
      case Role::kFfnW3: wanted = options.targets.contains(RoleGroup::kFfn); break;
      case Role::kHeadOut: wanted = options.targets.contains(RoleGroup::kHead); break;
      default: break;
    }
    if (wanted) names.push_back(n.str());
  }
  std::sort(names.begin(), names.end());
  return names;
}

InjectedModel build_injected_model(const tinylm::Model& student, const extract::ExtractionPlan& plan,
                                   const InjectOptions& options, const tinylm::Model* teacher) {
  const InitStrategy kind = options.init.kind;
  const extract::ExtractionPlan* source = &plan;
  extract::ExtractionPlan randomized;
  if (kind == InitStrategy::kRandomSubmatrix) {
    require(teacher != nullptr, ErrorKind::kConfig, "random_submatrix needs the teacher model");
    randomized = extract::randomize_plan(plan, *teacher, options.init.seed);
    source = &randomized;
  }

  for (const auto& [name, m] : plan.matrices) {
    require(student.params.contains(name), ErrorKind::kConfig, "plan tensor " + name + " missing from student");
    const DenseMatrix& w = student.params.at(name);
    require(w.rows() == m.values.rows() && w.cols() == m.values.cols(), ErrorKind::kConfig,
            "plan tensor " + name + " does not match the student shape");
  }

  InjectedModel out{student, {}, options.init};
  for (const std::string& name : lora_target_names(student.config, options)) {
    const DenseMatrix& w = student.params.at(name);
    const auto it = source->matrices.find(name);
    LoraTarget target;
    if (kind == InitStrategy::kGaussianZero || it == source->matrices.end()) {
      Rng rng(options.init.seed, "lora_gaussian:" + name);
      target.init = gaussian_zero_init(w.rows(), w.cols(), options.rank, rng, options.gaussian_std);
      target.semantics = InitStrategy::kGaussianZero;
    } else {
      target.init = factorize_extracted(it->second.values, options.rank);
      target.semantics = kind;
      if (kind == InitStrategy::kLoraResidual) target.init.subtract.reset();
    }
    out.lora.emplace(name, std::move(target));
  }
  return out;
}

tinylm::Model effective_model(const InjectedModel& m) {
  tinylm::Model out = m.base;
  for (const auto& [name, t] : m.lora) out.params.at(name) = effective_weight(m.base.params.at(name), t.init, t.semantics);
  return out;
}

InjectedLossAndGrad injected_forward_backward(const InjectedModel& m, const tinylm::TokenBatch& batch) {
  tinylm::LossAndGrad lg = tinylm::loss_and_grad(effective_model(m), batch);
  InjectedLossAndGrad out{lg.loss, {}};
  for (const auto& [name, t] : m.lora) {
    // W = base - S + B A, so dL/dB = G A^T and dL/dA = B^T G.
    const DenseMatrix& g = lg.grad.at(name);
    out.grad.emplace(name, LoraGrad{linalg::matmul(g, t.init.a.transpose()),
                                    linalg::matmul(t.init.b.transpose(), g)});
  }
  return out;
}

namespace {

constexpr std::pair<InitStrategy, std::string_view> kNames[] = {
    {InitStrategy::kPaperDefault, "paper_default"},
    {InitStrategy::kLoraResidual, "lora_residual"},
    {InitStrategy::kGaussianZero, "gaussian_zero"},
    {InitStrategy::kRandomSubmatrix, "random_submatrix"},
};

}  // namespace

std::string_view to_string(InitStrategy s) {
  for (const auto& [k, n] : kNames)
    if (k == s) return n;
  return "?";
}

InitStrategy init_strategy_from_string(std::string_view text) {
  for (const auto& [k, n] : kNames)
    if (n == text) return k;
  fail(ErrorKind::kInvalidInput, "unknown init strategy '" + std::string(text) + "'");
}

}  // namespace pkt::inject
