// SPDX-License-Identifier: Apache-2.0
//
// LoRA initialization from extracted teacher matrices. Each target weight
// W of the student becomes W - S + B A, where B A is the rank-r SVD
// truncation of the extracted teacher block and S is a frozen copy of B A
// taken at construction, so training starts exactly from W. Only B and A
// are trainable.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pkt/extract.hpp"
#include "pkt/linalg.hpp"
#include "pkt/rng.hpp"
#include "pkt/tinylm.hpp"

namespace pkt::inject {

using linalg::DenseMatrix;

enum class InitStrategy {
  kPaperDefault,     // W - S + B A with B A from the extracted block
  kLoraResidual,     // W + B A with B A from the extracted block
  kGaussianZero,     // B ~ N(0, 0.02), A = 0
  kRandomSubmatrix,  // as kPaperDefault, on randomly selected blocks
};

struct InitSpec {
  InitStrategy kind = InitStrategy::kPaperDefault;
  std::uint64_t seed = 0;  // Gaussian draws and random block selection
};

struct LoraInit {
  DenseMatrix b;                       // rows x rank
  DenseMatrix a;                       // rank x cols
  std::optional<DenseMatrix> subtract; // frozen, rows x cols
  std::size_t rank = 0;
};

// B = U[:, :r] diag(sigma[:r]), A = Vt[:r, :], subtract = B A.
LoraInit factorize_extracted(const DenseMatrix& w, std::size_t rank);

// Zero-effect initialization: B Gaussian, A zero, no subtract term.
LoraInit gaussian_zero_init(std::size_t rows, std::size_t cols, std::size_t rank, Rng& rng,
                            double stddev = 0.02);

// kPaperDefault and kRandomSubmatrix: base - subtract + b a (subtract
// required). Others: base + b a.
DenseMatrix effective_weight(const DenseMatrix& base, const LoraInit& init, InitStrategy semantics);

struct LoraTarget {
  LoraInit init;
  // Semantics used by effective_weight. Targets that the extraction plan
  // does not cover fall back to kGaussianZero.
  InitStrategy semantics = InitStrategy::kGaussianZero;
};

struct InjectedModel {
  tinylm::Model base;                       // frozen
  std::map<std::string, LoraTarget> lora;   // keyed by student tensor name
  InitSpec strategy;
};

struct InjectOptions {
  std::size_t rank = 16;
  InitSpec init;
  // Student tensors that receive a LoRA module. The embed group targets the
  // token embedding only.
  std::set<extract::RoleGroup> targets{extract::RoleGroup::kEmbed, extract::RoleGroup::kAttn,
                                       extract::RoleGroup::kFfn};
  double gaussian_std = 0.02;
};

// Names of the student tensors that the options target, sorted.
std::vector<std::string> lora_target_names(const tinylm::ModelConfig& cfg, const InjectOptions& options);

// `teacher` is needed only by kRandomSubmatrix, which redraws the plan's
// blocks before factorization.
InjectedModel build_injected_model(const tinylm::Model& student, const extract::ExtractionPlan& plan,
                                   const InjectOptions& options,
                                   const tinylm::Model* teacher = nullptr);

// Base with every target replaced by its effective weight.
tinylm::Model effective_model(const InjectedModel& m);

struct LoraGrad {
  DenseMatrix b;
  DenseMatrix a;
};

struct InjectedLossAndGrad {
  double loss = 0.0;
  std::map<std::string, LoraGrad> grad;  // exactly the LoRA targets
};

InjectedLossAndGrad injected_forward_backward(const InjectedModel& m, const tinylm::TokenBatch& batch);

std::string_view to_string(InitStrategy s);
InitStrategy init_strategy_from_string(std::string_view text);

}  // namespace pkt::inject
