// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks, full-parameter and LoRA-only training with Adam, and
// greedy exact-match evaluation.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pkt/inject.hpp"
#include "pkt/tinylm.hpp"

namespace pkt::train {

using linalg::DenseMatrix;
using tinylm::Token;

// Every task shares one character-level vocabulary.
inline constexpr std::string_view kAlphabet = "0123456789abcdef+=|";
inline constexpr std::size_t kVocabSize = kAlphabet.size();

std::vector<Token> encode(std::string_view text);
std::string decode(const std::vector<Token>& tokens);

enum class TaskKind { kModularAdd, kCopy, kReverse, kSortDigits };

struct TaskSpec {
  TaskKind kind = TaskKind::kModularAdd;
  std::size_t n_train = 1000;
  std::size_t n_eval = 200;
  std::uint64_t seed = 0;
  // modular_add: operands and result in [0, modulus), zero-padded to the
  // digit width of modulus - 1.
  std::size_t modulus = 10;
  // copy / reverse / sort_digits: input length range.
  std::size_t min_len = 1;
  std::size_t max_len = 6;
};

struct Example {
  std::string prompt;
  std::string completion;

  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskDataset {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> eval;  // prompts disjoint from train
};

TaskDataset make_task(const TaskSpec& spec);

// Concatenates the train and eval splits of several datasets and shuffles
// each split with `seed`.
TaskDataset mix_tasks(const std::vector<TaskDataset>& parts, std::uint64_t seed);

// Longest prompt + completion in either split.
std::size_t max_example_length(const TaskDataset& data);

enum class LossMask { kAnswerOnly, kFullSequence };

tinylm::TokenBatch make_batch(const std::vector<Example>& examples, LossMask mask);

struct Hyperparams {
  std::size_t epochs = 3;
  std::size_t batch_size = 64;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
  LossMask mask = LossMask::kAnswerOnly;
  std::uint64_t seed = 0;  // batch order

  void validate() const;
};

// Adam over a fixed, ordered set of tensors.
class Adam {
 public:
  explicit Adam(const Hyperparams& hp) : hp_(hp) {}

  // params[i] and grads[i] must keep their sizes across calls.
  void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads);
  std::size_t steps() const { return t_; }

 private:
  Hyperparams hp_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Scales grads in place so their joint L2 norm is at most max_norm and
// returns the norm before scaling.
double clip_global_norm(const std::vector<std::span<double>>& grads, double max_norm);

struct TrainLog {
  std::vector<double> losses;  // one per optimizer step
  std::vector<double> grad_norms;  // before clipping
  std::size_t clipped_steps = 0;
  double eval_accuracy = -1.0;  // < 0 until evaluated
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  double clip_norm = 0.0;
  LossMask mask = LossMask::kAnswerOnly;
};

// Full-parameter training of `model` in place.
TrainLog train_full(tinylm::Model& model, const std::vector<Example>& train, const Hyperparams& hp);

struct TrainedModel {
  tinylm::Model model;
  TrainLog log;
};
TrainedModel train_teacher(const tinylm::ModelConfig& cfg, const TaskDataset& data, const Hyperparams& hp);

struct FinetunedModel {
  inject::InjectedModel model;
  TrainLog log;
};
// Adam over the LoRA b and a tensors only; base and subtract are untouched.
FinetunedModel finetune(inject::InjectedModel m, const TaskDataset& data, const Hyperparams& hp);

// Anything that can greedily continue a prompt.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<Token> generate(const std::vector<Token>& prompt, std::size_t max_new) const = 0;
};

class ModelGenerator final : public Generator {
 public:
  explicit ModelGenerator(const tinylm::Model& model) : model_(model) {}
  std::size_t vocab_size() const override { return model_.config.vocab_size; }
  std::vector<Token> generate(const std::vector<Token>& prompt, std::size_t max_new) const override {
    return tinylm::generate(model_, prompt, max_new);
  }

 private:
  const tinylm::Model& model_;
};

// Decodes exactly len(completion) tokens per prompt and counts exact
// matches.
double evaluate_exact_match(const Generator& g, const std::vector<Example>& eval);
double evaluate_exact_match(const tinylm::Model& m, const std::vector<Example>& eval);
double evaluate_exact_match(const inject::InjectedModel& m, const std::vector<Example>& eval);

std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view text);
std::string_view to_string(LossMask m);
LossMask loss_mask_from_string(std::string_view text);

}  // namespace pkt::train
