// SPDX-License-Identifier: Apache-2.0
#include "pkt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "pkt/error.hpp"
#include "pkt/rng.hpp"

namespace pkt::train {

std::vector<Token> encode(std::string_view text) {
  std::vector<Token> out;
  out.reserve(text.size());
  for (char c : text) {
    const auto pos = kAlphabet.find(c);
    require(pos != std::string_view::npos, ErrorKind::kData, std::string("character '") + c + "' not in vocabulary");
    out.push_back(static_cast<Token>(pos));
  }
  return out;
}

std::string decode(const std::vector<Token>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    require(t < kVocabSize, ErrorKind::kData, "token " + std::to_string(t) + " not in vocabulary");
    out.push_back(kAlphabet[t]);
  }
  return out;
}

namespace {

std::size_t digit_width(std::size_t value) {
  std::size_t w = 1;
  while (value >= 10) {
    value /= 10;
    ++w;
  }
  return w;
}

std::string padded(std::size_t value, std::size_t width) {
  std::string s = std::to_string(value);
  return std::string(width - s.size(), '0') + s;
}

// Number of distinct strings with lengths in [lo, hi] over `symbols`
// symbols, saturating at `cap`.
std::size_t string_universe(std::size_t symbols, std::size_t lo, std::size_t hi, std::size_t cap) {
  std::size_t total = 0;
  for (std::size_t len = lo; len <= hi && total < cap; ++len) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < len && count < cap; ++i) count *= symbols;
    total += std::min(count, cap);
  }
  return std::min(total, cap);
}

Example transform_example(TaskKind kind, std::string input) {
  std::string out = input;
  if (kind == TaskKind::kReverse) std::reverse(out.begin(), out.end());
  if (kind == TaskKind::kSortDigits) std::sort(out.begin(), out.end());
  return {input + "|", out};
}

}  // namespace

TaskDataset make_task(const TaskSpec& spec) {
  require(spec.n_train >= 1 && spec.n_eval >= 1, ErrorKind::kInvalidInput, "task needs at least one train and one eval example");
  const std::size_t total = spec.n_train + spec.n_eval;
  Rng rng(spec.seed, std::string("make_task:") + std::string(to_string(spec.kind)));
  std::vector<Example> examples;
  examples.reserve(total);

  if (spec.kind == TaskKind::kModularAdd) {
    require(spec.modulus >= 2, ErrorKind::kInvalidInput, "modulus must be at least 2");
    const std::size_t universe = spec.modulus * spec.modulus;
    require(total <= universe, ErrorKind::kInvalidInput,
            "modulus " + std::to_string(spec.modulus) + " admits only " + std::to_string(universe) +
                " distinct problems, " + std::to_string(total) + " requested");
    const std::size_t width = digit_width(spec.modulus - 1);
    std::vector<std::size_t> ids = rng.sample_sorted(universe, total);
    rng.shuffle(ids);
    for (std::size_t id : ids) {
      const std::size_t a = id / spec.modulus, b = id % spec.modulus;
      examples.push_back({padded(a, width) + "+" + padded(b, width) + "=",
                          padded((a + b) % spec.modulus, width)});
    }
  } else {
    require(spec.min_len >= 1 && spec.min_len <= spec.max_len, ErrorKind::kInvalidInput, "invalid length range");
    const std::string_view symbols = spec.kind == TaskKind::kSortDigits ? kAlphabet.substr(0, 10) : kAlphabet.substr(10, 6);
    require(string_universe(symbols.size(), spec.min_len, spec.max_len, total) >= total, ErrorKind::kInvalidInput,
            "length range admits fewer than " + std::to_string(total) + " distinct inputs");
    std::set<std::string> seen;
    while (examples.size() < total) {
      const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
      std::string input(len, ' ');
      for (char& c : input) c = symbols[rng.below(symbols.size())];
      if (seen.insert(input).second) examples.push_back(transform_example(spec.kind, std::move(input)));
    }
  }

  TaskDataset out{spec, {}, {}};
  out.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  out.eval.assign(examples.begin() + static_cast<std::ptrdiff_t>(spec.n_train), examples.end());
  return out;
}

TaskDataset mix_tasks(const std::vector<TaskDataset>& parts, std::uint64_t seed) {
  require(!parts.empty(), ErrorKind::kInvalidInput, "no datasets to mix");
  TaskDataset out{parts.front().spec, {}, {}};
  for (const TaskDataset& p : parts) {
    out.train.insert(out.train.end(), p.train.begin(), p.train.end());
    out.eval.insert(out.eval.end(), p.eval.begin(), p.eval.end());
  }
  Rng rng(seed, "mix_tasks");
  rng.shuffle(out.train);
  rng.shuffle(out.eval);
  return out;
}

std::size_t max_example_length(const TaskDataset& data) {
  std::size_t n = 0;
  for (const auto* split : {&data.train, &data.eval})
    for (const Example& e : *split) n = std::max(n, e.prompt.size() + e.completion.size());
  return n;
}

tinylm::TokenBatch make_batch(const std::vector<Example>& examples, LossMask mask) {
  tinylm::TokenBatch batch;
  for (const Example& e : examples) {
    std::vector<Token> seq = encode(e.prompt);
    const std::size_t prompt_len = seq.size();
    const std::vector<Token> completion = encode(e.completion);
    seq.insert(seq.end(), completion.begin(), completion.end());
    std::vector<bool> m(seq.size(), mask == LossMask::kFullSequence);
    if (mask == LossMask::kAnswerOnly)
      for (std::size_t t = prompt_len; t < seq.size(); ++t) m[t] = true;
    batch.sequences.push_back(std::move(seq));
    batch.loss_mask.push_back(std::move(m));
  }
  return batch;
}

void Hyperparams::validate() const {
  require(batch_size >= 1, ErrorKind::kConfig, "batch_size must be positive");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::kConfig,
          "learning_rate must be finite and nonnegative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::kConfig,
          "Adam betas must lie in [0, 1)");
  require(epsilon > 0.0, ErrorKind::kConfig, "Adam epsilon must be positive");
}

void Adam::step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
  require(params.size() == grads.size(), ErrorKind::kShape, "parameter and gradient lists differ in length");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  require(m_.size() == params.size(), ErrorKind::kShape, "optimizer parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto p = params[k];
    const auto g = grads[k];
    require(p.size() == m_[k].size() && g.size() == p.size(), ErrorKind::kShape, "optimizer tensor size changed");
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hp_.beta1 * m[i] + (1.0 - hp_.beta1) * g[i];
      v[i] = hp_.beta2 * v[i] + (1.0 - hp_.beta2) * g[i] * g[i];
      p[i] -= hp_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + hp_.epsilon);
    }
  }
}

double clip_global_norm(const std::vector<std::span<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& g : grads)
      for (double& x : g) x *= scale;
  }
  return norm;
}

namespace {

struct StepResult {
  double loss = 0.0;
  std::vector<DenseMatrix> grads;  // same order as the parameter list
};

// Shared epoch / batch / clip / Adam loop. `compute` evaluates one batch.
template <typename Compute>
TrainLog run_training(const std::vector<Example>& train, const Hyperparams& hp,
                      const std::vector<std::span<double>>& params, Compute compute) {
  hp.validate();
  TrainLog log;
  log.seed = hp.seed;
  log.clip_norm = hp.clip_norm;
  log.mask = hp.mask;
  const auto start = std::chrono::steady_clock::now();
  if (hp.epochs > 0) require(!train.empty(), ErrorKind::kInvalidInput, "empty training set");

  Adam adam(hp);
  Rng rng(hp.seed, "batch_order");
  std::vector<std::size_t> order(train.size());
  std::vector<Example> chunk;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t first = 0; first < order.size(); first += hp.batch_size) {
      const std::size_t last = std::min(order.size(), first + hp.batch_size);
      chunk.clear();
      for (std::size_t i = first; i < last; ++i) chunk.push_back(train[order[i]]);
      StepResult r = compute(make_batch(chunk, hp.mask));
      const std::size_t step = log.losses.size();
      require(std::isfinite(r.loss), ErrorKind::kTraining, "non-finite loss at step " + std::to_string(step));

      std::vector<std::span<double>> g;
      for (DenseMatrix& m : r.grads) g.push_back(m.values());
      const double norm = clip_global_norm(g, hp.clip_norm);
      require(std::isfinite(norm), ErrorKind::kTraining, "non-finite gradient at step " + std::to_string(step));
      if (hp.clip_norm > 0.0 && norm > hp.clip_norm) ++log.clipped_steps;

      adam.step(params, {g.begin(), g.end()});
      log.losses.push_back(r.loss);
      log.grad_norms.push_back(norm);
    }
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace

TrainLog train_full(tinylm::Model& model, const std::vector<Example>& train, const Hyperparams& hp) {
  std::vector<std::span<double>> params;
  for (auto& [_, e] : model.params) params.push_back(e.value.values());
  return run_training(train, hp, params, [&](const tinylm::TokenBatch& batch) {
    tinylm::LossAndGrad lg = tinylm::loss_and_grad(model, batch);
    StepResult r{lg.loss, {}};
    for (auto& [_, e] : lg.grad) r.grads.push_back(std::move(e.value));
    return r;
  });
}

TrainedModel train_teacher(const tinylm::ModelConfig& cfg, const TaskDataset& data, const Hyperparams& hp) {
  TrainedModel out{tinylm::init_model(cfg), {}};
  out.log = train_full(out.model, data.train, hp);
  return out;
}

FinetunedModel finetune(inject::InjectedModel m, const TaskDataset& data, const Hyperparams& hp) {
  FinetunedModel out{std::move(m), {}};
  std::vector<std::span<double>> params;
  for (auto& [_, t] : out.model.lora) {
    params.push_back(t.init.b.values());
    params.push_back(t.init.a.values());
  }
  out.log = run_training(data.train, hp, params, [&](const tinylm::TokenBatch& batch) {
    inject::InjectedLossAndGrad lg = inject::injected_forward_backward(out.model, batch);
    StepResult r{lg.loss, {}};
    for (auto& [_, g] : lg.grad) {
      r.grads.push_back(std::move(g.b));
      r.grads.push_back(std::move(g.a));
    }
    return r;
  });
  return out;
}

double evaluate_exact_match(const Generator& g, const std::vector<Example>& eval) {
  require(!eval.empty(), ErrorKind::kInvalidInput, "empty evaluation set");
  require(g.vocab_size() == kVocabSize, ErrorKind::kData,
          "model vocabulary " + std::to_string(g.vocab_size()) + " does not match task vocabulary " +
              std::to_string(kVocabSize));
  std::size_t hits = 0;
  for (const Example& e : eval) {
    const std::vector<Token> prompt = encode(e.prompt);
    const std::vector<Token> out = g.generate(prompt, e.completion.size());
    if (out.size() == prompt.size() + e.completion.size() &&
        decode({out.begin() + static_cast<std::ptrdiff_t>(prompt.size()), out.end()}) == e.completion)
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval.size());
}

double evaluate_exact_match(const tinylm::Model& m, const std::vector<Example>& eval) {
  return evaluate_exact_match(ModelGenerator(m), eval);
}

double evaluate_exact_match(const inject::InjectedModel& m, const std::vector<Example>& eval) {
  const tinylm::Model effective = inject::effective_model(m);
  return evaluate_exact_match(ModelGenerator(effective), eval);
}

namespace {

constexpr std::pair<TaskKind, std::string_view> kTaskNames[] = {
    {TaskKind::kModularAdd, "modular_add"},
    {TaskKind::kCopy, "copy"},
    {TaskKind::kReverse, "reverse"},
    {TaskKind::kSortDigits, "sort_digits"},
};

constexpr std::pair<LossMask, std::string_view> kMaskNames[] = {
    {LossMask::kAnswerOnly, "answer_only"},
    {LossMask::kFullSequence, "full_sequence"},
};

}  // namespace

std::string_view to_string(TaskKind k) {
  for (const auto& [v, n] : kTaskNames)
    if (v == k) return n;
  return "?";
}

TaskKind task_kind_from_string(std::string_view text) {
  for (const auto& [v, n] : kTaskNames)
    if (n == text) return v;
  fail(ErrorKind::kInvalidInput, "unknown task '" + std::string(text) + "'");
}

std::string_view to_string(LossMask m) {
  for (const auto& [v, n] : kMaskNames)
    if (v == m) return n;
  return "?";
}

LossMask loss_mask_from_string(std::string_view text) {
  for (const auto& [v, n] : kMaskNames)
    if (n == text) return v;
  fail(ErrorKind::kInvalidInput, "unknown loss mask '" + std::string(text) + "'");
}

}  // namespace pkt::train
