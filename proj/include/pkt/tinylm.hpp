// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer with an analytic backward pass.
//
// Architecture: learned token + absolute position embeddings, pre-norm
// blocks (RMS norm -> causal multi-head attention -> residual, RMS norm ->
// SiLU-gated FFN -> residual), final RMS norm, untied output head.
// Weights act on row vectors (y = x W), so a projection from a to b is
// stored as an a x b matrix.
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pkt/linalg.hpp"

namespace pkt::tinylm {

using linalg::DenseMatrix;
using Token = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t max_seq_len = 16;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 16;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 32;
  std::uint64_t seed = 0;

  // Throws a config error when any invariant is violated.
  void validate() const;
  std::size_t head_dim() const { return hidden_dim / num_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Role {
  kEmbedTok,
  kEmbedPos,
  kAttnWq,
  kAttnWk,
  kAttnWv,
  kAttnWo,
  kFfnW1,
  kFfnW2,
  kFfnW3,
  kHeadOut,
  kNorm,  // 1-D scale vector; the qualifier says which norm
};

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);
bool is_matrix_role(Role role);

// The seven 2-D roles that live inside a transformer block.
inline constexpr Role kLayerMatrixRoles[] = {Role::kAttnWq, Role::kAttnWk, Role::kAttnWv,
                                             Role::kAttnWo, Role::kFfnW1,  Role::kFfnW2,
                                             Role::kFfnW3};

struct ParamName {
  int layer = -1;  // -1 for tensors outside the blocks
  Role role = Role::kEmbedTok;
  std::string qualifier;  // only used by norms: "attn", "ffn", "final"

  // "layer{i}.{role}[.{qualifier}]" or "{role}[.{qualifier}]"
  std::string str() const;
  static ParamName parse(std::string_view text);

  friend auto operator<=>(const ParamName&, const ParamName&) = default;
};

struct ParamEntry {
  ParamName name;
  DenseMatrix value;       // vectors are stored as 1 x n
  bool is_vector = false;

  std::vector<std::size_t> shape() const;
};

// Tensors keyed by canonical name; iteration is sorted by name.
class ParamStore {
 public:
  using Map = std::map<std::string, ParamEntry, std::less<>>;

  void insert(ParamName name, DenseMatrix value, bool is_vector = false);
  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  const ParamEntry& entry(std::string_view name) const;
  ParamEntry& entry(std::string_view name);
  const DenseMatrix& at(std::string_view name) const { return entry(name).value; }
  DenseMatrix& at(std::string_view name) { return entry(name).value; }
  const DenseMatrix& at(const ParamName& name) const { return at(name.str()); }
  DenseMatrix& at(const ParamName& name) { return at(name.str()); }

  std::size_t size() const { return entries_.size(); }
  std::size_t num_values() const;
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  // Same names and shapes, all zeros.
  ParamStore zeros_like() const;
  bool congruent(const ParamStore& other) const;

  friend bool operator==(const ParamStore&, const ParamStore&);

 private:
  Map entries_;
};

struct Model {
  ModelConfig config;
  ParamStore params;
};

struct TokenBatch {
  std::vector<std::vector<Token>> sequences;
  // loss_mask[s][t] marks token t of sequence s as a prediction target
  // (predicted from tokens [0, t)). Entry 0 can never be a target.
  std::vector<std::vector<bool>> loss_mask;

  // Full-sequence next-token prediction: every position masked in.
  static TokenBatch full_sequence(std::vector<std::vector<Token>> sequences);
  std::size_t num_targets() const;
};

// Expected tensor shape for a name under a config (rows, cols); vectors
// report rows == 1.
std::pair<std::size_t, std::size_t> expected_shape(const ModelConfig& cfg, const ParamName& name);
std::vector<ParamName> parameter_names(const ModelConfig& cfg);

Model init_model(const ModelConfig& cfg);

// Mean next-token cross-entropy over masked-in positions.
double forward_loss(const Model& model, const TokenBatch& batch);

struct LossAndGrad {
  double loss = 0.0;
  ParamStore grad;
};
LossAndGrad loss_and_grad(const Model& model, const TokenBatch& batch);
ParamStore backward(const Model& model, const TokenBatch& batch);

// Logits (vocab_size) at the last position of the sequence.
std::vector<double> next_token_logits(const Model& model, const std::vector<Token>& tokens);

// Greedy decoding; ties go to the lowest token id. Stops early when the
// sequence reaches max_seq_len.
std::vector<Token> generate(const Model& model, const std::vector<Token>& prompt,
                            std::size_t max_new);

void validate_batch(const ModelConfig& cfg, const TokenBatch& batch);

}  // namespace pkt::tinylm
