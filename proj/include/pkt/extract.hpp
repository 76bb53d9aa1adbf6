// SPDX-License-Identifier: Apache-2.0
//
// Teacher -> student parameter extraction: sensitivity-ranked layer
// selection with order-preserving mapping, then per-matrix reduction to the
// student shape by maximizing the cumulative sensitivity of the kept cells.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pkt/linalg.hpp"
#include "pkt/sensitivity.hpp"
#include "pkt/tinylm.hpp"

namespace pkt::extract {

using linalg::DenseMatrix;

enum class LayerStrategy { kSensitivity, kTop, kLast, kRandom };

struct LayerStrategySpec {
  LayerStrategy kind = LayerStrategy::kSensitivity;
  std::uint64_t seed = 0;  // used by kRandom only
};

// teacher_layers[student_layer]; strictly increasing.
struct LayerMapping {
  std::vector<std::size_t> teacher_layers;
  LayerStrategySpec strategy;
};

LayerMapping select_layers(const sensitivity::LayerScores& scores, std::size_t student_layers,
                           LayerStrategySpec strategy);

enum class SubmatrixStrategy {
  kContiguous,
  kSubsetIndependent,
  kSubsetAlternating,
  kRandom,
  kNeuron,
  kRowCol,
};

struct SubmatrixStrategySpec {
  SubmatrixStrategy kind = SubmatrixStrategy::kContiguous;
  std::uint64_t seed = 0;  // used by kRandom only
};

struct SubmatrixSelection {
  std::size_t rows = 0;  // student shape
  std::size_t cols = 0;
  // Kept teacher rows / columns, ascending. Populated for the contiguous and
  // subset strategies; rowcol fills rows only; neuron leaves both empty.
  std::vector<std::size_t> row_indices;
  std::vector<std::size_t> col_indices;
  // Flat teacher index feeding each student cell, row-major over the
  // student shape. Always rows * cols long.
  std::vector<std::size_t> source_cells;
  double score = 0.0;
  SubmatrixStrategySpec strategy;
};

SubmatrixSelection select_submatrix(const DenseMatrix& sensitivity, std::size_t rows,
                                    std::size_t cols, SubmatrixStrategySpec strategy);

// extracted(i, j) = source.values()[source_cells[i * cols + j]]
DenseMatrix gather(const DenseMatrix& source, const SubmatrixSelection& selection);

enum class SubmatrixFamily { kContiguous, kSubset };

// Exhaustive optimum of the cumulative-sensitivity objective. The subset
// family is limited to sources of at most 12 x 12.
SubmatrixSelection brute_force_submatrix(const DenseMatrix& sensitivity, std::size_t rows,
                                         std::size_t cols, SubmatrixFamily family);

enum class RoleGroup { kEmbed, kAttn, kFfn, kHead };

struct ExtractionOptions {
  LayerStrategySpec layer;
  SubmatrixStrategySpec submatrix;
  std::set<RoleGroup> roles{RoleGroup::kEmbed, RoleGroup::kAttn, RoleGroup::kFfn, RoleGroup::kHead};
};

struct ExtractedMatrix {
  std::string teacher_name;
  SubmatrixSelection selection;
  DenseMatrix values;  // student shape
};

struct Provenance {
  std::string teacher_config_hash;
  std::vector<std::size_t> seed_sample_ids;
};

struct ExtractionPlan {
  LayerMapping mapping;
  std::map<std::string, ExtractedMatrix> matrices;  // keyed by student tensor name
  ExtractionOptions options;
  Provenance provenance;
};

ExtractionPlan build_extraction_plan(const tinylm::Model& teacher,
                                     const sensitivity::SensitivityMap& smap,
                                     const tinylm::ModelConfig& student_cfg,
                                     const ExtractionOptions& options,
                                     std::vector<std::size_t> seed_sample_ids = {});

// Same layer mapping and targets, but every selection replaced by uniformly
// random row/column index sets drawn from `seed`.
ExtractionPlan randomize_plan(const ExtractionPlan& plan, const tinylm::Model& teacher,
                              std::uint64_t seed);

std::string config_fingerprint(const tinylm::ModelConfig& cfg);

std::string_view to_string(LayerStrategy s);
std::string_view to_string(SubmatrixStrategy s);
std::string_view to_string(RoleGroup g);
LayerStrategy layer_strategy_from_string(std::string_view text);
SubmatrixStrategy submatrix_strategy_from_string(std::string_view text);
RoleGroup role_group_from_string(std::string_view text);

}  // namespace pkt::extract
