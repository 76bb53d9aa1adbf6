// SPDX-License-Identifier: Apache-2.0
//
// First-order parameter sensitivity: S_ij = |theta_i * dL(x_j)/dtheta_i|,
// accumulated over seed samples and aggregated per transformer layer.
#pragma once

#include <cstddef>
#include <vector>

#include "pkt/tinylm.hpp"

namespace pkt::sensitivity {

using tinylm::Model;
using tinylm::ParamStore;
using tinylm::TokenBatch;

struct SensitivityMap {
  ParamStore scores;  // same names and shapes as the model, entries >= 0
  std::size_t sample_count = 0;

  SensitivityMap& operator+=(const SensitivityMap& other);
};

// A seed sample and its position in the canonical accumulation order.
struct SeedSample {
  std::size_t id = 0;
  TokenBatch sample;  // exactly one sequence
};

// |theta * g| elementwise for stored values; sample_count = 1.
SensitivityMap sensitivity_from_gradient(const ParamStore& params, const ParamStore& grad);

SensitivityMap sample_sensitivity(const Model& model, const TokenBatch& sample);

// Sum of per-sample maps in ascending seed id order, so any permutation of
// the input produces bit-identical output.
SensitivityMap accumulate_sensitivity(const Model& model, std::vector<SeedSample> seeds);

struct LayerScores {
  std::vector<double> per_layer;
};

// Sums every tensor (matrices and norm vectors) whose layer index is l.
// Embeddings, the final norm and the head are excluded.
LayerScores layer_scores(const SensitivityMap& map);

}  // namespace pkt::sensitivity
