// SPDX-License-Identifier: Apache-2.0
#include "pkt/sensitivity.hpp"

#include <algorithm>
#include <cmath>

#include "pkt/error.hpp"

namespace pkt::sensitivity {

SensitivityMap& SensitivityMap::operator+=(const SensitivityMap& other) {
  require(scores.congruent(other.scores), ErrorKind::kShape, "sensitivity maps are not congruent");
  auto it = other.scores.begin();
  for (auto& [_, e] : scores) {
    auto dst = e.value.values();
    auto src = it->second.value.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    ++it;
  }
  sample_count += other.sample_count;
  return *this;
}

SensitivityMap sensitivity_from_gradient(const ParamStore& params, const ParamStore& grad) {
  require(params.congruent(grad), ErrorKind::kShape, "gradient is not congruent with parameters");
  SensitivityMap map{params.zeros_like(), 1};
  auto git = grad.begin();
  auto sit = map.scores.begin();
  for (const auto& [_, e] : params) {
    auto theta = e.value.values();
    auto g = git->second.value.values();
    auto s = sit->second.value.values();
    for (std::size_t i = 0; i < theta.size(); ++i) s[i] = std::abs(theta[i] * g[i]);
    ++git;
    ++sit;
  }
  return map;
}

SensitivityMap sample_sensitivity(const Model& model, const TokenBatch& sample) {
  require(sample.sequences.size() == 1, ErrorKind::kInvalidInput,
          "sample_sensitivity takes exactly one sequence, got " + std::to_string(sample.sequences.size()));
  return sensitivity_from_gradient(model.params, tinylm::backward(model, sample));
}

SensitivityMap accumulate_sensitivity(const Model& model, std::vector<SeedSample> seeds) {
  require(!seeds.empty(), ErrorKind::kInvalidInput, "no seed samples");
  std::stable_sort(seeds.begin(), seeds.end(),
                   [](const SeedSample& a, const SeedSample& b) { return a.id < b.id; });
  SensitivityMap total = sample_sensitivity(model, seeds.front().sample);
  for (std::size_t j = 1; j < seeds.size(); ++j) total += sample_sensitivity(model, seeds[j].sample);
  return total;
}

LayerScores layer_scores(const SensitivityMap& map) {
  int max_layer = -1;
  for (const auto& [_, e] : map.scores) max_layer = std::max(max_layer, e.name.layer);
  LayerScores out{std::vector<double>(static_cast<std::size_t>(max_layer + 1), 0.0)};
  for (const auto& [_, e] : map.scores) {
    if (e.name.layer < 0) continue;
    double& acc = out.per_layer[static_cast<std::size_t>(e.name.layer)];
    for (double v : e.value.values()) acc += v;
  }
  return out;
}

}  // namespace pkt::sensitivity
