// SPDX-License-Identifier: Apache-2.0
//
// Layer-by-role sensitivity tables for plotting. Every matrix is min-max
// normalized on its own, then each cell reports the mean normalized score
// of one (layer, role) matrix. A companion table holds the raw sums.
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pkt/sensitivity.hpp"

namespace pkt::heatmap {

// (v - min) / (max - min); a constant input maps to all zeros.
std::vector<double> min_max_normalize(std::span<const double> values);

struct HeatmapTable {
  std::vector<std::string> columns;         // the seven block matrix roles
  std::vector<std::vector<double>> cells;   // [layer][column]
};

struct Heatmap {
  HeatmapTable normalized;  // mean of normalized scores, in [0, 1]
  HeatmapTable raw_sums;    // plain sum of scores
};

// Rows follow the model's layer order. The map must contain at least one
// block matrix.
Heatmap build_heatmap(const sensitivity::SensitivityMap& map);

std::string to_csv(const HeatmapTable& table);

struct HeatmapFiles {
  std::filesystem::path normalized;
  std::filesystem::path raw_sums;
};

// Writes `path` and a sibling "<stem>_raw<ext>" file.
HeatmapFiles export_heatmap(const sensitivity::SensitivityMap& map, const std::filesystem::path& path);

}  // namespace pkt::heatmap
