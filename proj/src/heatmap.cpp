// SPDX-License-Identifier: Apache-2.0
#include "pkt/heatmap.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "pkt/error.hpp"

namespace pkt::heatmap {

std::vector<double> min_max_normalize(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::clamp((values[i] - *lo) / range, 0.0, 1.0);
  return out;
}

Heatmap build_heatmap(const sensitivity::SensitivityMap& map) {
  int layers = -1;
  for (const auto& [name, e] : map.scores) layers = std::max(layers, e.name.layer);
  require(layers >= 0, ErrorKind::kInvalidInput, "sensitivity map has no block matrices");

  Heatmap h;
  for (tinylm::Role role : tinylm::kLayerMatrixRoles) {
    h.normalized.columns.emplace_back(tinylm::to_string(role));
    h.raw_sums.columns.emplace_back(tinylm::to_string(role));
  }
  const std::size_t n_layers = static_cast<std::size_t>(layers) + 1;
  const std::size_t n_cols = h.normalized.columns.size();
  h.normalized.cells.assign(n_layers, std::vector<double>(n_cols, 0.0));
  h.raw_sums.cells.assign(n_layers, std::vector<double>(n_cols, 0.0));

  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t c = 0; c < n_cols; ++c) {
      const tinylm::ParamName pn{static_cast<int>(l), tinylm::kLayerMatrixRoles[c], ""};
      if (!map.scores.contains(pn.str())) continue;
      const auto values = map.scores.at(pn).values();
      const std::vector<double> norm = min_max_normalize(values);
      double sum = 0.0, norm_sum = 0.0;
      for (double v : values) sum += v;
      for (double v : norm) norm_sum += v;
      h.raw_sums.cells[l][c] = sum;
      h.normalized.cells[l][c] = norm.empty() ? 0.0 : norm_sum / static_cast<double>(norm.size());
    }
  }
  return h;
}

std::string to_csv(const HeatmapTable& table) {
  std::string out = "layer";
  for (const std::string& c : table.columns) out += "," + c;
  out += "\n";
  char buf[32];
  for (std::size_t l = 0; l < table.cells.size(); ++l) {
    out += std::to_string(l);
    for (double v : table.cells[l]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  f << text;
  require(static_cast<bool>(f), ErrorKind::kIo, "write failed: " + path.string());
}

}  // namespace

HeatmapFiles export_heatmap(const sensitivity::SensitivityMap& map, const std::filesystem::path& path) {
  const Heatmap h = build_heatmap(map);
  HeatmapFiles files{path, path};
  files.raw_sums.replace_filename(path.stem().string() + "_raw" + path.extension().string());
  write_text(files.normalized, to_csv(h.normalized));
  write_text(files.raw_sums, to_csv(h.raw_sums));
  return files;
}

}  // namespace pkt::heatmap
