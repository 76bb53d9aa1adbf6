// SPDX-License-Identifier: Apache-2.0
#include "pkt/extract.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "pkt/error.hpp"
#include "pkt/rng.hpp"

namespace pkt::extract {

namespace {

// Indices of the k largest values, ties to the lower index, returned ascending.
std::vector<std::size_t> top_k_ascending(const std::vector<double>& values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

void fill_cells_from_indices(SubmatrixSelection& sel, std::size_t source_cols) {
  sel.source_cells.clear();
  sel.source_cells.reserve(sel.rows * sel.cols);
  for (std::size_t r : sel.row_indices)
    for (std::size_t c : sel.col_indices) sel.source_cells.push_back(r * source_cols + c);
}

double cells_score(const DenseMatrix& s, const std::vector<std::size_t>& cells) {
  double acc = 0.0;
  auto v = s.values();
  for (std::size_t idx : cells) acc += v[idx];
  return acc;
}

double subset_score(const DenseMatrix& s, const std::vector<std::size_t>& rows,
                    const std::vector<std::size_t>& cols) {
  double acc = 0.0;
  for (std::size_t r : rows)
    for (std::size_t c : cols) acc += s(r, c);
  return acc;
}

std::vector<double> row_sums(const DenseMatrix& s, const std::vector<std::size_t>& cols) {
  std::vector<double> out(s.rows(), 0.0);
  for (std::size_t r = 0; r < s.rows(); ++r)
    for (std::size_t c : cols) out[r] += s(r, c);
  return out;
}

std::vector<double> col_sums(const DenseMatrix& s, const std::vector<std::size_t>& rows) {
  std::vector<double> out(s.cols(), 0.0);
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < s.cols(); ++c) out[c] += s(r, c);
  return out;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void check_target(const DenseMatrix& s, std::size_t rows, std::size_t cols) {
  require(rows >= 1 && cols >= 1, ErrorKind::kShape, "target shape must be positive");
  require(rows <= s.rows() && cols <= s.cols(), ErrorKind::kShape,
          "target " + std::to_string(rows) + "x" + std::to_string(cols) + " larger than source " +
              std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
  for (double v : s.values())
    require(v >= 0.0, ErrorKind::kInvalidInput, "sensitivity entries must be nonnegative");
}

// Advances a sorted k-combination of [0, n) to the next one in
// lexicographic order; false after the last.
bool next_combination(std::vector<std::size_t>& comb, std::size_t n) {
  const std::size_t k = comb.size();
  for (std::size_t i = k; i-- > 0;) {
    if (comb[i] < n - k + i) {
      ++comb[i];
      for (std::size_t j = i + 1; j < k; ++j) comb[j] = comb[j - 1] + 1;
      return true;
    }
  }
  return false;
}

}  // namespace

LayerMapping select_layers(const sensitivity::LayerScores& scores, std::size_t student_layers,
                           LayerStrategySpec strategy) {
  const std::size_t teacher_layers = scores.per_layer.size();
  require(student_layers >= 1 && student_layers <= teacher_layers, ErrorKind::kShape,
          "cannot map " + std::to_string(student_layers) + " student layers from " +
              std::to_string(teacher_layers) + " teacher layers");
  LayerMapping mapping{{}, strategy};
  switch (strategy.kind) {
    case LayerStrategy::kSensitivity:
      mapping.teacher_layers = top_k_ascending(scores.per_layer, student_layers);
      break;
    case LayerStrategy::kTop:
      mapping.teacher_layers = iota_vec(student_layers);
      break;
    case LayerStrategy::kLast:
      for (std::size_t l = teacher_layers - student_layers; l < teacher_layers; ++l)
        mapping.teacher_layers.push_back(l);
      break;
    case LayerStrategy::kRandom: {
      Rng rng(strategy.seed, "select_layers");
      mapping.teacher_layers = rng.sample_sorted(teacher_layers, student_layers);
      break;
    }
  }
  return mapping;
}

SubmatrixSelection select_submatrix(const DenseMatrix& s, std::size_t rows, std::size_t cols,
                                    SubmatrixStrategySpec strategy) {
  check_target(s, rows, cols);
  SubmatrixSelection sel;
  sel.rows = rows;
  sel.cols = cols;
  sel.strategy = strategy;

  switch (strategy.kind) {
    case SubmatrixStrategy::kContiguous: {
      const linalg::WindowSelection w = linalg::max_sum_window(s, rows, cols);
      for (std::size_t i = 0; i < rows; ++i) sel.row_indices.push_back(w.top_row + i);
      for (std::size_t j = 0; j < cols; ++j) sel.col_indices.push_back(w.left_col + j);
      break;
    }
    case SubmatrixStrategy::kSubsetIndependent: {
      sel.row_indices = top_k_ascending(row_sums(s, iota_vec(s.cols())), rows);
      sel.col_indices = top_k_ascending(col_sums(s, iota_vec(s.rows())), cols);
      break;
    }
    case SubmatrixStrategy::kSubsetAlternating: {
      // Coordinate ascent: each half-step is the exact optimum given the
      // other index set, so the score cannot decrease.
      std::vector<std::size_t> col_idx = top_k_ascending(col_sums(s, iota_vec(s.rows())), cols);
      std::vector<std::size_t> row_idx;
      constexpr int kMaxIterations = 10;
      for (int it = 0; it < kMaxIterations; ++it) {
        std::vector<std::size_t> new_rows = top_k_ascending(row_sums(s, col_idx), rows);
        std::vector<std::size_t> new_cols = top_k_ascending(col_sums(s, new_rows), cols);
        const bool fixed = new_rows == row_idx && new_cols == col_idx;
        row_idx = std::move(new_rows);
        col_idx = std::move(new_cols);
        if (fixed) break;
      }
      sel.row_indices = std::move(row_idx);
      sel.col_indices = std::move(col_idx);
      break;
    }
    case SubmatrixStrategy::kRandom: {
      Rng rng(strategy.seed, "select_submatrix");
      sel.row_indices = rng.sample_sorted(s.rows(), rows);
      sel.col_indices = rng.sample_sorted(s.cols(), cols);
      break;
    }
    case SubmatrixStrategy::kNeuron: {
      // Top rows*cols individual cells, placed row-major in rank order.
      std::vector<double> flat(s.values().begin(), s.values().end());
      std::vector<std::size_t> order = iota_vec(flat.size());
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return flat[a] > flat[b]; });
      order.resize(rows * cols);
      sel.source_cells = std::move(order);
      break;
    }
    case SubmatrixStrategy::kRowCol: {
      // Top rows by full-row sum; each row contributes its own top `cols`
      // cells in ascending column order.
      sel.row_indices = top_k_ascending(row_sums(s, iota_vec(s.cols())), rows);
      for (std::size_t r : sel.row_indices) {
        std::vector<double> row(s.row(r).begin(), s.row(r).end());
        for (std::size_t c : top_k_ascending(row, cols)) sel.source_cells.push_back(r * s.cols() + c);
      }
      break;
    }
  }
  if (sel.source_cells.empty()) fill_cells_from_indices(sel, s.cols());
  sel.score = cells_score(s, sel.source_cells);
  return sel;
}

DenseMatrix gather(const DenseMatrix& source, const SubmatrixSelection& selection) {
  require(selection.source_cells.size() == selection.rows * selection.cols, ErrorKind::kShape,
          "selection cell count does not match its shape");
  DenseMatrix out(selection.rows, selection.cols);
  auto src = source.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    require(selection.source_cells[i] < src.size(), ErrorKind::kShape, "selection index out of bounds");
    dst[i] = src[selection.source_cells[i]];
  }
  return out;
}

SubmatrixSelection brute_force_submatrix(const DenseMatrix& s, std::size_t rows, std::size_t cols,
                                         SubmatrixFamily family) {
  check_target(s, rows, cols);
  SubmatrixSelection best;
  best.rows = rows;
  best.cols = cols;
  best.score = -1.0;
  if (family == SubmatrixFamily::kContiguous) {
    best.strategy.kind = SubmatrixStrategy::kContiguous;
    for (std::size_t top = 0; top + rows <= s.rows(); ++top) {
      for (std::size_t left = 0; left + cols <= s.cols(); ++left) {
        std::vector<std::size_t> r(rows), c(cols);
        std::iota(r.begin(), r.end(), top);
        std::iota(c.begin(), c.end(), left);
        const double score = subset_score(s, r, c);
        if (score > best.score) {
          best.score = score;
          best.row_indices = std::move(r);
          best.col_indices = std::move(c);
        }
      }
    }
  } else {
    require(s.rows() <= 12 && s.cols() <= 12, ErrorKind::kSize,
            "exhaustive subset search is limited to 12 x 12 sources");
    best.strategy.kind = SubmatrixStrategy::kSubsetAlternating;
    std::vector<std::size_t> r = iota_vec(rows);
    do {
      std::vector<std::size_t> c = iota_vec(cols);
      do {
        const double score = subset_score(s, r, c);
        if (score > best.score) {
          best.score = score;
          best.row_indices = r;
          best.col_indices = c;
        }
      } while (next_combination(c, s.cols()));
    } while (next_combination(r, s.rows()));
  }
  fill_cells_from_indices(best, s.cols());
  best.score = cells_score(s, best.source_cells);
  return best;
}

std::string config_fingerprint(const tinylm::ModelConfig& cfg) {
  char text[256];
  std::snprintf(text, sizeof text, "vocab=%zu;max_seq=%zu;layers=%zu;hidden=%zu;heads=%zu;ffn=%zu;seed=%llu",
                cfg.vocab_size, cfg.max_seq_len, cfg.num_layers, cfg.hidden_dim, cfg.num_heads,
                cfg.ffn_dim, static_cast<unsigned long long>(cfg.seed));
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return hex;
}

namespace {

struct Target {
  tinylm::ParamName student;
  tinylm::ParamName teacher;
};

std::vector<Target> plan_targets(const LayerMapping& mapping, const std::set<RoleGroup>& roles) {
  using tinylm::ParamName;
  using tinylm::Role;
  std::vector<Target> targets;
  if (roles.contains(RoleGroup::kEmbed)) {
    targets.push_back({{-1, Role::kEmbedTok, ""}, {-1, Role::kEmbedTok, ""}});
    targets.push_back({{-1, Role::kEmbedPos, ""}, {-1, Role::kEmbedPos, ""}});
  }
  for (std::size_t sl = 0; sl < mapping.teacher_layers.size(); ++sl) {
    const int s = static_cast<int>(sl);
    const int t = static_cast<int>(mapping.teacher_layers[sl]);
    if (roles.contains(RoleGroup::kAttn))
      for (Role r : {Role::kAttnWq, Role::kAttnWk, Role::kAttnWv, Role::kAttnWo})
        targets.push_back({{s, r, ""}, {t, r, ""}});
    if (roles.contains(RoleGroup::kFfn))
      for (Role r : {Role::kFfnW1, Role::kFfnW2, Role::kFfnW3}) targets.push_back({{s, r, ""}, {t, r, ""}});
  }
  if (roles.contains(RoleGroup::kHead))
    targets.push_back({{-1, Role::kHeadOut, ""}, {-1, Role::kHeadOut, ""}});
  return targets;
}

std::uint64_t matrix_seed(std::uint64_t seed, const std::string& student_name) {
  return seed ^ fnv1a64(student_name);
}

}  // namespace

ExtractionPlan build_extraction_plan(const tinylm::Model& teacher,
                                     const sensitivity::SensitivityMap& smap,
                                     const tinylm::ModelConfig& student_cfg,
                                     const ExtractionOptions& options,
                                     std::vector<std::size_t> seed_sample_ids) {
  const auto& tc = teacher.config;
  student_cfg.validate();
  require(tc.vocab_size == student_cfg.vocab_size, ErrorKind::kConfig,
          "teacher vocab " + std::to_string(tc.vocab_size) + " != student vocab " +
              std::to_string(student_cfg.vocab_size));
  require(tc.max_seq_len == student_cfg.max_seq_len, ErrorKind::kConfig,
          "teacher and student max_seq_len differ");
  require(student_cfg.hidden_dim <= tc.hidden_dim && student_cfg.ffn_dim <= tc.ffn_dim &&
              student_cfg.num_layers <= tc.num_layers,
          ErrorKind::kShape, "student dimensions exceed teacher dimensions");
  require(smap.scores.congruent(teacher.params), ErrorKind::kShape,
          "sensitivity map is not congruent with the teacher");
  require(!options.roles.empty(), ErrorKind::kInvalidInput, "no roles requested");

  ExtractionPlan plan;
  plan.options = options;
  plan.provenance = {config_fingerprint(tc), std::move(seed_sample_ids)};
  plan.mapping = select_layers(sensitivity::layer_scores(smap), student_cfg.num_layers, options.layer);

  for (const Target& t : plan_targets(plan.mapping, options.roles)) {
    const std::string sname = t.student.str();
    const std::string tname = t.teacher.str();
    auto [rows, cols] = tinylm::expected_shape(student_cfg, t.student);
    SubmatrixStrategySpec spec = options.submatrix;
    spec.seed = matrix_seed(spec.seed, sname);
    SubmatrixSelection sel = select_submatrix(smap.scores.at(tname), rows, cols, spec);
    DenseMatrix values = gather(teacher.params.at(tname), sel);
    plan.matrices.emplace(sname, ExtractedMatrix{tname, std::move(sel), std::move(values)});
  }
  return plan;
}

ExtractionPlan randomize_plan(const ExtractionPlan& plan, const tinylm::Model& teacher,
                              std::uint64_t seed) {
  ExtractionPlan out = plan;
  out.options.submatrix = {SubmatrixStrategy::kRandom, seed};
  for (auto& [sname, m] : out.matrices) {
    const DenseMatrix& source = teacher.params.at(m.teacher_name);
    SubmatrixSelection sel;
    sel.rows = m.selection.rows;
    sel.cols = m.selection.cols;
    sel.strategy = {SubmatrixStrategy::kRandom, matrix_seed(seed, sname)};
    Rng rng(sel.strategy.seed, "select_submatrix");
    sel.row_indices = rng.sample_sorted(source.rows(), sel.rows);
    sel.col_indices = rng.sample_sorted(source.cols(), sel.cols);
    fill_cells_from_indices(sel, source.cols());
    // No sensitivity is consulted here; the score is left at zero.
    m.values = gather(source, sel);
    m.selection = std::move(sel);
  }
  return out;
}

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view text, const std::pair<E, std::string_view> (&table)[N], const char* what) {
  for (const auto& [e, name] : table)
    if (name == text) return e;
  fail(ErrorKind::kInvalidInput, std::string("unknown ") + what + " '" + std::string(text) + "'");
}

template <typename E, std::size_t N>
std::string_view enum_name(E e, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [v, name] : table)
    if (v == e) return name;
  return "?";
}

constexpr std::pair<LayerStrategy, std::string_view> kLayerNames[] = {
    {LayerStrategy::kSensitivity, "sensitivity"},
    {LayerStrategy::kTop, "top"},
    {LayerStrategy::kLast, "last"},
    {LayerStrategy::kRandom, "random"},
};

constexpr std::pair<SubmatrixStrategy, std::string_view> kSubmatrixNames[] = {
    {SubmatrixStrategy::kContiguous, "contiguous"},
    {SubmatrixStrategy::kSubsetIndependent, "subset_independent"},
    {SubmatrixStrategy::kSubsetAlternating, "subset_alternating"},
    {SubmatrixStrategy::kRandom, "random"},
    {SubmatrixStrategy::kNeuron, "neuron"},
    {SubmatrixStrategy::kRowCol, "rowcol"},
};

constexpr std::pair<RoleGroup, std::string_view> kRoleGroupNames[] = {
    {RoleGroup::kEmbed, "embed"},
    {RoleGroup::kAttn, "attn"},
    {RoleGroup::kFfn, "ffn"},
    {RoleGroup::kHead, "head"},
};

}  // namespace

std::string_view to_string(LayerStrategy s) { return enum_name(s, kLayerNames); }
std::string_view to_string(SubmatrixStrategy s) { return enum_name(s, kSubmatrixNames); }
std::string_view to_string(RoleGroup g) { return enum_name(g, kRoleGroupNames); }
LayerStrategy layer_strategy_from_string(std::string_view t) {
  return parse_enum(t, kLayerNames, "layer strategy");
}
SubmatrixStrategy submatrix_strategy_from_string(std::string_view t) {
  return parse_enum(t, kSubmatrixNames, "submatrix strategy");
}
RoleGroup role_group_from_string(std::string_view t) { return parse_enum(t, kRoleGroupNames, "role group"); }

}  // namespace pkt::extract
