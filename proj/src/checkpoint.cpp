// SPDX-License-Identifier: Apache-2.0
#include "pkt/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "pkt/error.hpp"

namespace pkt::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

using nlohmann::json;
using tinylm::ParamName;
using tinylm::ParamStore;
using linalg::DenseMatrix;

namespace {

constexpr std::size_t kPrefixBytes = 4 + 8;

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

[[noreturn]] void tensor_error(const std::string& name, const std::string& what) {
  fail(ErrorKind::kFormat, "tensor '" + name + "': " + what);
}

void check_shape(const std::string& name, const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > 2) tensor_error(name, "shape must have 1 or 2 dimensions");
  for (std::size_t d : shape)
    if (d == 0) tensor_error(name, "zero-sized dimension");
}

}  // namespace

std::string encode(const Checkpoint& ckpt) {
  json manifest = json::array();
  std::set<std::string> names;
  std::uint64_t offset = 0;
  for (const Tensor& t : ckpt.tensors) {
    require(names.insert(t.name).second, ErrorKind::kFormat, "duplicate tensor name '" + t.name + "'");
    check_shape(t.name, t.shape);
    if (element_count(t.shape) != t.values.size()) tensor_error(t.name, "value count does not match shape");
    const std::uint64_t nbytes = 4 * t.values.size();
    manifest.push_back({{"name", t.name},
                        {"role", t.role},
                        {"layer", t.layer},
                        {"shape", t.shape},
                        {"dtype", "f32"},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  json header = {{"format_version", kFormatVersion},
                 {"kind", ckpt.kind},
                 {"config", ckpt.config ? config_to_json(*ckpt.config) : json(nullptr)},
                 {"extra", ckpt.extra},
                 {"tensors", std::move(manifest)}};
  const std::string text = header.dump();

  std::string out;
  out.reserve(kPrefixBytes + text.size() + offset);
  out.append(kMagic);
  const std::uint64_t len = text.size();
  char len_bytes[8];
  std::memcpy(len_bytes, &len, 8);
  out.append(len_bytes, 8);
  out.append(text);
  for (const Tensor& t : ckpt.tensors) {
    for (double v : t.values) {
      const float f = static_cast<float>(v);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  return out;
}

Checkpoint decode(std::string_view bytes) {
  require(bytes.size() >= kPrefixBytes, ErrorKind::kFormat, "file too short for the container prefix");
  require(bytes.substr(0, 4) == kMagic, ErrorKind::kFormat, "bad magic bytes");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 4, 8);
  require(header_len <= bytes.size() - kPrefixBytes, ErrorKind::kFormat, "header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.substr(kPrefixBytes, header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed header JSON: ") + e.what());
  }

  Checkpoint out;
  struct Entry {
    std::uint64_t offset;
    std::uint64_t nbytes;
  };
  std::vector<Entry> layout;
  try {
    const int version = header.at("format_version").get<int>();
    require(version == kFormatVersion, ErrorKind::kFormat,
            "format version mismatch: file has " + std::to_string(version) + ", reader supports " +
                std::to_string(kFormatVersion));
    out.kind = header.at("kind").get<std::string>();
    if (!header.at("config").is_null()) out.config = config_from_json(header.at("config"));
    out.extra = header.at("extra");

    std::set<std::string> names;
    std::uint64_t expected_offset = 0;
    for (const json& m : header.at("tensors")) {
      Tensor t;
      t.name = m.at("name").get<std::string>();
      try {
        t.role = m.at("role").get<std::string>();
        t.layer = m.at("layer").get<int>();
        t.shape = m.at("shape").get<std::vector<std::size_t>>();
        if (m.at("dtype").get<std::string>() != "f32") tensor_error(t.name, "unsupported dtype");
        const auto offset = m.at("offset").get<std::uint64_t>();
        const auto nbytes = m.at("nbytes").get<std::uint64_t>();
        if (!names.insert(t.name).second) tensor_error(t.name, "duplicate name");
        check_shape(t.name, t.shape);
        if (nbytes != 4 * element_count(t.shape))
          tensor_error(t.name, "shape " + shape_text(t.shape) + " disagrees with " + std::to_string(nbytes) + " bytes");
        if (offset != expected_offset)
          tensor_error(t.name, "offset " + std::to_string(offset) + " is not contiguous (expected " +
                                   std::to_string(expected_offset) + ")");
        expected_offset += nbytes;
        layout.push_back({offset, nbytes});
      } catch (const json::exception& e) {
        tensor_error(t.name, std::string("malformed manifest entry: ") + e.what());
      }
      out.tensors.push_back(std::move(t));
    }

    const std::uint64_t payload = bytes.size() - kPrefixBytes - header_len;
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (layout[i].offset + layout[i].nbytes > payload)
        tensor_error(out.tensors[i].name, "payload truncated: needs bytes [" + std::to_string(layout[i].offset) +
                                              ", " + std::to_string(layout[i].offset + layout[i].nbytes) +
                                              "), payload has " + std::to_string(payload));
    require(payload == expected_offset, ErrorKind::kFormat,
            std::to_string(payload - expected_offset) + " unexpected trailing bytes after the last tensor");
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed header: ") + e.what());
  }

  const char* base = bytes.data() + kPrefixBytes + header_len;
  for (std::size_t i = 0; i < out.tensors.size(); ++i) {
    Tensor& t = out.tensors[i];
    t.values.resize(layout[i].nbytes / 4);
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      float f;
      std::memcpy(&f, base + layout[i].offset + 4 * k, 4);
      t.values[k] = f;
    }
  }
  return out;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorKind::kIo, "write failed: " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode(ss.str());
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void round_to_storage(ParamStore& store) {
  for (auto& [name, e] : store)
    for (double& v : e.value.values()) v = static_cast<float>(v);
}

json config_to_json(const tinylm::ModelConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len}, {"num_layers", cfg.num_layers},
          {"hidden_dim", cfg.hidden_dim}, {"num_heads", cfg.num_heads},     {"ffn_dim", cfg.ffn_dim},
          {"seed", cfg.seed}};
}

tinylm::ModelConfig config_from_json(const json& j) {
  tinylm::ModelConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    cfg.num_layers = j.at("num_layers").get<std::size_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    cfg.num_heads = j.at("num_heads").get<std::size_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

void append_store(std::vector<Tensor>& out, const ParamStore& store, std::string_view suffix) {
  for (const auto& [name, e] : store) {
    out.push_back({name + std::string(suffix), std::string(tinylm::to_string(e.name.role)), e.name.layer, e.shape(),
                   std::vector<double>(e.value.values().begin(), e.value.values().end())});
  }
}

Tensor matrix_tensor(const std::string& name, const ParamName& pn, const DenseMatrix& m) {
  return {name, std::string(tinylm::to_string(pn.role)), pn.layer, {m.rows(), m.cols()},
          std::vector<double>(m.values().begin(), m.values().end())};
}

DenseMatrix tensor_matrix(const Tensor& t) {
  if (t.shape.size() == 1) return DenseMatrix(1, t.shape[0], t.values);
  return DenseMatrix(t.shape[0], t.shape[1], t.values);
}

const Tensor& find_tensor(const Checkpoint& ckpt, const std::string& name) {
  for (const Tensor& t : ckpt.tensors)
    if (t.name == name) return t;
  fail(ErrorKind::kFormat, "tensor '" + name + "' missing from checkpoint");
}

// Rebuilds a store whose tensor names are the config's parameter names plus
// `suffix`. Every tensor must match its expected shape and manifest tags.
ParamStore read_store(const Checkpoint& ckpt, const tinylm::ModelConfig& cfg, std::string_view suffix,
                      std::set<std::string>& consumed) {
  ParamStore store;
  for (const ParamName& pn : tinylm::parameter_names(cfg)) {
    const std::string name = pn.str() + std::string(suffix);
    const Tensor& t = find_tensor(ckpt, name);
    const auto [rows, cols] = tinylm::expected_shape(cfg, pn);
    const bool is_vector = pn.role == tinylm::Role::kNorm;
    const std::vector<std::size_t> want = is_vector ? std::vector<std::size_t>{cols} : std::vector<std::size_t>{rows, cols};
    if (t.shape != want)
      tensor_error(name, "shape " + shape_text(t.shape) + " does not match config shape " + shape_text(want));
    if (t.layer != pn.layer || t.role != tinylm::to_string(pn.role)) tensor_error(name, "role/layer tags disagree with name");
    store.insert(pn, tensor_matrix(t), is_vector);
    consumed.insert(name);
  }
  return store;
}

void require_kind(const Checkpoint& ckpt, std::string_view kind) {
  require(ckpt.kind == kind, ErrorKind::kFormat,
          "expected a '" + std::string(kind) + "' checkpoint, found '" + ckpt.kind + "'");
  require(ckpt.config.has_value(), ErrorKind::kFormat, "checkpoint has no model config");
}

void require_all_consumed(const Checkpoint& ckpt, const std::set<std::string>& consumed) {
  for (const Tensor& t : ckpt.tensors)
    if (!consumed.contains(t.name)) tensor_error(t.name, "not expected by the model config");
}

}  // namespace

Checkpoint from_model(const tinylm::Model& model) {
  Checkpoint c{"model", model.config, json::object(), {}};
  append_store(c.tensors, model.params, "");
  return c;
}

tinylm::Model to_model(const Checkpoint& ckpt) {
  require_kind(ckpt, "model");
  std::set<std::string> consumed;
  tinylm::Model m{*ckpt.config, read_store(ckpt, *ckpt.config, "", consumed)};
  require_all_consumed(ckpt, consumed);
  return m;
}

Checkpoint from_sensitivity(const sensitivity::SensitivityMap& map, const tinylm::ModelConfig& cfg) {
  Checkpoint c{"sensitivity", cfg, {{"sample_count", map.sample_count}}, {}};
  append_store(c.tensors, map.scores, ".sens");
  return c;
}

sensitivity::SensitivityMap to_sensitivity(const Checkpoint& ckpt) {
  require_kind(ckpt, "sensitivity");
  std::set<std::string> consumed;
  sensitivity::SensitivityMap map{read_store(ckpt, *ckpt.config, ".sens", consumed), 0};
  require_all_consumed(ckpt, consumed);
  try {
    map.sample_count = ckpt.extra.at("sample_count").get<std::size_t>();
  } catch (const json::exception&) {
    fail(ErrorKind::kFormat, "sensitivity checkpoint lacks sample_count");
  }
  for (const auto& [name, e] : map.scores)
    for (double v : e.value.values())
      if (!(v >= 0.0) || !std::isfinite(v)) tensor_error(name + ".sens", "sensitivity must be finite and nonnegative");
  return map;
}

Checkpoint from_injected(const inject::InjectedModel& m) {
  json targets = json::object();
  for (const auto& [name, t] : m.lora)
    targets[name] = {{"semantics", inject::to_string(t.semantics)}, {"rank", t.init.rank},
                     {"has_subtract", t.init.subtract.has_value()}};
  Checkpoint c{"injected",
               m.base.config,
               {{"strategy", inject::to_string(m.strategy.kind)}, {"seed", m.strategy.seed}, {"targets", targets}},
               {}};
  append_store(c.tensors, m.base.params, "");
  for (const auto& [name, t] : m.lora) {
    const ParamName pn = ParamName::parse(name);
    c.tensors.push_back(matrix_tensor(name + ".lora.b", pn, t.init.b));
    c.tensors.push_back(matrix_tensor(name + ".lora.a", pn, t.init.a));
    if (t.init.subtract) c.tensors.push_back(matrix_tensor(name + ".lora.sub", pn, *t.init.subtract));
  }
  return c;
}

inject::InjectedModel to_injected(const Checkpoint& ckpt) {
  require_kind(ckpt, "injected");
  std::set<std::string> consumed;
  inject::InjectedModel m;
  m.base = {*ckpt.config, read_store(ckpt, *ckpt.config, "", consumed)};
  try {
    m.strategy = {inject::init_strategy_from_string(ckpt.extra.at("strategy").get<std::string>()),
                  ckpt.extra.at("seed").get<std::uint64_t>()};
    for (const auto& [name, info] : ckpt.extra.at("targets").items()) {
      require(m.base.params.contains(name), ErrorKind::kFormat, "LoRA target '" + name + "' is not a base tensor");
      const DenseMatrix& w = m.base.params.at(name);
      inject::LoraTarget t;
      t.semantics = inject::init_strategy_from_string(info.at("semantics").get<std::string>());
      t.init.rank = info.at("rank").get<std::size_t>();
      t.init.b = tensor_matrix(find_tensor(ckpt, name + ".lora.b"));
      t.init.a = tensor_matrix(find_tensor(ckpt, name + ".lora.a"));
      consumed.insert({name + ".lora.b", name + ".lora.a"});
      if (t.init.b.rows() != w.rows() || t.init.b.cols() != t.init.rank)
        tensor_error(name + ".lora.b", "shape disagrees with base weight and rank");
      if (t.init.a.rows() != t.init.rank || t.init.a.cols() != w.cols())
        tensor_error(name + ".lora.a", "shape disagrees with base weight and rank");
      if (info.at("has_subtract").get<bool>()) {
        t.init.subtract = tensor_matrix(find_tensor(ckpt, name + ".lora.sub"));
        consumed.insert(name + ".lora.sub");
        if (t.init.subtract->rows() != w.rows() || t.init.subtract->cols() != w.cols())
          tensor_error(name + ".lora.sub", "shape disagrees with base weight");
      }
      m.lora.emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed LoRA descriptor: ") + e.what());
  }
  require_all_consumed(ckpt, consumed);
  return m;
}

json plan_to_json(const extract::ExtractionPlan& plan) {
  json matrices = json::object();
  for (const auto& [name, m] : plan.matrices) {
    const auto& s = m.selection;
    matrices[name] = {{"teacher", m.teacher_name},
                      {"rows", s.rows},
                      {"cols", s.cols},
                      {"row_indices", s.row_indices},
                      {"col_indices", s.col_indices},
                      {"source_cells", s.source_cells},
                      {"score", s.score},
                      {"strategy", extract::to_string(s.strategy.kind)},
                      {"seed", s.strategy.seed}};
  }
  json roles = json::array();
  for (extract::RoleGroup g : plan.options.roles) roles.push_back(extract::to_string(g));
  json mapping = json::array();
  for (std::size_t s = 0; s < plan.mapping.teacher_layers.size(); ++s)
    mapping.push_back({{"teacher", plan.mapping.teacher_layers[s]}, {"student", s}});
  return {{"layer_strategy", extract::to_string(plan.options.layer.kind)},
          {"layer_seed", plan.options.layer.seed},
          {"submatrix_strategy", extract::to_string(plan.options.submatrix.kind)},
          {"submatrix_seed", plan.options.submatrix.seed},
          {"roles", roles},
          {"layer_mapping", mapping},
          {"teacher_config_hash", plan.provenance.teacher_config_hash},
          {"seed_sample_ids", plan.provenance.seed_sample_ids},
          {"matrices", matrices}};
}

Checkpoint from_plan(const extract::ExtractionPlan& plan, const tinylm::ModelConfig& student_cfg) {
  Checkpoint c{"plan", student_cfg, plan_to_json(plan), {}};
  for (const auto& [name, m] : plan.matrices) c.tensors.push_back(matrix_tensor(name, ParamName::parse(name), m.values));
  return c;
}

extract::ExtractionPlan to_plan(const Checkpoint& ckpt) {
  require_kind(ckpt, "plan");
  extract::ExtractionPlan plan;
  std::set<std::string> consumed;
  try {
    const json& j = ckpt.extra;
    plan.options.layer = {extract::layer_strategy_from_string(j.at("layer_strategy").get<std::string>()),
                          j.at("layer_seed").get<std::uint64_t>()};
    plan.options.submatrix = {extract::submatrix_strategy_from_string(j.at("submatrix_strategy").get<std::string>()),
                              j.at("submatrix_seed").get<std::uint64_t>()};
    plan.options.roles.clear();
    for (const json& r : j.at("roles")) plan.options.roles.insert(extract::role_group_from_string(r.get<std::string>()));
    plan.mapping.strategy = plan.options.layer;
    for (const json& p : j.at("layer_mapping")) plan.mapping.teacher_layers.push_back(p.at("teacher").get<std::size_t>());
    plan.provenance = {j.at("teacher_config_hash").get<std::string>(),
                       j.at("seed_sample_ids").get<std::vector<std::size_t>>()};
    for (const auto& [name, m] : j.at("matrices").items()) {
      extract::SubmatrixSelection s;
      s.rows = m.at("rows").get<std::size_t>();
      s.cols = m.at("cols").get<std::size_t>();
      s.row_indices = m.at("row_indices").get<std::vector<std::size_t>>();
      s.col_indices = m.at("col_indices").get<std::vector<std::size_t>>();
      s.source_cells = m.at("source_cells").get<std::vector<std::size_t>>();
      s.score = m.at("score").get<double>();
      s.strategy = {extract::submatrix_strategy_from_string(m.at("strategy").get<std::string>()),
                    m.at("seed").get<std::uint64_t>()};
      const Tensor& t = find_tensor(ckpt, name);
      if (t.shape != std::vector<std::size_t>{s.rows, s.cols}) tensor_error(name, "shape disagrees with its selection");
      if (s.source_cells.size() != s.rows * s.cols) tensor_error(name, "selection cell count disagrees with its shape");
      consumed.insert(name);
      plan.matrices.emplace(name, extract::ExtractedMatrix{m.at("teacher").get<std::string>(), std::move(s), tensor_matrix(t)});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed plan descriptor: ") + e.what());
  }
  require_all_consumed(ckpt, consumed);
  return plan;
}

}  // namespace pkt::checkpoint
