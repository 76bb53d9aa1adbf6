// SPDX-License-Identifier: Apache-2.0
//
// Tensor container: "PKT1" magic, 8-byte little-endian header length, a
// UTF-8 JSON header, then raw little-endian float32 tensor data in manifest
// order. docs/checkpoint_format.md has the full layout.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pkt/extract.hpp"
#include "pkt/inject.hpp"
#include "pkt/sensitivity.hpp"
#include "pkt/tinylm.hpp"

namespace pkt::checkpoint {

inline constexpr std::string_view kMagic = "PKT1";
inline constexpr int kFormatVersion = 1;

struct Tensor {
  std::string name;
  std::string role;  // role tag of the underlying parameter
  int layer = -1;
  std::vector<std::size_t> shape;  // 1 or 2 dims
  std::vector<double> values;      // row-major; stored as float32
};

struct Checkpoint {
  std::string kind;  // "model", "sensitivity", "plan", "injected"
  std::optional<tinylm::ModelConfig> config;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<Tensor> tensors;  // payload order
};

// Byte image of a checkpoint. Values are rounded to float32.
std::string encode(const Checkpoint& ckpt);
// Validates the whole header and payload layout before returning anything.
Checkpoint decode(std::string_view bytes);

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

// Rounds every value to the nearest float32, i.e. what a save/load cycle
// returns.
void round_to_storage(tinylm::ParamStore& store);

nlohmann::json config_to_json(const tinylm::ModelConfig& cfg);
tinylm::ModelConfig config_from_json(const nlohmann::json& j);

// Conversions between checkpoints and in-memory artifacts. Loading checks
// that every tensor expected by the config is present with its shape.
Checkpoint from_model(const tinylm::Model& model);
tinylm::Model to_model(const Checkpoint& ckpt);

// Tensor names carry a ".sens" suffix.
Checkpoint from_sensitivity(const sensitivity::SensitivityMap& map, const tinylm::ModelConfig& cfg);
sensitivity::SensitivityMap to_sensitivity(const Checkpoint& ckpt);

// Base tensors under their own names plus "<target>.lora.b", ".lora.a" and
// ".lora.sub" for every LoRA target.
Checkpoint from_injected(const inject::InjectedModel& m);
inject::InjectedModel to_injected(const Checkpoint& ckpt);

// Extracted values under the student tensor names; the header's "extra"
// holds the layer mapping, every selection and the provenance, which is
// also what plan_to_json returns for the sidecar file.
Checkpoint from_plan(const extract::ExtractionPlan& plan, const tinylm::ModelConfig& student_cfg);
extract::ExtractionPlan to_plan(const Checkpoint& ckpt);
nlohmann::json plan_to_json(const extract::ExtractionPlan& plan);

}  // namespace pkt::checkpoint
