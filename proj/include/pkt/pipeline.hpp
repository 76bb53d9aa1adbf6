// SPDX-License-Identifier: Apache-2.0
//
// End-to-end transfer run: teacher, seed samples, sensitivity, layer
// mapping, extraction, LoRA injection, fine-tuning, evaluation and report.
// Every stage writes its artifacts to the output directory and reads its
// inputs back from there, so any suffix of the stages can be rerun in a
// fresh process.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pkt/extract.hpp"
#include "pkt/inject.hpp"
#include "pkt/tinylm.hpp"
#include "pkt/train.hpp"

namespace pkt::pipeline {

enum class Stage {
  kTeacher,       // load or train the teacher; prepare the student base
  kSeedSamples,   // draw k training examples
  kSensitivity,   // accumulate teacher sensitivity over the seed samples
  kLayerMapping,  // layer scores and teacher -> student layer mapping
  kExtraction,    // extraction plan
  kInjection,     // factorize and build one injected student per arm
  kFinetune,      // LoRA-only training per arm
  kEvaluate,      // exact-match accuracy of every model
  kReport,        // report, heatmaps
};

inline constexpr Stage kAllStages[] = {Stage::kTeacher,      Stage::kSeedSamples, Stage::kSensitivity,
                                       Stage::kLayerMapping, Stage::kExtraction,  Stage::kInjection,
                                       Stage::kFinetune,     Stage::kEvaluate,    Stage::kReport};

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view text);

// Full-parameter pretraining of a freshly initialized student on a mixture
// of character tasks. An empty task list leaves the student at init.
struct StudentPretrain {
  std::vector<train::TaskKind> tasks{train::TaskKind::kCopy, train::TaskKind::kReverse,
                                     train::TaskKind::kSortDigits};
  std::size_t n_train = 2000;  // per task
  std::size_t n_eval = 100;    // per task
  std::size_t max_len = 6;
  std::uint64_t data_seed = 0;
  train::Hyperparams hp;
};

struct PipelineConfig {
  tinylm::ModelConfig teacher;
  // Existing teacher checkpoint; when empty the teacher is trained on `task`
  // with teacher_hp.
  std::filesystem::path teacher_checkpoint;
  train::Hyperparams teacher_hp;

  tinylm::ModelConfig student;
  // Existing student base checkpoint; when empty the student is initialized
  // from its config and pretrained with student_pretrain.
  std::filesystem::path student_checkpoint;
  StudentPretrain student_pretrain;

  train::TaskSpec task;

  std::size_t k = 32;  // seed samples
  std::uint64_t sample_seed = 0;
  train::LossMask seed_loss = train::LossMask::kFullSequence;

  extract::ExtractionOptions extraction;

  std::size_t rank = 16;
  std::set<extract::RoleGroup> lora_targets{extract::RoleGroup::kEmbed, extract::RoleGroup::kAttn,
                                            extract::RoleGroup::kFfn};
  std::vector<inject::InitStrategy> arms{inject::InitStrategy::kPaperDefault};
  std::uint64_t init_seed = 0;

  train::Hyperparams finetune_hp;

  std::filesystem::path out_dir = "run";

  // Static checks; paths are checked when the stage that reads them runs.
  void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& cfg);
// Missing keys keep their defaults.
PipelineConfig config_from_json(const nlohmann::json& j);

// Teacher L=4 d=64 on two-digit modular addition, student L=2 d=32, k=32,
// r=8, contiguous blocks, arms paper_default and gaussian_zero.
PipelineConfig reference_config();

struct ArmResult {
  inject::InitStrategy arm = inject::InitStrategy::kPaperDefault;
  double eval_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

struct RunReport {
  nlohmann::json config;
  std::uint64_t sample_seed = 0;
  std::uint64_t init_seed = 0;
  std::uint64_t finetune_seed = 0;
  std::vector<std::size_t> seed_sample_ids;
  std::vector<std::size_t> teacher_layers;  // student layer i <- teacher_layers[i]
  std::map<std::string, double> extraction_scores;
  double teacher_accuracy = 0.0;
  double student_base_accuracy = 0.0;
  std::vector<ArmResult> arms;
  std::map<std::string, double> stage_seconds;  // not part of report.json

  const ArmResult& arm(inject::InitStrategy s) const;
  // Everything except timings.
  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
};

// Artifact file names inside the output directory.
namespace files {
inline constexpr std::string_view kConfig = "config.json";
inline constexpr std::string_view kTeacher = "teacher.pkt";
inline constexpr std::string_view kTeacherLog = "teacher_train.jsonl";
inline constexpr std::string_view kStudentBase = "student_base.pkt";
inline constexpr std::string_view kStudentLog = "student_pretrain.jsonl";
inline constexpr std::string_view kSeeds = "seeds.json";
inline constexpr std::string_view kSensitivity = "sensitivity.pkt";
inline constexpr std::string_view kLayers = "layers.json";
inline constexpr std::string_view kPlan = "plan.pkt";
inline constexpr std::string_view kPlanJson = "plan.json";
inline constexpr std::string_view kEval = "eval.json";
inline constexpr std::string_view kReport = "report.json";
inline constexpr std::string_view kTimings = "timings.json";
inline constexpr std::string_view kHeatmap = "heatmap.csv";
inline constexpr std::string_view kPartial = ".partial";

std::string injected(inject::InitStrategy arm);   // inject_<arm>.pkt
std::string finetuned(inject::InitStrategy arm);  // finetuned_<arm>.pkt
std::string train_log(inject::InitStrategy arm);  // train_<arm>.jsonl
}  // namespace files

// Writes a TrainLog as one JSON object per optimizer step followed by a
// summary line. Wall time is left out so the file is reproducible.
void write_train_log(const train::TrainLog& log, const std::filesystem::path& path);

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);

  const PipelineConfig& config() const { return cfg_; }
  std::filesystem::path path(std::string_view file) const { return cfg_.out_dir / file; }

  // Runs one stage on the artifacts already in the output directory. A
  // failure leaves the artifacts in place, writes the ".partial" marker and
  // throws a stage error naming the stage and cause.
  void run_stage(Stage s);
  // Runs stages first..last in order and returns the report when the report
  // stage ran.
  std::optional<RunReport> run(Stage first = Stage::kTeacher, Stage last = Stage::kReport);

 private:
  void stage_teacher();
  void stage_seed_samples();
  void stage_sensitivity();
  void stage_layer_mapping();
  void stage_extraction();
  void stage_injection();
  void stage_finetune();
  void stage_evaluate();
  void stage_report();

  train::TaskDataset dataset() const;
  void record_timing(Stage s, double seconds);

  PipelineConfig cfg_;
};

// All stages in one call.
RunReport run_pipeline(const PipelineConfig& cfg);

// Reads report.json plus timings.json from a finished run directory.
RunReport load_report(const std::filesystem::path& out_dir);

}  // namespace pkt::pipeline
