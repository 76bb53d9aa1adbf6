// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pkt/checkpoint.hpp"
#include "pkt/pipeline.hpp"
#include "test_support.hpp"

using namespace pkt;
using namespace pkt::pipeline;
using pkt::testing::kind_of;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(const std::string& dir) {
  PipelineConfig cfg;
  cfg.teacher = {.vocab_size = train::kVocabSize, .max_seq_len = 16, .num_layers = 2, .hidden_dim = 16,
                 .num_heads = 2, .ffn_dim = 32, .seed = 1};
  cfg.teacher_hp.epochs = 2;
  cfg.teacher_hp.batch_size = 16;
  cfg.teacher_hp.learning_rate = 3e-3;
  cfg.student = {.vocab_size = train::kVocabSize, .max_seq_len = 16, .num_layers = 1, .hidden_dim = 8,
                 .num_heads = 2, .ffn_dim = 16, .seed = 2};
  cfg.student_pretrain.n_train = 40;
  cfg.student_pretrain.n_eval = 5;
  cfg.student_pretrain.hp.epochs = 1;
  cfg.student_pretrain.hp.batch_size = 16;
  cfg.task = {.kind = train::TaskKind::kModularAdd, .n_train = 60, .n_eval = 20, .seed = 3, .modulus = 10};
  cfg.k = 4;
  cfg.sample_seed = 5;
  cfg.rank = 2;
  cfg.arms = {inject::InitStrategy::kPaperDefault, inject::InitStrategy::kGaussianZero};
  cfg.init_seed = 6;
  cfg.finetune_hp.epochs = 1;
  cfg.finetune_hp.batch_size = 16;
  cfg.finetune_hp.learning_rate = 3e-3;
  cfg.out_dir = fs::temp_directory_path() / ("pkt_pipeline_test_" + dir);
  fs::remove_all(cfg.out_dir);
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Every artifact except timings, by file name.
std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename() != files::kTimings) out[e.path().filename().string()] = read_bytes(e.path());
  return out;
}

}  // namespace

TEST(Pipeline, WritesEveryArtifactAndReportsAllArms) {
  const PipelineConfig cfg = tiny_config("full");
  const RunReport r = run_pipeline(cfg);
  for (std::string_view f : {files::kConfig, files::kTeacher, files::kTeacherLog, files::kStudentBase,
                             files::kStudentLog, files::kSeeds, files::kSensitivity, files::kLayers, files::kPlan,
                             files::kPlanJson, files::kEval, files::kReport, files::kTimings, files::kHeatmap})
    EXPECT_TRUE(fs::exists(cfg.out_dir / f)) << f;
  EXPECT_TRUE(fs::exists(cfg.out_dir / "heatmap_raw.csv"));
  for (inject::InitStrategy arm : cfg.arms) {
    EXPECT_TRUE(fs::exists(cfg.out_dir / files::injected(arm)));
    EXPECT_TRUE(fs::exists(cfg.out_dir / files::finetuned(arm)));
    EXPECT_TRUE(fs::exists(cfg.out_dir / files::train_log(arm)));
    const ArmResult& a = r.arm(arm);
    EXPECT_GE(a.eval_accuracy, 0.0);
    EXPECT_LE(a.eval_accuracy, 1.0);
    EXPECT_EQ(a.steps, 4u);  // 60 examples, batch 16
  }
  EXPECT_FALSE(fs::exists(cfg.out_dir / files::kPartial));
  EXPECT_EQ(r.seed_sample_ids.size(), cfg.k);
  EXPECT_TRUE(std::is_sorted(r.seed_sample_ids.begin(), r.seed_sample_ids.end()));
  EXPECT_EQ(r.teacher_layers.size(), cfg.student.num_layers);
  EXPECT_EQ(r.stage_seconds.size(), std::size(kAllStages));
  EXPECT_FALSE(r.config.contains("out_dir"));
  const auto report = nlohmann::json::parse(read_bytes(cfg.out_dir / files::kReport));
  EXPECT_TRUE(report.contains("paper_default_minus_gaussian_zero"));
  EXPECT_FALSE(report.contains("timings"));
  fs::remove_all(cfg.out_dir);
}

TEST(Pipeline, SplitRunEqualsSingleRun) {
  const PipelineConfig one = tiny_config("single");
  run_pipeline(one);
  PipelineConfig two = tiny_config("split");
  Pipeline(two).run(Stage::kTeacher, Stage::kExtraction);
  Pipeline(two).run(Stage::kInjection, Stage::kReport);
  EXPECT_EQ(artifacts(one.out_dir), artifacts(two.out_dir));
  fs::remove_all(one.out_dir);
  fs::remove_all(two.out_dir);
}

TEST(Pipeline, ImportedCheckpointsGiveSameDownstreamArtifacts) {
  const PipelineConfig trained = tiny_config("trained");
  run_pipeline(trained);
  PipelineConfig imported = tiny_config("imported");
  imported.teacher_checkpoint = trained.out_dir / files::kTeacher;
  imported.student_checkpoint = trained.out_dir / files::kStudentBase;
  run_pipeline(imported);
  auto a = artifacts(trained.out_dir), b = artifacts(imported.out_dir);
  for (auto* m : {&a, &b}) {
    m->erase(std::string(files::kConfig));
    m->erase(std::string(files::kReport));
    m->erase(std::string(files::kTeacherLog));
    m->erase(std::string(files::kStudentLog));
  }
  EXPECT_EQ(a, b);
  fs::remove_all(trained.out_dir);
  fs::remove_all(imported.out_dir);
}

TEST(Pipeline, StageFailureLeavesPartialMarker) {
  PipelineConfig cfg = tiny_config("missing_teacher");
  cfg.teacher_checkpoint = cfg.out_dir / "does_not_exist.pkt";
  Pipeline p(cfg);
  try {
    p.run();
    FAIL() << "expected a stage error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kStage);
    EXPECT_NE(std::string(e.what()).find("'teacher'"), std::string::npos) << e.what();
  }
  const auto marker = nlohmann::json::parse(read_bytes(cfg.out_dir / files::kPartial));
  EXPECT_EQ(marker.at("stage"), "teacher");
  fs::remove_all(cfg.out_dir);
}

TEST(Pipeline, StageWithoutInputsNamesItself) {
  const PipelineConfig cfg = tiny_config("no_inputs");
  Pipeline p(cfg);
  try {
    p.run_stage(Stage::kSensitivity);
    FAIL() << "expected a stage error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kStage);
    EXPECT_NE(std::string(e.what()).find("'sensitivity'"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(fs::exists(cfg.out_dir / files::kPartial));
  fs::remove_all(cfg.out_dir);
}

TEST(Pipeline, TeacherCheckpointWithWrongConfigRejected) {
  const PipelineConfig first = tiny_config("wrong_cfg_src");
  Pipeline(first).run(Stage::kTeacher, Stage::kTeacher);
  PipelineConfig cfg = tiny_config("wrong_cfg");
  cfg.teacher.seed = 99;
  cfg.teacher_checkpoint = first.out_dir / files::kTeacher;
  EXPECT_EQ(kind_of([&] { Pipeline(cfg).run(Stage::kTeacher, Stage::kTeacher); }), ErrorKind::kStage);
  fs::remove_all(first.out_dir);
  fs::remove_all(cfg.out_dir);
}

TEST(PipelineConfig, ValidationErrors) {
  const auto bad = [](auto edit) {
    PipelineConfig cfg = tiny_config("unused");
    edit(cfg);
    return kind_of([&] { cfg.validate(); });
  };
  EXPECT_EQ(bad([](PipelineConfig& c) { c.k = 0; }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.k = 61; }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.rank = 0; }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.arms.clear(); }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.arms.push_back(inject::InitStrategy::kPaperDefault); }),
            ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.teacher.vocab_size = 12; }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.extraction.roles.clear(); }), ErrorKind::kConfig);
  EXPECT_EQ(bad([](PipelineConfig& c) { c.finetune_hp.batch_size = 0; }), ErrorKind::kConfig);
}

TEST(PipelineConfig, JsonRoundTrip) {
  PipelineConfig cfg = reference_config();
  cfg.extraction.submatrix.kind = extract::SubmatrixStrategy::kRowCol;
  cfg.extraction.roles = {extract::RoleGroup::kFfn};
  cfg.student_pretrain.tasks = {train::TaskKind::kSortDigits};
  cfg.seed_loss = train::LossMask::kAnswerOnly;
  cfg.teacher_checkpoint = "some/teacher.pkt";
  const nlohmann::json j = config_to_json(cfg);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  // Missing keys keep their defaults.
  const PipelineConfig partial = config_from_json({{"k", 7}});
  EXPECT_EQ(partial.k, 7u);
  EXPECT_EQ(partial.rank, PipelineConfig{}.rank);
  EXPECT_EQ(kind_of([] { config_from_json({{"arms", {"bogus"}}}); }), ErrorKind::kInvalidInput);
}

TEST(PipelineConfig, ReferenceMatchesCriteriaShape) {
  const PipelineConfig cfg = reference_config();
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.teacher.num_layers, 4u);
  EXPECT_EQ(cfg.teacher.hidden_dim, 64u);
  EXPECT_EQ(cfg.student.num_layers, 2u);
  EXPECT_EQ(cfg.student.hidden_dim, 32u);
  EXPECT_EQ(cfg.k, 32u);
  EXPECT_EQ(cfg.rank, 8u);
  EXPECT_EQ(cfg.extraction.submatrix.kind, extract::SubmatrixStrategy::kContiguous);
}

TEST(Stage, NamesRoundTrip) {
  for (Stage s : kAllStages) EXPECT_EQ(stage_from_string(to_string(s)), s);
  EXPECT_EQ(kind_of([] { stage_from_string("nope"); }), ErrorKind::kInvalidInput);
}
