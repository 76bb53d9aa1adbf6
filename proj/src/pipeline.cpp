// SPDX-License-Identifier: Apache-2.0
#include "pkt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "pkt/checkpoint.hpp"
#include "pkt/error.hpp"
#include "pkt/heatmap.hpp"
#include "pkt/rng.hpp"
#include "pkt/sensitivity.hpp"

namespace pkt::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::pair<Stage, std::string_view> kStageNames[] = {
    {Stage::kTeacher, "teacher"},         {Stage::kSeedSamples, "seed_samples"},
    {Stage::kSensitivity, "sensitivity"}, {Stage::kLayerMapping, "layer_mapping"},
    {Stage::kExtraction, "extraction"},   {Stage::kInjection, "injection"},
    {Stage::kFinetune, "finetune"},       {Stage::kEvaluate, "evaluate"},
    {Stage::kReport, "report"},
};

json read_json(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  f << text;
  require(static_cast<bool>(f), ErrorKind::kIo, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

template <typename T>
void read_field(const json& j, std::string_view key, T& field) {
  if (auto it = j.find(key); it != j.end()) field = it->get<T>();
}

json hp_to_json(const train::Hyperparams& hp) {
  return {{"epochs", hp.epochs},       {"batch_size", hp.batch_size}, {"learning_rate", hp.learning_rate},
          {"beta1", hp.beta1},         {"beta2", hp.beta2},           {"epsilon", hp.epsilon},
          {"clip_norm", hp.clip_norm}, {"mask", train::to_string(hp.mask)}, {"seed", hp.seed}};
}

train::Hyperparams hp_from_json(const json& j, train::Hyperparams hp) {
  read_field(j, "epochs", hp.epochs);
  read_field(j, "batch_size", hp.batch_size);
  read_field(j, "learning_rate", hp.learning_rate);
  read_field(j, "beta1", hp.beta1);
  read_field(j, "beta2", hp.beta2);
  read_field(j, "epsilon", hp.epsilon);
  read_field(j, "clip_norm", hp.clip_norm);
  read_field(j, "seed", hp.seed);
  if (j.contains("mask")) hp.mask = train::loss_mask_from_string(j.at("mask").get<std::string>());
  return hp;
}

json task_to_json(const train::TaskSpec& t) {
  return {{"kind", train::to_string(t.kind)}, {"n_train", t.n_train}, {"n_eval", t.n_eval}, {"seed", t.seed},
          {"modulus", t.modulus},            {"min_len", t.min_len}, {"max_len", t.max_len}};
}

train::TaskSpec task_from_json(const json& j, train::TaskSpec t) {
  if (j.contains("kind")) t.kind = train::task_kind_from_string(j.at("kind").get<std::string>());
  read_field(j, "n_train", t.n_train);
  read_field(j, "n_eval", t.n_eval);
  read_field(j, "seed", t.seed);
  read_field(j, "modulus", t.modulus);
  read_field(j, "min_len", t.min_len);
  read_field(j, "max_len", t.max_len);
  return t;
}

json model_to_json(const tinylm::ModelConfig& c) { return checkpoint::config_to_json(c); }

tinylm::ModelConfig model_from_json(const json& j, tinylm::ModelConfig c) {
  read_field(j, "vocab_size", c.vocab_size);
  read_field(j, "max_seq_len", c.max_seq_len);
  read_field(j, "num_layers", c.num_layers);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "num_heads", c.num_heads);
  read_field(j, "ffn_dim", c.ffn_dim);
  read_field(j, "seed", c.seed);
  return c;
}

json roles_to_json(const std::set<extract::RoleGroup>& roles) {
  json out = json::array();
  for (extract::RoleGroup g : roles) out.push_back(extract::to_string(g));
  return out;
}

std::set<extract::RoleGroup> roles_from_json(const json& j) {
  std::set<extract::RoleGroup> out;
  for (const json& r : j) out.insert(extract::role_group_from_string(r.get<std::string>()));
  return out;
}

tinylm::Model load_model(const fs::path& path) { return checkpoint::to_model(checkpoint::load(path)); }

// Loads an external checkpoint and checks it against the expected config.
tinylm::Model load_external(const fs::path& path, const tinylm::ModelConfig& expected, std::string_view what) {
  require(fs::exists(path), ErrorKind::kIo, std::string(what) + " checkpoint not found: " + path.string());
  tinylm::Model m = load_model(path);
  require(m.config == expected, ErrorKind::kConfig,
          std::string(what) + " checkpoint config differs from the pipeline config: " +
              checkpoint::config_to_json(m.config).dump());
  return m;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string_view to_string(Stage s) {
  for (const auto& [k, name] : kStageNames)
    if (k == s) return name;
  fail(ErrorKind::kInvalidInput, "unknown stage");
}

Stage stage_from_string(std::string_view text) {
  for (const auto& [k, name] : kStageNames)
    if (name == text) return k;
  fail(ErrorKind::kInvalidInput, "unknown stage '" + std::string(text) + "'");
}

void PipelineConfig::validate() const {
  teacher.validate();
  student.validate();
  require(teacher.vocab_size == train::kVocabSize && student.vocab_size == train::kVocabSize, ErrorKind::kConfig,
          "teacher and student vocab_size must be " + std::to_string(train::kVocabSize));
  require(k >= 1, ErrorKind::kConfig, "k must be at least 1");
  require(k <= task.n_train, ErrorKind::kConfig,
          "k = " + std::to_string(k) + " exceeds the " + std::to_string(task.n_train) + " training examples");
  require(rank >= 1, ErrorKind::kConfig, "rank must be at least 1");
  require(!arms.empty(), ErrorKind::kConfig, "at least one arm is required");
  require(std::set<inject::InitStrategy>(arms.begin(), arms.end()).size() == arms.size(), ErrorKind::kConfig,
          "arms must be distinct");
  require(!extraction.roles.empty(), ErrorKind::kConfig, "no extraction roles");
  require(!lora_targets.empty(), ErrorKind::kConfig, "no LoRA targets");
  require(!out_dir.empty(), ErrorKind::kConfig, "output directory is empty");
  teacher_hp.validate();
  finetune_hp.validate();
  student_pretrain.hp.validate();
}

json config_to_json(const PipelineConfig& cfg) {
  json tasks = json::array();
  for (train::TaskKind t : cfg.student_pretrain.tasks) tasks.push_back(train::to_string(t));
  json arms = json::array();
  for (inject::InitStrategy a : cfg.arms) arms.push_back(inject::to_string(a));
  return {
      {"teacher", model_to_json(cfg.teacher)},
      {"teacher_checkpoint", cfg.teacher_checkpoint.string()},
      {"teacher_hp", hp_to_json(cfg.teacher_hp)},
      {"student", model_to_json(cfg.student)},
      {"student_checkpoint", cfg.student_checkpoint.string()},
      {"student_pretrain",
       {{"tasks", tasks},
        {"n_train", cfg.student_pretrain.n_train},
        {"n_eval", cfg.student_pretrain.n_eval},
        {"max_len", cfg.student_pretrain.max_len},
        {"data_seed", cfg.student_pretrain.data_seed},
        {"hp", hp_to_json(cfg.student_pretrain.hp)}}},
      {"task", task_to_json(cfg.task)},
      {"k", cfg.k},
      {"sample_seed", cfg.sample_seed},
      {"seed_loss", train::to_string(cfg.seed_loss)},
      {"layer_strategy", extract::to_string(cfg.extraction.layer.kind)},
      {"layer_seed", cfg.extraction.layer.seed},
      {"submatrix_strategy", extract::to_string(cfg.extraction.submatrix.kind)},
      {"submatrix_seed", cfg.extraction.submatrix.seed},
      {"roles", roles_to_json(cfg.extraction.roles)},
      {"rank", cfg.rank},
      {"lora_targets", roles_to_json(cfg.lora_targets)},
      {"arms", arms},
      {"init_seed", cfg.init_seed},
      {"finetune_hp", hp_to_json(cfg.finetune_hp)},
      {"out_dir", cfg.out_dir.string()},
  };
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig cfg;
  try {
    if (j.contains("teacher")) cfg.teacher = model_from_json(j.at("teacher"), cfg.teacher);
    if (j.contains("teacher_checkpoint")) cfg.teacher_checkpoint = j.at("teacher_checkpoint").get<std::string>();
    if (j.contains("teacher_hp")) cfg.teacher_hp = hp_from_json(j.at("teacher_hp"), cfg.teacher_hp);
    if (j.contains("student")) cfg.student = model_from_json(j.at("student"), cfg.student);
    if (j.contains("student_checkpoint")) cfg.student_checkpoint = j.at("student_checkpoint").get<std::string>();
    if (j.contains("student_pretrain")) {
      const json& p = j.at("student_pretrain");
      StudentPretrain& sp = cfg.student_pretrain;
      if (p.contains("tasks")) {
        sp.tasks.clear();
        for (const json& t : p.at("tasks")) sp.tasks.push_back(train::task_kind_from_string(t.get<std::string>()));
      }
      read_field(p, "n_train", sp.n_train);
      read_field(p, "n_eval", sp.n_eval);
      read_field(p, "max_len", sp.max_len);
      read_field(p, "data_seed", sp.data_seed);
      if (p.contains("hp")) sp.hp = hp_from_json(p.at("hp"), sp.hp);
    }
    if (j.contains("task")) cfg.task = task_from_json(j.at("task"), cfg.task);
    read_field(j, "k", cfg.k);
    read_field(j, "sample_seed", cfg.sample_seed);
    if (j.contains("seed_loss")) cfg.seed_loss = train::loss_mask_from_string(j.at("seed_loss").get<std::string>());
    if (j.contains("layer_strategy"))
      cfg.extraction.layer.kind = extract::layer_strategy_from_string(j.at("layer_strategy").get<std::string>());
    read_field(j, "layer_seed", cfg.extraction.layer.seed);
    if (j.contains("submatrix_strategy"))
      cfg.extraction.submatrix.kind =
          extract::submatrix_strategy_from_string(j.at("submatrix_strategy").get<std::string>());
    read_field(j, "submatrix_seed", cfg.extraction.submatrix.seed);
    if (j.contains("roles")) cfg.extraction.roles = roles_from_json(j.at("roles"));
    read_field(j, "rank", cfg.rank);
    if (j.contains("lora_targets")) cfg.lora_targets = roles_from_json(j.at("lora_targets"));
    if (j.contains("arms")) {
      cfg.arms.clear();
      for (const json& a : j.at("arms")) cfg.arms.push_back(inject::init_strategy_from_string(a.get<std::string>()));
    }
    read_field(j, "init_seed", cfg.init_seed);
    if (j.contains("finetune_hp")) cfg.finetune_hp = hp_from_json(j.at("finetune_hp"), cfg.finetune_hp);
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed pipeline config: ") + e.what());
  }
  return cfg;
}

PipelineConfig reference_config() {
  PipelineConfig cfg;
  cfg.teacher = {.vocab_size = train::kVocabSize,
                 .max_seq_len = 16,
                 .num_layers = 4,
                 .hidden_dim = 64,
                 .num_heads = 4,
                 .ffn_dim = 128,
                 .seed = 4};
  cfg.teacher_hp.epochs = 15;
  cfg.teacher_hp.batch_size = 32;
  cfg.teacher_hp.learning_rate = 1e-3;
  cfg.teacher_hp.seed = 4;

  cfg.student = {.vocab_size = train::kVocabSize,
                 .max_seq_len = 16,
                 .num_layers = 2,
                 .hidden_dim = 32,
                 .num_heads = 4,
                 .ffn_dim = 64,
                 .seed = 11};
  cfg.student_pretrain.data_seed = 11;
  cfg.student_pretrain.hp.epochs = 3;
  cfg.student_pretrain.hp.batch_size = 32;
  cfg.student_pretrain.hp.learning_rate = 1e-3;
  cfg.student_pretrain.hp.seed = 11;

  cfg.task = {.kind = train::TaskKind::kModularAdd, .n_train = 5000, .n_eval = 500, .seed = 1, .modulus = 100};
  cfg.k = 32;
  cfg.sample_seed = 1;
  cfg.extraction.submatrix.kind = extract::SubmatrixStrategy::kContiguous;
  cfg.rank = 8;
  cfg.arms = {inject::InitStrategy::kPaperDefault, inject::InitStrategy::kGaussianZero};
  cfg.init_seed = 1;
  cfg.finetune_hp.epochs = 10;
  cfg.finetune_hp.batch_size = 64;
  cfg.finetune_hp.learning_rate = 3e-3;
  cfg.finetune_hp.seed = 1;
  return cfg;
}

const ArmResult& RunReport::arm(inject::InitStrategy s) const {
  for (const ArmResult& a : arms)
    if (a.arm == s) return a;
  fail(ErrorKind::kInvalidInput, "report has no arm " + std::string(inject::to_string(s)));
}

json RunReport::to_json() const {
  json arm_json = json::object();
  for (const ArmResult& a : arms)
    arm_json[std::string(inject::to_string(a.arm))] = {
        {"eval_accuracy", a.eval_accuracy}, {"final_loss", a.final_loss}, {"steps", a.steps}};
  json out = {{"config", config},
              {"seeds",
               {{"sample_seed", sample_seed},
                {"init_seed", init_seed},
                {"finetune_seed", finetune_seed},
                {"seed_sample_ids", seed_sample_ids}}},
              {"teacher_layers", teacher_layers},
              {"extraction_scores", extraction_scores},
              {"teacher_accuracy", teacher_accuracy},
              {"student_base_accuracy", student_base_accuracy},
              {"arms", arm_json}};
  const auto has = [&](inject::InitStrategy s) {
    return std::any_of(arms.begin(), arms.end(), [&](const ArmResult& a) { return a.arm == s; });
  };
  if (has(inject::InitStrategy::kPaperDefault) && has(inject::InitStrategy::kGaussianZero))
    out["paper_default_minus_gaussian_zero"] = arm(inject::InitStrategy::kPaperDefault).eval_accuracy -
                                               arm(inject::InitStrategy::kGaussianZero).eval_accuracy;
  return out;
}

RunReport RunReport::from_json(const json& j) {
  RunReport r;
  try {
    r.config = j.at("config");
    const json& s = j.at("seeds");
    r.sample_seed = s.at("sample_seed").get<std::uint64_t>();
    r.init_seed = s.at("init_seed").get<std::uint64_t>();
    r.finetune_seed = s.at("finetune_seed").get<std::uint64_t>();
    r.seed_sample_ids = s.at("seed_sample_ids").get<std::vector<std::size_t>>();
    r.teacher_layers = j.at("teacher_layers").get<std::vector<std::size_t>>();
    r.extraction_scores = j.at("extraction_scores").get<std::map<std::string, double>>();
    r.teacher_accuracy = j.at("teacher_accuracy").get<double>();
    r.student_base_accuracy = j.at("student_base_accuracy").get<double>();
    for (const auto& [name, a] : j.at("arms").items())
      r.arms.push_back({inject::init_strategy_from_string(name), a.at("eval_accuracy").get<double>(),
                        a.at("final_loss").get<double>(), a.at("steps").get<std::size_t>()});
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed report: ") + e.what());
  }
  return r;
}

namespace files {
std::string injected(inject::InitStrategy arm) { return "inject_" + std::string(inject::to_string(arm)) + ".pkt"; }
std::string finetuned(inject::InitStrategy arm) {
  return "finetuned_" + std::string(inject::to_string(arm)) + ".pkt";
}
std::string train_log(inject::InitStrategy arm) { return "train_" + std::string(inject::to_string(arm)) + ".jsonl"; }
}  // namespace files

void write_train_log(const train::TrainLog& log, const fs::path& path) {
  std::string text;
  for (std::size_t i = 0; i < log.losses.size(); ++i) {
    text += json{{"step", i}, {"loss", log.losses[i]}, {"grad_norm", log.grad_norms[i]}}.dump();
    text += "\n";
  }
  text += json{{"summary",
                {{"steps", log.losses.size()},
                 {"final_loss", log.losses.empty() ? 0.0 : log.losses.back()},
                 {"clipped_steps", log.clipped_steps},
                 {"seed", log.seed},
                 {"clip_norm", log.clip_norm},
                 {"mask", train::to_string(log.mask)}}}}
              .dump();
  text += "\n";
  write_text(path, text);
}

namespace {

json read_train_summary(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string());
  std::string line, last;
  while (std::getline(f, line))
    if (!line.empty()) last = line;
  try {
    return json::parse(last).at("summary");
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": no summary line: " + e.what());
  }
}

}  // namespace

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

train::TaskDataset Pipeline::dataset() const {
  train::TaskDataset data = train::make_task(cfg_.task);
  const std::size_t len = train::max_example_length(data);
  require(len <= std::min(cfg_.teacher.max_seq_len, cfg_.student.max_seq_len), ErrorKind::kConfig,
          "task examples need " + std::to_string(len) + " tokens, longer than max_seq_len");
  return data;
}

void Pipeline::record_timing(Stage s, double seconds) {
  const fs::path p = path(files::kTimings);
  json t = fs::exists(p) ? read_json(p) : json::object();
  t[std::string(to_string(s))] = seconds;
  write_json(p, t);
}

void Pipeline::run_stage(Stage s) {
  const std::string name(to_string(s));
  const auto start = std::chrono::steady_clock::now();
  spdlog::info("stage {}: start", name);
  try {
    fs::create_directories(cfg_.out_dir);
    fs::remove(path(files::kPartial));
    switch (s) {
      case Stage::kTeacher: stage_teacher(); break;
      case Stage::kSeedSamples: stage_seed_samples(); break;
      case Stage::kSensitivity: stage_sensitivity(); break;
      case Stage::kLayerMapping: stage_layer_mapping(); break;
      case Stage::kExtraction: stage_extraction(); break;
      case Stage::kInjection: stage_injection(); break;
      case Stage::kFinetune: stage_finetune(); break;
      case Stage::kEvaluate: stage_evaluate(); break;
      case Stage::kReport: stage_report(); break;
    }
  } catch (const std::exception& e) {
    spdlog::error("stage {} failed: {}", name, e.what());
    try {
      write_json(path(files::kPartial), {{"stage", name}, {"error", e.what()}});
    } catch (const std::exception&) {
      // The original failure is more useful than a marker write error.
    }
    fail(ErrorKind::kStage, "stage '" + name + "' failed: " + e.what());
  }
  const double seconds = seconds_since(start);
  record_timing(s, seconds);
  spdlog::info("stage {}: done in {:.2f} s", name, seconds);
}

std::optional<RunReport> Pipeline::run(Stage first, Stage last) {
  require(first <= last, ErrorKind::kInvalidInput, "first stage comes after last stage");
  for (Stage s : kAllStages)
    if (s >= first && s <= last) run_stage(s);
  if (last == Stage::kReport) return load_report(cfg_.out_dir);
  return std::nullopt;
}

void Pipeline::stage_teacher() {
  // The output directory is left out so runs in different directories
  // produce identical artifacts.
  json echo = config_to_json(cfg_);
  echo.erase("out_dir");
  write_json(path(files::kConfig), echo);

  if (!cfg_.teacher_checkpoint.empty()) {
    const tinylm::Model t = load_external(cfg_.teacher_checkpoint, cfg_.teacher, "teacher");
    checkpoint::save(checkpoint::from_model(t), path(files::kTeacher));
  } else {
    const train::TaskDataset data = dataset();
    train::TrainedModel t = train::train_teacher(cfg_.teacher, data, cfg_.teacher_hp);
    spdlog::info("teacher: {} steps, final loss {:.4f}, {:.1f} s", t.log.losses.size(),
                 t.log.losses.empty() ? 0.0 : t.log.losses.back(), t.log.wall_seconds);
    write_train_log(t.log, path(files::kTeacherLog));
    checkpoint::save(checkpoint::from_model(t.model), path(files::kTeacher));
  }

  if (!cfg_.student_checkpoint.empty()) {
    const tinylm::Model s = load_external(cfg_.student_checkpoint, cfg_.student, "student");
    checkpoint::save(checkpoint::from_model(s), path(files::kStudentBase));
  } else {
    tinylm::Model s = tinylm::init_model(cfg_.student);
    const StudentPretrain& sp = cfg_.student_pretrain;
    if (!sp.tasks.empty()) {
      std::vector<train::TaskDataset> parts;
      for (train::TaskKind kind : sp.tasks)
        parts.push_back(train::make_task(
            {.kind = kind, .n_train = sp.n_train, .n_eval = sp.n_eval, .seed = sp.data_seed, .min_len = 1,
             .max_len = sp.max_len}));
      const train::TaskDataset mix = train::mix_tasks(parts, sp.data_seed);
      require(train::max_example_length(mix) <= cfg_.student.max_seq_len, ErrorKind::kConfig,
              "student pretraining examples exceed max_seq_len");
      const train::TrainLog log = train::train_full(s, mix.train, sp.hp);
      spdlog::info("student pretraining: {} steps, eval exact match {:.3f}", log.losses.size(),
                   train::evaluate_exact_match(s, mix.eval));
      write_train_log(log, path(files::kStudentLog));
    }
    checkpoint::save(checkpoint::from_model(s), path(files::kStudentBase));
  }
}

void Pipeline::stage_seed_samples() {
  const train::TaskDataset data = dataset();
  Rng rng(cfg_.sample_seed, "seed_samples");
  json samples = json::array();
  for (std::size_t id : rng.sample_sorted(data.train.size(), cfg_.k))
    samples.push_back({{"id", id}, {"prompt", data.train[id].prompt}, {"completion", data.train[id].completion}});
  write_json(path(files::kSeeds), {{"sample_seed", cfg_.sample_seed},
                                   {"k", cfg_.k},
                                   {"loss", train::to_string(cfg_.seed_loss)},
                                   {"samples", samples}});
}

namespace {

struct SeedFile {
  std::vector<std::size_t> ids;
  std::vector<train::Example> examples;
  train::LossMask loss = train::LossMask::kFullSequence;
};

SeedFile read_seeds(const fs::path& p) {
  const json j = read_json(p);
  SeedFile out;
  try {
    out.loss = train::loss_mask_from_string(j.at("loss").get<std::string>());
    for (const json& s : j.at("samples")) {
      out.ids.push_back(s.at("id").get<std::size_t>());
      out.examples.push_back({s.at("prompt").get<std::string>(), s.at("completion").get<std::string>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, p.string() + ": " + e.what());
  }
  return out;
}

}  // namespace

void Pipeline::stage_sensitivity() {
  const tinylm::Model teacher = load_model(path(files::kTeacher));
  const SeedFile seeds = read_seeds(path(files::kSeeds));
  std::vector<sensitivity::SeedSample> samples;
  for (std::size_t i = 0; i < seeds.ids.size(); ++i)
    samples.push_back({seeds.ids[i], train::make_batch({seeds.examples[i]}, seeds.loss)});
  const sensitivity::SensitivityMap map = sensitivity::accumulate_sensitivity(teacher, std::move(samples));
  checkpoint::save(checkpoint::from_sensitivity(map, teacher.config), path(files::kSensitivity));
}

void Pipeline::stage_layer_mapping() {
  const sensitivity::SensitivityMap map = checkpoint::to_sensitivity(checkpoint::load(path(files::kSensitivity)));
  const sensitivity::LayerScores scores = sensitivity::layer_scores(map);
  const extract::LayerMapping mapping =
      extract::select_layers(scores, cfg_.student.num_layers, cfg_.extraction.layer);
  write_json(path(files::kLayers), {{"strategy", extract::to_string(mapping.strategy.kind)},
                                    {"seed", mapping.strategy.seed},
                                    {"layer_scores", scores.per_layer},
                                    {"teacher_layers", mapping.teacher_layers}});
}

void Pipeline::stage_extraction() {
  const tinylm::Model teacher = load_model(path(files::kTeacher));
  const sensitivity::SensitivityMap map = checkpoint::to_sensitivity(checkpoint::load(path(files::kSensitivity)));
  const SeedFile seeds = read_seeds(path(files::kSeeds));
  const json layers = read_json(path(files::kLayers));
  const extract::ExtractionPlan plan =
      extract::build_extraction_plan(teacher, map, cfg_.student, cfg_.extraction, seeds.ids);
  require(plan.mapping.teacher_layers == layers.at("teacher_layers").get<std::vector<std::size_t>>(),
          ErrorKind::kState, "extraction layer mapping disagrees with " + std::string(files::kLayers));
  checkpoint::save(checkpoint::from_plan(plan, cfg_.student), path(files::kPlan));
  write_json(path(files::kPlanJson), checkpoint::plan_to_json(plan));
}

void Pipeline::stage_injection() {
  const tinylm::Model student = load_model(path(files::kStudentBase));
  const tinylm::Model teacher = load_model(path(files::kTeacher));
  const extract::ExtractionPlan plan = checkpoint::to_plan(checkpoint::load(path(files::kPlan)));
  for (inject::InitStrategy arm : cfg_.arms) {
    inject::InjectOptions opts;
    opts.rank = cfg_.rank;
    opts.init = {arm, cfg_.init_seed};
    opts.targets = cfg_.lora_targets;
    const inject::InjectedModel m = inject::build_injected_model(student, plan, opts, &teacher);
    checkpoint::save(checkpoint::from_injected(m), path(files::injected(arm)));
    json targets = json::object();
    for (const auto& [name, t] : m.lora)
      targets[name] = {{"semantics", inject::to_string(t.semantics)},
                       {"rank", t.init.rank},
                       {"b_shape", {t.init.b.rows(), t.init.b.cols()}},
                       {"a_shape", {t.init.a.rows(), t.init.a.cols()}},
                       {"frozen_subtract", t.init.subtract.has_value()}};
    fs::path sidecar = path(files::injected(arm));
    sidecar.replace_extension(".json");
    write_json(sidecar, {{"arm", inject::to_string(arm)}, {"seed", cfg_.init_seed}, {"rank", cfg_.rank},
                         {"targets", targets}});
  }
}

void Pipeline::stage_finetune() {
  const train::TaskDataset data = dataset();
  for (inject::InitStrategy arm : cfg_.arms) {
    inject::InjectedModel m = checkpoint::to_injected(checkpoint::load(path(files::injected(arm))));
    const train::FinetunedModel ft = train::finetune(std::move(m), data, cfg_.finetune_hp);
    spdlog::info("finetune {}: {} steps, final loss {:.4f}, {:.1f} s", inject::to_string(arm), ft.log.losses.size(),
                 ft.log.losses.empty() ? 0.0 : ft.log.losses.back(), ft.log.wall_seconds);
    write_train_log(ft.log, path(files::train_log(arm)));
    checkpoint::save(checkpoint::from_injected(ft.model), path(files::finetuned(arm)));
  }
}

void Pipeline::stage_evaluate() {
  const train::TaskDataset data = dataset();
  json arms = json::object();
  for (inject::InitStrategy arm : cfg_.arms) {
    const inject::InjectedModel m = checkpoint::to_injected(checkpoint::load(path(files::finetuned(arm))));
    const double acc = train::evaluate_exact_match(m, data.eval);
    spdlog::info("evaluate {}: exact match {:.4f}", inject::to_string(arm), acc);
    arms[std::string(inject::to_string(arm))] = acc;
  }
  const double teacher_acc = train::evaluate_exact_match(load_model(path(files::kTeacher)), data.eval);
  const double student_acc = train::evaluate_exact_match(load_model(path(files::kStudentBase)), data.eval);
  spdlog::info("evaluate teacher: {:.4f}, student base: {:.4f}", teacher_acc, student_acc);
  write_json(path(files::kEval), {{"teacher", teacher_acc}, {"student_base", student_acc}, {"arms", arms}});
}

void Pipeline::stage_report() {
  RunReport r;
  r.config = config_to_json(cfg_);
  r.config.erase("out_dir");
  r.sample_seed = cfg_.sample_seed;
  r.init_seed = cfg_.init_seed;
  r.finetune_seed = cfg_.finetune_hp.seed;
  r.seed_sample_ids = read_seeds(path(files::kSeeds)).ids;

  const extract::ExtractionPlan plan = checkpoint::to_plan(checkpoint::load(path(files::kPlan)));
  r.teacher_layers = plan.mapping.teacher_layers;
  for (const auto& [name, m] : plan.matrices) r.extraction_scores[name] = m.selection.score;

  const json eval = read_json(path(files::kEval));
  try {
    r.teacher_accuracy = eval.at("teacher").get<double>();
    r.student_base_accuracy = eval.at("student_base").get<double>();
    for (inject::InitStrategy arm : cfg_.arms) {
      const json summary = read_train_summary(path(files::train_log(arm)));
      r.arms.push_back({arm, eval.at("arms").at(std::string(inject::to_string(arm))).get<double>(),
                        summary.at("final_loss").get<double>(), summary.at("steps").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("incomplete evaluation artifacts: ") + e.what());
  }

  const sensitivity::SensitivityMap map = checkpoint::to_sensitivity(checkpoint::load(path(files::kSensitivity)));
  heatmap::export_heatmap(map, path(files::kHeatmap));
  write_json(path(files::kReport), r.to_json());
}

RunReport run_pipeline(const PipelineConfig& cfg) { return *Pipeline(cfg).run(); }

RunReport load_report(const fs::path& out_dir) {
  RunReport r = RunReport::from_json(read_json(out_dir / files::kReport));
  const fs::path timings = out_dir / files::kTimings;
  if (fs::exists(timings)) r.stage_seconds = read_json(timings).get<std::map<std::string, double>>();
  return r;
}

}  // namespace pkt::pipeline
