// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the transfer pipeline. Every stage can run on
// its own against the artifacts in --out; "run" executes all of them.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pkt/checkpoint.hpp"
#include "pkt/error.hpp"
#include "pkt/heatmap.hpp"
#include "pkt/pipeline.hpp"

namespace {

using namespace pkt;
using pipeline::PipelineConfig;
using pipeline::Stage;

constexpr const char* kLogEnv = "PKT_LOG_LEVEL";

// Command-line overrides; unset options keep the base config value.
struct Overrides {
  std::optional<std::string> config_file;
  std::optional<std::string> out_dir;

  std::optional<std::size_t> teacher_layers, teacher_hidden, teacher_heads, teacher_ffn, teacher_max_seq;
  std::optional<std::uint64_t> teacher_seed;
  std::optional<std::string> teacher_checkpoint;
  std::optional<std::size_t> teacher_epochs, teacher_batch;
  std::optional<double> teacher_lr;

  std::optional<std::size_t> student_layers, student_hidden, student_heads, student_ffn, student_max_seq;
  std::optional<std::uint64_t> student_seed;
  std::optional<std::string> student_checkpoint;
  std::optional<std::vector<std::string>> pretrain_tasks;
  std::optional<std::size_t> pretrain_epochs;

  std::optional<std::string> task;
  std::optional<std::size_t> modulus, n_train, n_eval;
  std::optional<std::uint64_t> task_seed;

  std::optional<std::size_t> k;
  std::optional<std::uint64_t> sample_seed;
  std::optional<std::string> seed_loss;
  std::optional<std::string> layer_strategy, submatrix_strategy;
  std::optional<std::uint64_t> layer_seed, submatrix_seed;
  std::optional<std::vector<std::string>> roles, lora_targets, arms;
  std::optional<std::size_t> rank;
  std::optional<std::uint64_t> init_seed;

  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr, clip_norm;
  std::optional<std::string> mask;
  std::optional<std::uint64_t> finetune_seed;
};

void add_options(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_file, "JSON pipeline config; defaults to the reference configuration")
      ->check(CLI::ExistingFile);
  app.add_option("--out", o.out_dir, "Output directory for all artifacts");

  app.add_option("--teacher-layers", o.teacher_layers)->group("Teacher");
  app.add_option("--teacher-hidden", o.teacher_hidden)->group("Teacher");
  app.add_option("--teacher-heads", o.teacher_heads)->group("Teacher");
  app.add_option("--teacher-ffn", o.teacher_ffn)->group("Teacher");
  app.add_option("--teacher-max-seq", o.teacher_max_seq)->group("Teacher");
  app.add_option("--teacher-seed", o.teacher_seed, "Init and batch-order seed")->group("Teacher");
  app.add_option("--teacher-checkpoint", o.teacher_checkpoint, "Load this teacher instead of training one")
      ->group("Teacher");
  app.add_option("--teacher-epochs", o.teacher_epochs)->group("Teacher");
  app.add_option("--teacher-batch", o.teacher_batch)->group("Teacher");
  app.add_option("--teacher-lr", o.teacher_lr)->group("Teacher");

  app.add_option("--student-layers", o.student_layers)->group("Student");
  app.add_option("--student-hidden", o.student_hidden)->group("Student");
  app.add_option("--student-heads", o.student_heads)->group("Student");
  app.add_option("--student-ffn", o.student_ffn)->group("Student");
  app.add_option("--student-max-seq", o.student_max_seq)->group("Student");
  app.add_option("--student-seed", o.student_seed)->group("Student");
  app.add_option("--student-checkpoint", o.student_checkpoint, "Load this student base instead of pretraining")
      ->group("Student");
  app.add_option("--pretrain-tasks", o.pretrain_tasks, "Student pretraining tasks; 'none' disables pretraining")
      ->group("Student");
  app.add_option("--pretrain-epochs", o.pretrain_epochs)->group("Student");

  app.add_option("--task", o.task, "modular_add, copy, reverse or sort_digits")->group("Task");
  app.add_option("--modulus", o.modulus)->group("Task");
  app.add_option("--n-train", o.n_train)->group("Task");
  app.add_option("--n-eval", o.n_eval)->group("Task");
  app.add_option("--task-seed", o.task_seed)->group("Task");

  app.add_option("-k,--k", o.k, "Number of seed samples")->group("Transfer");
  app.add_option("--sample-seed", o.sample_seed)->group("Transfer");
  app.add_option("--seed-loss", o.seed_loss, "answer_only or full_sequence")->group("Transfer");
  app.add_option("--layer-strategy", o.layer_strategy, "sensitivity, top, last or random")->group("Transfer");
  app.add_option("--layer-seed", o.layer_seed)->group("Transfer");
  app.add_option("--submatrix-strategy", o.submatrix_strategy,
                 "contiguous, subset_independent, subset_alternating, random, neuron or rowcol")
      ->group("Transfer");
  app.add_option("--submatrix-seed", o.submatrix_seed)->group("Transfer");
  app.add_option("--roles", o.roles, "Extracted role groups: embed, attn, ffn, head")->group("Transfer");
  app.add_option("-r,--rank", o.rank)->group("Transfer");
  app.add_option("--lora-targets", o.lora_targets, "LoRA role groups: embed, attn, ffn, head")->group("Transfer");
  app.add_option("--arms", o.arms, "paper_default, lora_residual, gaussian_zero, random_submatrix")
      ->group("Transfer");
  app.add_option("--init-seed", o.init_seed)->group("Transfer");

  app.add_option("--epochs", o.epochs)->group("Fine-tuning");
  app.add_option("--batch-size", o.batch_size)->group("Fine-tuning");
  app.add_option("--lr", o.lr)->group("Fine-tuning");
  app.add_option("--clip-norm", o.clip_norm)->group("Fine-tuning");
  app.add_option("--mask", o.mask, "answer_only or full_sequence")->group("Fine-tuning");
  app.add_option("--finetune-seed", o.finetune_seed)->group("Fine-tuning");
}

template <typename T>
void apply(const std::optional<T>& value, T& field) {
  if (value) field = *value;
}

std::set<extract::RoleGroup> parse_groups(const std::vector<std::string>& names) {
  std::set<extract::RoleGroup> out;
  for (const std::string& n : names) out.insert(extract::role_group_from_string(n));
  return out;
}

PipelineConfig build_config(const Overrides& o) {
  PipelineConfig cfg = pipeline::reference_config();
  if (o.config_file) {
    std::ifstream f(*o.config_file);
    try {
      cfg = pipeline::config_from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kConfig, *o.config_file + ": " + e.what());
    }
  }
  if (o.out_dir) cfg.out_dir = *o.out_dir;

  apply(o.teacher_layers, cfg.teacher.num_layers);
  apply(o.teacher_hidden, cfg.teacher.hidden_dim);
  apply(o.teacher_heads, cfg.teacher.num_heads);
  apply(o.teacher_ffn, cfg.teacher.ffn_dim);
  apply(o.teacher_max_seq, cfg.teacher.max_seq_len);
  apply(o.teacher_seed, cfg.teacher.seed);
  apply(o.teacher_seed, cfg.teacher_hp.seed);
  if (o.teacher_checkpoint) cfg.teacher_checkpoint = *o.teacher_checkpoint;
  apply(o.teacher_epochs, cfg.teacher_hp.epochs);
  apply(o.teacher_batch, cfg.teacher_hp.batch_size);
  apply(o.teacher_lr, cfg.teacher_hp.learning_rate);

  apply(o.student_layers, cfg.student.num_layers);
  apply(o.student_hidden, cfg.student.hidden_dim);
  apply(o.student_heads, cfg.student.num_heads);
  apply(o.student_ffn, cfg.student.ffn_dim);
  apply(o.student_max_seq, cfg.student.max_seq_len);
  apply(o.student_seed, cfg.student.seed);
  if (o.student_checkpoint) cfg.student_checkpoint = *o.student_checkpoint;
  if (o.pretrain_tasks) {
    cfg.student_pretrain.tasks.clear();
    for (const std::string& t : *o.pretrain_tasks)
      if (t != "none") cfg.student_pretrain.tasks.push_back(train::task_kind_from_string(t));
  }
  apply(o.pretrain_epochs, cfg.student_pretrain.hp.epochs);

  if (o.task) cfg.task.kind = train::task_kind_from_string(*o.task);
  apply(o.modulus, cfg.task.modulus);
  apply(o.n_train, cfg.task.n_train);
  apply(o.n_eval, cfg.task.n_eval);
  apply(o.task_seed, cfg.task.seed);

  apply(o.k, cfg.k);
  apply(o.sample_seed, cfg.sample_seed);
  if (o.seed_loss) cfg.seed_loss = train::loss_mask_from_string(*o.seed_loss);
  if (o.layer_strategy) cfg.extraction.layer.kind = extract::layer_strategy_from_string(*o.layer_strategy);
  apply(o.layer_seed, cfg.extraction.layer.seed);
  if (o.submatrix_strategy)
    cfg.extraction.submatrix.kind = extract::submatrix_strategy_from_string(*o.submatrix_strategy);
  apply(o.submatrix_seed, cfg.extraction.submatrix.seed);
  if (o.roles) cfg.extraction.roles = parse_groups(*o.roles);
  apply(o.rank, cfg.rank);
  if (o.lora_targets) cfg.lora_targets = parse_groups(*o.lora_targets);
  if (o.arms) {
    cfg.arms.clear();
    for (const std::string& a : *o.arms) cfg.arms.push_back(inject::init_strategy_from_string(a));
  }
  apply(o.init_seed, cfg.init_seed);

  apply(o.epochs, cfg.finetune_hp.epochs);
  apply(o.batch_size, cfg.finetune_hp.batch_size);
  apply(o.lr, cfg.finetune_hp.learning_rate);
  apply(o.clip_norm, cfg.finetune_hp.clip_norm);
  if (o.mask) cfg.finetune_hp.mask = train::loss_mask_from_string(*o.mask);
  apply(o.finetune_seed, cfg.finetune_hp.seed);

  cfg.validate();
  return cfg;
}

void configure_logging() {
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  if (const char* level = std::getenv(kLogEnv)) spdlog::set_level(spdlog::level::from_str(level));
}

void print_report(const pipeline::RunReport& r) {
  std::cout << "teacher exact match:      " << r.teacher_accuracy << "\n"
            << "student base exact match: " << r.student_base_accuracy << "\n";
  for (const pipeline::ArmResult& a : r.arms)
    std::cout << "arm " << inject::to_string(a.arm) << ": exact match " << a.eval_accuracy << ", final loss "
              << a.final_loss << "\n";
  double total = 0.0;
  for (const auto& [stage, s] : r.stage_seconds) total += s;
  std::cout << "total stage time: " << total << " s\n";
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"Sensitivity-guided parameter transfer from a teacher to a smaller student"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  add_options(app, o);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the effective config as JSON before running");

  struct Command {
    const char* name;
    const char* help;
    Stage first;
    Stage last;
  };
  const Command commands[] = {
      {"train-teacher", "Train or import the teacher and prepare the student base", Stage::kTeacher, Stage::kTeacher},
      {"score", "Draw seed samples and accumulate teacher sensitivity", Stage::kSeedSamples, Stage::kSensitivity},
      {"extract", "Map layers and build the extraction plan", Stage::kLayerMapping, Stage::kExtraction},
      {"inject", "Factorize extracted blocks into LoRA modules per arm", Stage::kInjection, Stage::kInjection},
      {"finetune", "LoRA fine-tuning per arm", Stage::kFinetune, Stage::kFinetune},
      {"eval", "Exact-match evaluation of teacher, student base and every arm", Stage::kEvaluate, Stage::kEvaluate},
  };
  std::vector<std::pair<CLI::App*, const Command*>> stage_cmds;
  for (const Command& c : commands) stage_cmds.emplace_back(app.add_subcommand(c.name, c.help), &c);

  CLI::App* run = app.add_subcommand("run", "Run every stage and write the report");
  std::string from = "teacher", to = "report";
  run->add_option("--from", from, "First stage to run");
  run->add_option("--to", to, "Last stage to run");

  CLI::App* heat = app.add_subcommand("heatmap", "Export heatmap CSVs from a sensitivity checkpoint");
  std::string sens_path, csv_path;
  heat->add_option("--sensitivity", sens_path, "Sensitivity checkpoint (default <out>/sensitivity.pkt)");
  heat->add_option("--csv", csv_path, "Normalized CSV path (default <out>/heatmap.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    const PipelineConfig cfg = build_config(o);
    if (print_config) std::cout << pipeline::config_to_json(cfg).dump(2) << "\n";
    pipeline::Pipeline p(cfg);

    for (const auto& [sub, c] : stage_cmds) {
      if (!sub->parsed()) continue;
      p.run(c->first, c->last);
      return 0;
    }
    if (run->parsed()) {
      const auto report = p.run(pipeline::stage_from_string(from), pipeline::stage_from_string(to));
      if (report) print_report(*report);
      return 0;
    }
    if (heat->parsed()) {
      const std::filesystem::path in = sens_path.empty() ? p.path(pipeline::files::kSensitivity) : std::filesystem::path(sens_path);
      const std::filesystem::path out = csv_path.empty() ? p.path(pipeline::files::kHeatmap) : std::filesystem::path(csv_path);
      const auto map = checkpoint::to_sensitivity(checkpoint::load(in));
      const auto files = heatmap::export_heatmap(map, out);
      std::cout << files.normalized.string() << "\n" << files.raw_sums.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
