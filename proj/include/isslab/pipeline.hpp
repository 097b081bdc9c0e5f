#pragma once

#include "isslab/dataset.hpp"
#include "isslab/losses.hpp"
#include "isslab/metrics.hpp"
#include "isslab/replay.hpp"
#include "isslab/segmodel.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace isslab {

/// Loss terms and optional replay steps that make up one method.
struct MethodSpec {
  std::string name;
  losses::TermWeights step1;  // incremental stages; the base stage always uses plain CE
  bool replay = false;
  losses::TermWeights step3;
  bool step3_mem = false;
};

struct Hyperparams {
  double lambda_ali = 1.0;
  double lambda_kd = 1.0;
  double lambda_mem = 1.0;
  double lambda_rot = 0.5;
  double tau = 10.0;
  int memory_size = 50;
  double focal_alpha = 2.0;
  bool normalize_by_s = false;

  double lr_base = 0.05;
  double lr_inc = 0.004;
  double lr_rot = 1e-2;
  double lr_ft = 0.02;
  double momentum = 0.9;
  int epochs_base = 20;
  int epochs_inc = 10;
  int epochs_rot = 10;
  int epochs_ft = 1;
  double poly_power = 0.9;
  int batch_size = 4;
  int rot_batch_size = 4;

  void validate() const;
};

/// Resolves a method name against `hp`'s balance weights.  Known names:
/// ce_only, mib, ce_ali, ce_ali_kd_labeled, ce_ali_kd_unlabeled,
/// ce_ali_kd_all, alife, alife_m and the Step-3 variants s3_ce_labeled,
/// s3_ce_all, s3_fl_labeled, s3_fl_all, s3_fl_all_mem, s3_fl_all_ali,
/// s3_fl_all_ali_mem.  Throws std::invalid_argument otherwise.
MethodSpec method_preset(const std::string& name, const Hyperparams& hp);
std::vector<std::string> method_names();

struct StageResult {
  int stage = 0;
  MetricsReport metrics;
  double wall_time = 0.0;  // seconds; kept out of the metric records
  int memory_categories = 0;
  int rotations = 0;
  std::int64_t memory_bytes = 0;
  std::uint64_t clamp_warnings = 0;

  nlohmann::json to_json() const;
};

/// Model and replay state carried from one stage to the next.
struct ScenarioState {
  std::optional<ModelParams> model;
  FeatureMemory memory;
};

/// Inputs shared by every stage of one seed.
struct StageEnv {
  const Scenario* scenario = nullptr;
  ModelConfig model;
  Hyperparams hp;
  MethodSpec method;
  std::uint64_t seed = 0;
  int threads = 1;
};

namespace pipeline {

/// Labeled pixels keep their label; the rest take the previous model's
/// argmax over its categories, lowest id on ties.
std::vector<int> pseudo_label(const ModelParams& prev_model, const Image& image, const std::vector<int>& mask);
std::vector<int> pseudo_label_from_probs(const Matrix& prev_probs, const std::vector<int>& mask);

/// Argmax over classes per pixel, lowest id on ties.
std::vector<int> predict(const ModelParams& model, const Image& image);

/// Full-label evaluation over the categories known at `stage`; pixels of
/// categories not yet introduced are skipped.
MetricsReport evaluate(const ModelParams& model, const Scenario& scenario, int stage, int threads);

/// Base-stage training (plain CE on the labeled region).
ModelParams train_base(const StageEnv& env);

/// Step 1 on an incremental stage, starting from `prev` extended with the
/// stage's new classifier rows.
ModelParams train_step1(const StageEnv& env, int stage, const ModelParams& prev);

/// Step 3: classifier fine-tuning with the extractor frozen.
ModelParams finetune_classifier(const StageEnv& env, int stage, const ModelParams& model,
                                const ModelParams& prev_model, const FeatureMemory& rotated_memory);

/// Runs stage `stage` and advances `state`.  A precomputed base model may
/// be passed for stage 1 so several methods can share it.
StageResult run_stage(ScenarioState& state, const StageEnv& env, int stage,
                      const ModelParams* base_model = nullptr);

struct SeedRun {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<StageResult> stages;
};

struct RunRequest {
  ScenarioSpec scenario;
  GeneratorConfig generator;
  ModelConfig model;
  Hyperparams hp;
  std::vector<std::string> methods;
  std::uint64_t base_seed = 0;
  int seeds = 1;
  int threads = 1;
};

struct MethodSummary {
  std::string method;
  int runs = 0;
  std::optional<double> miou_base_mean, miou_base_std;
  std::optional<double> miou_new_mean, miou_new_std;
  std::optional<double> miou_mean, miou_std;
  std::optional<double> hiou_mean, hiou_std;
  std::int64_t memory_bytes = 0;
  std::vector<std::optional<double>> per_class_iou_mean;

  nlohmann::json to_json() const;
};

struct RunOutcome {
  std::vector<SeedRun> runs;  // methods major, seeds minor
  std::vector<MethodSummary> summary;
};

/// Every method over seeds base_seed, base_seed + 1, ...  Each seed gets its
/// own scenario; the base model of a seed is trained once and shared.
RunOutcome run_scenario(const RunRequest& req);

/// Mean and sample standard deviation of the last stage of each method.
std::vector<MethodSummary> summarize(const std::vector<SeedRun>& runs);

/// Deterministic metric record: no timings, no build information.
nlohmann::json metrics_json(const RunRequest& req, const RunOutcome& outcome);

/// metrics.json, stages.csv, summary.csv, hiou_vs_memory.tsv,
/// per_category_iou.tsv and timing.json.
void write_outputs(const std::filesystem::path& dir, const RunRequest& req, const RunOutcome& outcome);

}  // namespace pipeline
}  // namespace isslab
