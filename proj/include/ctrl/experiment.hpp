#pragma once

// Config-driven pipeline: world -> dataset -> classifier -> finetune -> baselines -> evaluate.
// Every stage reads its inputs from the run directory, so any stage can be re-run or
// resumed on its own and produces byte-identical artifacts for the same config.

#include "ctrl/classifier.hpp"
#include "ctrl/eval.hpp"
#include "ctrl/finetune.hpp"
#include "ctrl/guidance.hpp"
#include "ctrl/worlds.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace ctrl {

struct ClassifierSettings {
  std::vector<int> hidden{32, 32};
  bool use_context = true;
  /// One model per label axis (FactoredClassifier) instead of one joint softmax.
  bool factored = false;
  bool calibrate = true;
  ClassifierTrainConfig train;
};

struct FinetuneSettings {
  AugmentedDriftConfig model;
  FinetuneConfig train;
  /// "classifier" (default) or "oracle".
  std::string reward = "classifier";
};

struct BaselineSettings {
  std::vector<std::string> methods;
  int smc_particles = 1024;
  int best_of_n_candidates = 16;
  ClassifierFreeConfig classifier_free;
  AugmentedDriftConfig classifier_free_model;
  /// Extra (gamma1, gamma2) samplers on the fine-tuned model, named mix_<g1>_<g2>.
  std::vector<std::pair<double, double>> mixing;
};

struct EvaluationSettings {
  int samples = 512;  // per (context, label)
  double gamma = -1.0;  // target strength; negative means the fine-tuning gamma
  int bins = 100;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int workers = 0;
  /// Preset name ("w1", "w2"), or "custom" with a full world_definition.
  std::string world = "w1";
  nlohmann::json world_definition;
  int steps = 256;
  double horizon = 5.0;
  int dataset_size = 4000;
  DatasetMode dataset_mode = DatasetMode::Joint;
  double train_fraction = 0.8;
  ClassifierSettings classifier;
  FinetuneSettings finetune;
  BaselineSettings baselines;
  EvaluationSettings evaluation;
  std::filesystem::path output = "runs/experiment";

  /// Strict parse: unknown keys and out-of-range values are ConfigErrors.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Fully resolved config (defaults filled in).
  nlohmann::json to_json() const;
  /// FNV-1a of the resolved config dump, as 16 hex digits.
  /// Output directory and worker count are excluded: neither affects results.
  std::string hash() const;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"world", "dataset", "classifier", "finetune", "baselines", "evaluate"};
  return names;
}

/// Known sampling methods: ctrl, pretrained, doob, reconstruction, smc, best_of_n, classifier_free.
bool known_method(const std::string& method);
/// Display name used in comparison tables.
std::string method_label(const std::string& method);

class Experiment {
 public:
  /// `output` overrides config.output when non-empty.
  Experiment(ExperimentConfig config, std::filesystem::path output = {});

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& directory() const { return dir_; }

  /// Human-readable plan of stages and artifacts; no compute.
  std::string plan(const std::vector<std::string>& stages) const;
  /// Runs the selected stages in dependency order (all when empty). On failure the manifest
  /// marks the stage, partial artifacts stay on disk, and the error is rethrown.
  void run(const std::vector<std::string>& stages = {}, std::ostream* log = nullptr);
  /// Re-runs every stage not marked done in the manifest; fine-tuning continues from
  /// its last periodic checkpoint.
  void resume(std::ostream* log = nullptr);

  nlohmann::json manifest() const;

  /// Aborts fine-tuning with an error once `updates` updates are checkpointed; simulates a crash.
  void interrupt_after(int updates) { interrupt_after_ = updates; }

  /// Rebuilds the run from its directory (config.json).
  static Experiment open(const std::filesystem::path& directory);

 private:
  void run_stage(const std::string& stage, std::ostream* log, bool resuming);
  void stage_world();
  void stage_dataset();
  void stage_classifier();
  void stage_finetune(bool resuming);
  void stage_baselines();
  void stage_evaluate();

  void load_world();
  std::unique_ptr<LabelLikelihood> load_classifier() const;
  void write_manifest(const nlohmann::json& m) const;
  nlohmann::json read_manifest() const;
  void write_samples(const std::string& method, const std::vector<ConditionSamples>& samples) const;
  std::vector<ConditionSamples> read_samples(const std::string& method) const;
  std::vector<std::pair<int, int>> conditions() const;
  double eval_gamma() const;

  ExperimentConfig config_;
  std::filesystem::path dir_;
  std::unique_ptr<DiffusionWorld> world_;
  int interrupt_after_ = -1;
};

/// Method rows of several runs: run,method,accuracy,accuracy_se,macro_f1,mean_tv,mean_w1.
/// ConfigError when the runs use different worlds.
std::string compare_runs(const std::vector<std::filesystem::path>& runs);

/// Reads a sample file written by a run.
std::vector<ConditionSamples> load_samples_csv(const std::filesystem::path& path, int dim);

}  // namespace ctrl
