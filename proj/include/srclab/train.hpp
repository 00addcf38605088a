#pragma once

// Optimization loop, checkpoint files and the two training pipelines
// (from-scratch translation, and recognition pretraining followed by a
// decoder re-initialization and translation finetuning).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srclab/eval.hpp"
#include "srclab/model.hpp"
#include "srclab/synth.hpp"

namespace srclab {

/// Linear warmup to `peak` at step w, then peak * sqrt(w / step).
double lr_schedule(std::size_t step, std::size_t warmup, double peak);

struct ClipResult {
  double pre_norm = 0.0;
  double scale = 1.0;
};

/// Scales all gradients by clip_norm / g when their global l2 norm g exceeds
/// clip_norm. Throws NumericError naming the first non-finite gradient.
template <typename T>
ClipResult clip_grads(const std::vector<std::string>& names, std::vector<Tensor<T>>& params, double clip_norm);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam step on every tensor, reading its gradient
/// (absent gradients count as zero). State is sized on first use.
template <typename T>
void adam_update(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamOptions& options = {});

enum class Pipeline { Scratch, PretrainThenFinetune };
std::string to_string(Pipeline p);
Pipeline parse_pipeline(const std::string& s);

struct TrainConfig {
  std::size_t max_updates = 6000;
  std::size_t warmup_updates = 300;
  double peak_lr = 2e-3;
  double clip_norm = 10.0;
  double label_smoothing = 0.1;
  std::size_t checkpoint_every_dense = 30;
  std::size_t early_phase_boundary = 600;
  std::size_t checkpoint_every_sparse = 300;
  std::uint64_t seed = 1;
  Pipeline pipeline = Pipeline::Scratch;
  TaskKind task = TaskKind::STAnalog;
  /// Evaluation cadence; 0 evaluates exactly at checkpoint steps.
  std::size_t eval_every = 0;
  std::size_t max_tokens = 1200;
  std::size_t best_k = 10;
  AdamOptions adam;

  /// Throws ContractViolation listing every invalid field.
  void validate() const;
  bool is_checkpoint_step(std::size_t step) const;
  bool is_eval_step(std::size_t step) const;
};

struct TrainLogRow {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over updates since the previous row
  double valid_loss = 0.0;
  double valid_bleu = 0.0;
  double src_contrib_mean = 0.0;
  double src_contrib_std = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  /// Throws ContractViolation unless steps strictly increase and values are finite.
  void validate() const;
  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Writes <stem>.txt (manifest: step, config, one line per tensor with
/// name, dtype, shape and byte offset) and <stem>.bin (little-endian float32).
void save_checkpoint(const std::filesystem::path& stem, const Model<float>& model, std::size_t step);

struct LoadedCheckpoint {
  Model<float> model;
  std::size_t step = 0;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem);

std::string checkpoint_stem(std::size_t step);  // "ckpt_000300"

struct CheckpointRecord {
  std::size_t step = 0;
  std::filesystem::path stem;
  std::optional<double> valid_bleu;  // set when the step was also evaluated
};

/// The k checkpoints with the highest valid BLEU (ties: earlier step), in
/// descending BLEU order.
std::vector<CheckpointRecord> best_k(const std::vector<CheckpointRecord>& checkpoints, std::size_t k);

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  Model<float> model;
  TrainLog log;
  std::vector<CheckpointRecord> checkpoints;
  std::vector<CheckpointRecord> best;
};

/// Thrown when a loss or gradient turns non-finite; checkpoints written
/// before `step` stay on disk.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(std::size_t step, const std::string& what)
      : NumericError("training aborted at update " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Teacher-forced training. Checkpoints go to `out_dir`/checkpoints when
/// `out_dir` is set; the log is evaluated on `eval` with `eval_options`.
TrainResult train(Model<float> model, const Dataset& train_data, const Dataset& eval, const TrainConfig& config,
                  const EvalOptions& eval_options, const std::optional<std::filesystem::path>& out_dir = {},
                  bool quiet = true);

// ---------------------------------------------------------------------------
// Pipelines

struct PipelineConfig {
  std::string name = "run";
  SynthLanguageSpec language;
  FrameRenderSpec frames;
  ModelConfig model;  // final phase; configure_for_task is applied to both phases
  TrainConfig finetune;          // pipeline, task and seed are read from here
  TrainConfig pretrain;          // used by PretrainThenFinetune only
  double pretrain_lr_ratio = 0.5;  // pretrain peak lr = finetune peak lr * ratio
  EvalOptions eval;
};

struct PhaseResult {
  std::string phase;  // "pretrain" or "finetune"
  TaskKind task = TaskKind::STAnalog;
  TrainResult result;
  std::filesystem::path dir;
};

struct ExperimentBundle {
  std::string name;
  Pipeline pipeline = Pipeline::Scratch;
  std::filesystem::path dir;
  std::vector<PhaseResult> phases;
  const PhaseResult& final_phase() const { return phases.back(); }
};

struct PipelineData {
  const DatasetSplits* main = nullptr;      // task of the final phase
  const DatasetSplits* pretrain = nullptr;  // recognition data for PretrainThenFinetune
};

/// Model config of a pipeline phase: the run's config adapted to the
/// phase's task. The pretraining phase always uses the standard residual,
/// since its decoder is discarded.
ModelConfig phase_model_config(const PipelineConfig& config, TaskKind task, bool pretraining);

/// Train config of the pretraining phase derived from the finetune config.
TrainConfig pretrain_train_config(const PipelineConfig& config);

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

/// Runs the configured pipeline into `dir`/<phase>/. A pretraining phase
/// already computed elsewhere can be supplied to share it between runs;
/// it is then copied into the bundle record, not retrained.
ExperimentBundle run_pipeline(const PipelineConfig& config, const PipelineData& data, const std::filesystem::path& dir,
                              const PhaseResult* shared_pretrain = nullptr, bool quiet = true);

/// Encoder parameters carried over from pretraining and a freshly drawn decoder.
Model<float> finetune_start(const ModelConfig& finetune_config, const Model<float>& pretrained, std::uint64_t seed);

}  // namespace srclab
