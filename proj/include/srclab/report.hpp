#pragma once

// Checkpoint sweeps, the multi-run experiment suite and its CSV/SVG report.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srclab/train.hpp"

namespace srclab {

struct CurvePoint {
  std::size_t step = 0;
  double bleu = 0.0;
  double src_contrib_mean = 0.0;
  double src_contrib_std = 0.0;
};

/// Evaluates every checkpoint under `phase_dir`/checkpoints in step order.
/// Unreadable checkpoints are skipped with a warning on stderr.
std::vector<CurvePoint> contribution_curve(const std::filesystem::path& phase_dir, const Dataset& eval,
                                           const EvalOptions& options);

/// Curve points recorded in a training log.
std::vector<CurvePoint> curve_from_log(const TrainLog& log);

/// Mean of the k largest scores (all of them when fewer than k).
double best_k_average(std::vector<double> scores, std::size_t k);

/// Mean source contribution over the last ceil(tail * n) points of a curve.
double curve_plateau(const std::vector<CurvePoint>& curve, double tail = 0.2);

/// First step whose source contribution reaches `fraction` of the plateau.
std::optional<std::size_t> steps_to_fraction(const std::vector<CurvePoint>& curve, double fraction,
                                             double tail = 0.2);

/// Minimum source contribution over the first ceil(head * n) points.
double early_minimum(const std::vector<CurvePoint>& curve, double head = 0.1);

/// Element-wise mean of parameter sets sharing one layout.
Model<float> average_models(const std::vector<Model<float>>& models);

// ---------------------------------------------------------------------------
// Suite

struct RunSpec {
  std::string name;
  Pipeline pipeline = Pipeline::Scratch;
  TaskKind task = TaskKind::STAnalog;
  ResidualVariant residual = ResidualVariant::Standard;
};

/// The eight comparison runs, in report order.
std::vector<RunSpec> standard_runs();

enum class BestKMode { Scores, Parameters };

struct SuiteConfig {
  PipelineConfig base;  // per-run fields (name, pipeline, task, residual, seed) are overwritten
  std::vector<std::uint64_t> seeds{1, 2, 3};
  SplitSizes splits{20000, 1000, 1000};
  SplitSeeds split_seeds;
  std::vector<std::string> runs;  // empty = all standard runs
  BestKMode best_k_mode = BestKMode::Scores;
  std::size_t test_sentences = 0;  // 0 = whole test split

  std::vector<RunSpec> selected_runs() const;
};

/// Built-in presets: "default" (desk-scale comparison) and "quick" (smoke size).
SuiteConfig suite_preset(const std::string& name);
nlohmann::json to_json(const SuiteConfig& c);
SuiteConfig suite_config_from_json(const nlohmann::json& j);
/// Either a preset name or a path to a JSON file (a preset plus overrides
/// when it carries a "preset" key).
SuiteConfig load_suite_config(const std::string& name_or_path);

/// Pipeline config of one run of the suite.
PipelineConfig run_pipeline_config(const SuiteConfig& suite, const RunSpec& run, std::uint64_t seed);

struct RunReport {
  std::string run;
  bool pretrained = false;
  std::vector<CurvePoint> curve;
  double final_bleu = 0.0;    // test BLEU of the final parameters
  double best10_bleu = 0.0;   // best-K by valid BLEU, evaluated on test
  double final_src_contrib = 0.0;
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::vector<RunReport> runs;
  std::vector<std::string> missing;
};

/// Summarizes a finished bundle on `test`.
RunReport summarize_run(const ExperimentBundle& bundle, const Dataset& test, const SuiteConfig& suite);

/// curves.csv (run,step,bleu,src_contrib_mean,src_contrib_std),
/// summary.csv (run,pretrained,final_bleu,best10_bleu,final_src_contrib)
/// and curves.svg. Missing runs are listed in missing.txt.
void emit_report(const SeedReport& report, const std::filesystem::path& dir);

/// Two stacked panels (source contribution with a std band, BLEU); one
/// polyline per run and panel.
std::string render_svg(const std::vector<RunReport>& runs);

/// Rebuilds a seed report from bundles already on disk.
SeedReport load_seed_report(const std::filesystem::path& seed_dir);

struct SuiteResult {
  std::vector<SeedReport> seeds;
};

/// Generates the data, runs every selected run for every seed into
/// `out_dir`/seed_<s>/<run>/ and emits the per-seed reports plus
/// `out_dir`/summary_by_seed.csv.
SuiteResult run_suite(const SuiteConfig& config, const std::filesystem::path& out_dir, bool quiet = true);

/// Human-readable plan (runs, phases, update counts) without training.
std::string describe_suite(const SuiteConfig& config);

}  // namespace srclab
