#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "srclab/report.hpp"

namespace srclab {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string config = "default";
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool out_dir_required) {
  cmd->add_option("--seed", flags.seed, "Seed override");
  auto* out = cmd->add_option("--out-dir", flags.out_dir, "Output directory");
  if (out_dir_required) out->required();
  cmd->add_option("--config", flags.config, "Suite preset (default, quick) or JSON config file")
      ->capture_default_str();
}

TaskKind task_or_throw(const std::string& s) { return parse_task_kind(s); }

DatasetSplits load_splits(const fs::path& data_dir, TaskKind task) {
  const auto dir = data_dir / to_string(task);
  DatasetSplits splits;
  for (const char* split : {"train", "valid", "test"}) {
    if (!fs::exists(dir / (std::string(split) + ".txt")))
      throw std::runtime_error("dataset " + (dir / (std::string(split) + ".txt")).string() +
                               " not found; create it with `srclab gen-data --out-dir " + data_dir.string() + "`");
  }
  splits.train = load_dataset(dir, "train");
  splits.valid = load_dataset(dir, "valid");
  splits.test = load_dataset(dir, "test");
  return splits;
}

int cmd_gen_data(const CommonFlags& flags, const std::string& task, std::ostream& out) {
  auto suite = load_suite_config(flags.config);
  if (flags.seed) {
    suite.base.language.seed = *flags.seed;
    suite.base.frames.seed = derive_seed(*flags.seed, 7);
  }
  std::vector<TaskKind> kinds;
  if (task == "all")
    kinds = {TaskKind::MT, TaskKind::ASRAnalog, TaskKind::STAnalog};
  else
    kinds = {task_or_throw(task)};
  for (auto kind : kinds) {
    const auto splits = make_task_dataset(kind, suite.base.language, suite.base.frames, suite.splits, suite.split_seeds);
    const auto dir = fs::path(flags.out_dir) / to_string(kind);
    save_dataset(splits.train, dir, "train");
    save_dataset(splits.valid, dir, "valid");
    save_dataset(splits.test, dir, "test");
    out << "wrote " << to_string(kind) << " to " << dir.string() << " (" << splits.train.examples.size() << '/'
        << splits.valid.examples.size() << '/' << splits.test.examples.size() << ")\n";
  }
  std::ofstream spec(fs::path(flags.out_dir) / "data_config.json", std::ios::binary);
  spec << to_json(suite).dump(2) << '\n';
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& data_dir, const std::string& task,
              const std::string& pipeline, const std::string& residual, std::ostream& out) {
  const auto suite = load_suite_config(flags.config);
  RunSpec run{"train", parse_pipeline(pipeline), task_or_throw(task), parse_residual_variant(residual)};
  if (run.task == TaskKind::ASRAnalog && run.pipeline == Pipeline::PretrainThenFinetune)
    throw ContractViolation("pretrain_then_finetune needs a translation task");
  if (!fs::is_directory(data_dir))
    throw std::runtime_error("data directory '" + data_dir + "' does not exist; create it with `srclab gen-data --out-dir " +
                             data_dir + "`");
  const auto main = load_splits(data_dir, run.task);
  std::optional<DatasetSplits> pre;
  if (run.pipeline == Pipeline::PretrainThenFinetune) pre = load_splits(data_dir, TaskKind::ASRAnalog);
  const auto pc = run_pipeline_config(suite, run, flags.seed.value_or(1));
  const auto bundle = run_pipeline(pc, {&main, pre ? &*pre : nullptr}, flags.out_dir, nullptr, false);
  const auto summary = summarize_run(bundle, main.test, suite);
  out << "final test BLEU " << summary.final_bleu << ", best-" << pc.finetune.best_k << " BLEU " << summary.best10_bleu
      << ", source contribution " << summary.final_src_contrib << '\n';
  return 0;
}

int cmd_analyze(const CommonFlags& flags, const std::string& bundle, const std::string& data_dir,
                const std::string& task, const std::string& split, std::ostream& out) {
  const auto suite = load_suite_config(flags.config);
  if (split != "valid" && split != "test") throw ContractViolation("--split must be valid or test");
  const auto splits = load_splits(data_dir, task_or_throw(task));
  const auto& data = split == "valid" ? splits.valid : splits.test;
  if (!fs::is_directory(fs::path(bundle) / "checkpoints"))
    throw std::runtime_error("no checkpoints under " + bundle + " (expected a training phase directory)");
  const auto curve = contribution_curve(bundle, data, suite.base.eval);
  if (curve.empty()) throw std::runtime_error("no readable checkpoints under " + bundle);
  fs::create_directories(flags.out_dir);
  const auto path = fs::path(flags.out_dir) / "curve.csv";
  std::ofstream os(path, std::ios::binary);
  os << "step,bleu,src_contrib_mean,src_contrib_std\n";
  os.precision(17);
  for (const auto& p : curve) os << p.step << ',' << p.bleu << ',' << p.src_contrib_mean << ',' << p.src_contrib_std << '\n';
  out << "analyzed " << curve.size() << " checkpoints into " << path.string() << '\n';
  return 0;
}

int cmd_report(const CommonFlags& flags, std::ostream& out) {
  const fs::path root(flags.out_dir);
  if (!fs::is_directory(root)) throw std::runtime_error("suite directory '" + flags.out_dir + "' does not exist");
  std::vector<fs::path> seeds;
  for (const auto& entry : fs::directory_iterator(root)) {
    const auto name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("seed_", 0) != 0) continue;
    if (flags.seed && name != "seed_" + std::to_string(*flags.seed)) continue;
    seeds.push_back(entry.path());
  }
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw std::runtime_error("no seed_<n> directories under " + flags.out_dir);
  for (const auto& dir : seeds) {
    const auto report = load_seed_report(dir);
    emit_report(report, dir);
    out << "wrote report for " << dir.filename().string() << " (" << report.runs.size() << " runs)\n";
  }
  return 0;
}

int cmd_suite(const CommonFlags& flags, bool dry_run, bool quiet, std::ostream& out) {
  auto suite = load_suite_config(flags.config);
  if (flags.seed) suite.seeds = {*flags.seed};
  out << describe_suite(suite);
  if (dry_run) return 0;
  if (flags.out_dir.empty()) throw ContractViolation("suite needs --out-dir unless --dry-run is given");
  run_suite(suite, flags.out_dir, quiet);
  out << "suite finished; reports under " << flags.out_dir << '\n';
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"srclab: source-contribution experiments on synthetic translation tasks"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, analyze_flags, report_flags, suite_flags;
  std::string gen_task = "all";
  auto* gen = app.add_subcommand("gen-data", "Generate and save the synthetic datasets");
  add_common(gen, gen_flags, true);
  gen->add_option("--task", gen_task, "mt, asr_analog, st_analog or all")->capture_default_str();

  std::string train_data, train_task = "st_analog", train_pipeline = "scratch", train_residual = "standard";
  auto* tr = app.add_subcommand("train", "Train one pipeline on saved datasets");
  add_common(tr, train_flags, true);
  tr->add_option("--data-dir", train_data, "Directory written by gen-data")->required();
  tr->add_option("--task", train_task, "mt or st_analog")->capture_default_str();
  tr->add_option("--pipeline", train_pipeline, "scratch or pretrain_then_finetune")->capture_default_str();
  tr->add_option("--residual", train_residual, "standard, werc, werc_no_norm or werc_no_weights")
      ->capture_default_str();

  std::string an_bundle, an_data, an_task = "st_analog", an_split = "valid";
  auto* an = app.add_subcommand("analyze", "Evaluate every checkpoint of a training phase");
  add_common(an, analyze_flags, true);
  an->add_option("--bundle", an_bundle, "Phase directory holding checkpoints/")->required();
  an->add_option("--data-dir", an_data, "Directory written by gen-data")->required();
  an->add_option("--task", an_task, "Task of the evaluation data")->capture_default_str();
  an->add_option("--split", an_split, "valid or test")->capture_default_str();

  auto* rep = app.add_subcommand("report", "Regenerate CSV and SVG reports of a finished suite");
  add_common(rep, report_flags, true);

  bool dry_run = false;
  bool quiet = false;
  auto* su = app.add_subcommand("suite", "Run the full comparison suite");
  add_common(su, suite_flags, false);
  su->add_flag("--dry-run", dry_run, "Print the planned runs without training");
  su->add_flag("--quiet", quiet, "Suppress progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) return cmd_gen_data(gen_flags, gen_task, out);
    if (*tr) return cmd_train(train_flags, train_data, train_task, train_pipeline, train_residual, out);
    if (*an) return cmd_analyze(analyze_flags, an_bundle, an_data, an_task, an_split, out);
    if (*rep) return cmd_report(report_flags, out);
    if (*su) return cmd_suite(suite_flags, dry_run, quiet, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace srclab
