#include "srclab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace srclab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::vector<double> scores_on(const std::vector<Model<float>>& models, const Dataset& test, const SuiteConfig& suite,
                              const EvalOptions& eval) {
  std::vector<double> out;
  for (const auto& m : models)
    out.push_back(decode_bleu(m, test, suite.test_sentences, eval.batch_size, eval.decode_max_len));
  return out;
}

}  // namespace

std::vector<CurvePoint> contribution_curve(const fs::path& phase_dir, const Dataset& eval, const EvalOptions& options) {
  const auto dir = phase_dir / "checkpoints";
  std::vector<std::pair<std::size_t, fs::path>> stems;
  if (fs::is_directory(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".txt") continue;
      auto stem = entry.path();
      stem.replace_extension();
      const auto name = stem.filename().string();
      if (name.rfind("ckpt_", 0) != 0) continue;
      try {
        stems.emplace_back(std::stoull(name.substr(5)), stem);
      } catch (const std::exception&) {
        std::cerr << "warning: ignoring " << entry.path() << " (no step in the file name)\n";
      }
    }
  }
  std::sort(stems.begin(), stems.end());
  std::vector<CurvePoint> out;
  for (const auto& [step, stem] : stems) {
    try {
      const auto ckpt = load_checkpoint(stem);
      const auto rec = evaluate_model(ckpt.model, eval, options);
      out.push_back({ckpt.step, rec.bleu, rec.src_contrib_mean, rec.src_contrib_std});
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping checkpoint " << stem << ": " << e.what() << '\n';
    }
  }
  return out;
}

std::vector<CurvePoint> curve_from_log(const TrainLog& log) {
  std::vector<CurvePoint> out;
  for (const auto& r : log.rows) out.push_back({r.step, r.valid_bleu, r.src_contrib_mean, r.src_contrib_std});
  return out;
}

double best_k_average(std::vector<double> scores, std::size_t k) {
  if (scores.empty() || k == 0) throw ContractViolation("best_k_average needs at least one score and k >= 1");
  std::sort(scores.begin(), scores.end(), std::greater<>());
  const auto n = std::min(k, scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += scores[i];
  return sum / double(n);
}

namespace {

std::size_t fraction_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractViolation("curve fraction must lie in (0, 1]");
  return std::max<std::size_t>(1, std::size_t(std::ceil(fraction * double(n) - 1e-9)));
}

}  // namespace

double curve_plateau(const std::vector<CurvePoint>& curve, double tail) {
  if (curve.empty()) throw ContractViolation("empty curve");
  const auto k = fraction_count(curve.size(), tail);
  double sum = 0.0;
  for (std::size_t i = curve.size() - k; i < curve.size(); ++i) sum += curve[i].src_contrib_mean;
  return sum / double(k);
}

std::optional<std::size_t> steps_to_fraction(const std::vector<CurvePoint>& curve, double fraction, double tail) {
  const double target = fraction * curve_plateau(curve, tail);
  for (const auto& p : curve)
    if (p.src_contrib_mean >= target) return p.step;
  return std::nullopt;
}

double early_minimum(const std::vector<CurvePoint>& curve, double head) {
  if (curve.empty()) throw ContractViolation("empty curve");
  const auto k = fraction_count(curve.size(), head);
  double m = curve.front().src_contrib_mean;
  for (std::size_t i = 0; i < k; ++i) m = std::min(m, curve[i].src_contrib_mean);
  return m;
}

Model<float> average_models(const std::vector<Model<float>>& models) {
  if (models.empty()) throw ContractViolation("average_models needs at least one model");
  Model<float> out{models.front().config, models.front().params.clone()};
  auto& dst = out.params.tensors();
  for (std::size_t t = 0; t < dst.size(); ++t) {
    std::vector<double> acc(dst[t].size(), 0.0);
    for (const auto& m : models) {
      const auto& src = m.params.tensors().at(t);
      if (src.shape() != dst[t].shape()) throw ContractViolation("average_models: parameter layouts differ");
      const auto v = src.data();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += double(v[k]);
    }
    auto w = dst[t].mutable_data();
    for (std::size_t k = 0; k < acc.size(); ++k) w[k] = float(acc[k] / double(models.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suite configuration

std::vector<RunSpec> standard_runs() {
  using P = Pipeline;
  using R = ResidualVariant;
  return {
      {"baseline_pretrained", P::PretrainThenFinetune, TaskKind::STAnalog, R::Standard},
      {"baseline_scratch", P::Scratch, TaskKind::STAnalog, R::Standard},
      {"werc_scratch", P::Scratch, TaskKind::STAnalog, R::WeRC},
      {"werc_no_norm", P::Scratch, TaskKind::STAnalog, R::WeRCNoNorm},
      {"werc_no_weights", P::Scratch, TaskKind::STAnalog, R::WeRCNoWeights},
      {"mt_reference", P::Scratch, TaskKind::MT, R::Standard},
      {"werc_on_mt", P::Scratch, TaskKind::MT, R::WeRC},
      {"werc_on_pretrained", P::PretrainThenFinetune, TaskKind::STAnalog, R::WeRC},
  };
}

std::vector<RunSpec> SuiteConfig::selected_runs() const {
  const auto all = standard_runs();
  if (runs.empty()) return all;
  std::vector<RunSpec> out;
  for (const auto& name : runs) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const RunSpec& r) { return r.name == name; });
    if (it == all.end()) throw ContractViolation("unknown run '" + name + "'");
    if (std::any_of(out.begin(), out.end(), [&](const RunSpec& r) { return r.name == name; }))
      throw ContractViolation("run '" + name + "' listed twice");
    out.push_back(*it);
  }
  return out;
}

SuiteConfig suite_preset(const std::string& name) {
  SuiteConfig s;
  auto& b = s.base;
  if (name == "default") {
    b.model.enc_layers = 3;
    b.model.dec_layers = 2;
    b.model.heads = 4;
    b.model.d_model = 32;
    b.model.d_ff = 128;
    b.model.dropout = 0.1;
    b.finetune.max_updates = 2000;
    b.finetune.warmup_updates = 200;
    b.finetune.checkpoint_every_dense = 20;
    b.finetune.early_phase_boundary = 200;
    b.finetune.checkpoint_every_sparse = 100;
    b.finetune.max_tokens = 400;
    b.pretrain = b.finetune;
    b.eval.bleu_sentences = 100;
    b.eval.contrib_sentences = 30;
    s.splits = {10000, 200, 200};
    s.seeds = {1, 2, 3};
  } else if (name == "quick") {
    b.model.enc_layers = 1;
    b.model.dec_layers = 1;
    b.model.heads = 2;
    b.model.d_model = 16;
    b.model.d_ff = 32;
    b.language.max_len = 8;
    b.finetune.max_updates = 20;
    b.finetune.warmup_updates = 5;
    b.finetune.checkpoint_every_dense = 5;
    b.finetune.early_phase_boundary = 10;
    b.finetune.checkpoint_every_sparse = 10;
    b.finetune.max_tokens = 120;
    b.finetune.best_k = 3;
    b.pretrain = b.finetune;
    b.eval.bleu_sentences = 10;
    b.eval.contrib_sentences = 4;
    b.eval.decode_max_len = 12;
    s.splits = {200, 20, 20};
    s.seeds = {1};
  } else {
    throw ContractViolation("unknown suite preset '" + name + "' (expected default or quick)");
  }
  return s;
}

json to_json(const SuiteConfig& c) {
  return json{{"base", to_json(c.base)},
              {"seeds", c.seeds},
              {"splits", {{"train", c.splits.train}, {"valid", c.splits.valid}, {"test", c.splits.test}}},
              {"split_seeds",
               {{"train", c.split_seeds.train}, {"valid", c.split_seeds.valid}, {"test", c.split_seeds.test}}},
              {"runs", c.runs},
              {"best_k_mode", c.best_k_mode == BestKMode::Scores ? "scores" : "parameters"},
              {"test_sentences", c.test_sentences}};
}

namespace {

void merge_into(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace

SuiteConfig suite_config_from_json(const json& j) {
  for (const auto& [key, value] : j.items()) {
    static const std::vector<std::string> known{"base",           "seeds", "splits", "split_seeds", "runs",
                                                "best_k_mode",    "test_sentences", "preset"};
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ContractViolation("unknown key '" + key + "' in suite config");
  }
  SuiteConfig c;
  if (j.contains("base")) c.base = pipeline_config_from_json(j.at("base"));
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    c.splits = {s.at("train").get<std::size_t>(), s.at("valid").get<std::size_t>(), s.at("test").get<std::size_t>()};
  }
  if (j.contains("split_seeds")) {
    const auto& s = j.at("split_seeds");
    c.split_seeds = {s.at("train").get<std::uint64_t>(), s.at("valid").get<std::uint64_t>(),
                     s.at("test").get<std::uint64_t>()};
  }
  if (j.contains("runs")) c.runs = j.at("runs").get<std::vector<std::string>>();
  if (j.contains("best_k_mode")) {
    const auto m = j.at("best_k_mode").get<std::string>();
    if (m != "scores" && m != "parameters") throw ContractViolation("best_k_mode must be scores or parameters");
    c.best_k_mode = m == "scores" ? BestKMode::Scores : BestKMode::Parameters;
  }
  if (j.contains("test_sentences")) c.test_sentences = j.at("test_sentences").get<std::size_t>();
  if (c.seeds.empty()) throw ContractViolation("suite config needs at least one seed");
  c.selected_runs();
  return c;
}

SuiteConfig load_suite_config(const std::string& name_or_path) {
  if (name_or_path == "default" || name_or_path == "quick") return suite_preset(name_or_path);
  std::ifstream is(name_or_path);
  if (!is) throw ContractViolation("suite config '" + name_or_path + "' is neither a preset nor a readable file");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ContractViolation("cannot parse " + name_or_path + ": " + e.what());
  }
  if (j.contains("preset")) {
    json merged = to_json(suite_preset(j.at("preset").get<std::string>()));
    j.erase("preset");
    merge_into(merged, j);
    return suite_config_from_json(merged);
  }
  return suite_config_from_json(j);
}

PipelineConfig run_pipeline_config(const SuiteConfig& suite, const RunSpec& run, std::uint64_t seed) {
  PipelineConfig c = suite.base;
  c.name = run.name;
  c.model.residual = run.residual;
  c.finetune.pipeline = run.pipeline;
  c.finetune.task = run.task;
  c.finetune.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// Reports

RunReport summarize_run(const ExperimentBundle& bundle, const Dataset& test, const SuiteConfig& suite) {
  const auto& phase = bundle.final_phase();
  const auto& result = phase.result;
  RunReport r;
  r.run = bundle.name;
  r.pretrained = bundle.pipeline == Pipeline::PretrainThenFinetune;
  r.curve = curve_from_log(result.log);
  const auto& eval = suite.base.eval;
  r.final_bleu = decode_bleu(result.model, test, suite.test_sentences, eval.batch_size, eval.decode_max_len);
  r.final_src_contrib = r.curve.empty() ? 0.0 : r.curve.back().src_contrib_mean;

  std::vector<Model<float>> best;
  for (const auto& rec : result.best) {
    try {
      best.push_back(load_checkpoint(rec.stem).model);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping checkpoint " << rec.stem << ": " << e.what() << '\n';
    }
  }
  if (best.empty()) {
    r.best10_bleu = r.final_bleu;
  } else if (suite.best_k_mode == BestKMode::Scores) {
    r.best10_bleu = best_k_average(scores_on(best, test, suite, eval), best.size());
  } else {
    r.best10_bleu = scores_on({average_models(best)}, test, suite, eval).front();
  }
  return r;
}

namespace {

json to_json(const RunReport& r) {
  json curve = json::array();
  for (const auto& p : r.curve) curve.push_back({p.step, p.bleu, p.src_contrib_mean, p.src_contrib_std});
  return json{{"run", r.run},
              {"pretrained", r.pretrained},
              {"final_bleu", r.final_bleu},
              {"best10_bleu", r.best10_bleu},
              {"final_src_contrib", r.final_src_contrib},
              {"curve", curve}};
}

RunReport run_report_from_json(const json& j) {
  RunReport r;
  r.run = j.at("run").get<std::string>();
  r.pretrained = j.at("pretrained").get<bool>();
  r.final_bleu = j.at("final_bleu").get<double>();
  r.best10_bleu = j.at("best10_bleu").get<double>();
  r.final_src_contrib = j.at("final_src_contrib").get<double>();
  for (const auto& p : j.at("curve"))
    r.curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>()});
  return r;
}

}  // namespace

void emit_report(const SeedReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "curves.csv", std::ios::binary);
    os << "run,step,bleu,src_contrib_mean,src_contrib_std\n";
    for (const auto& r : report.runs)
      for (const auto& p : r.curve)
        os << r.run << ',' << p.step << ',' << fmt_double(p.bleu) << ',' << fmt_double(p.src_contrib_mean) << ','
           << fmt_double(p.src_contrib_std) << '\n';
  }
  {
    std::ofstream os(dir / "summary.csv", std::ios::binary);
    os << "run,pretrained,final_bleu,best10_bleu,final_src_contrib\n";
    for (const auto& r : report.runs)
      os << r.run << ',' << (r.pretrained ? "yes" : "no") << ',' << fmt_double(r.final_bleu) << ','
         << fmt_double(r.best10_bleu) << ',' << fmt_double(r.final_src_contrib) << '\n';
  }
  {
    std::ofstream os(dir / "curves.svg", std::ios::binary);
    os << render_svg(report.runs);
  }
  const auto missing_path = dir / "missing.txt";
  if (report.missing.empty()) {
    fs::remove(missing_path);
  } else {
    std::ofstream os(missing_path, std::ios::binary);
    for (const auto& m : report.missing) os << m << '\n';
    std::cerr << "warning: report for seed " << report.seed << " lacks runs:";
    for (const auto& m : report.missing) std::cerr << ' ' << m;
    std::cerr << '\n';
  }
}

std::string render_svg(const std::vector<RunReport>& runs) {
  constexpr double kWidth = 800, kPanel = 280, kLeft = 70, kRight = 190, kTop = 30, kGap = 60;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::size_t max_step = 1;
  double max_bleu = 1.0;
  for (const auto& r : runs)
    for (const auto& p : r.curve) {
      max_step = std::max(max_step, p.step);
      max_bleu = std::max(max_bleu, p.bleu);
    }
  max_bleu = std::ceil(max_bleu / 10.0) * 10.0;
  const double plot_w = kWidth - kLeft - kRight;
  auto x_of = [&](std::size_t step) { return kLeft + plot_w * double(step) / double(max_step); };
  auto y_of = [&](double v, double lo, double hi, double top) {
    return top + kPanel * (1.0 - (std::clamp(v, lo, hi) - lo) / (hi - lo));
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream os;
  const double height = kTop + 2 * kPanel + kGap + 50;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << kWidth << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<desc>Greedy decoding; corpus BLEU-4 with add-one smoothing for n-gram orders 2 to 4.</desc>\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  struct PanelSpec {
    const char* title;
    double lo, hi, top;
    bool contribution;
  };
  const PanelSpec panels[] = {{"Source contribution (mean and std)", 0.0, 1.0, kTop, true},
                              {"Validation BLEU", 0.0, max_bleu, kTop + kPanel + kGap, false}};
  for (const auto& panel : panels) {
    os << "<g class=\"panel\">\n";
    os << "<rect x=\"" << kLeft << "\" y=\"" << panel.top << "\" width=\"" << plot_w << "\" height=\"" << kPanel
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<text x=\"" << kLeft << "\" y=\"" << panel.top - 8 << "\">" << panel.title << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = panel.lo + (panel.hi - panel.lo) * t / 4.0;
      os << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(y_of(v, panel.lo, panel.hi, panel.top) + 4)
         << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
    }
    os << "<text x=\"" << kLeft + plot_w << "\" y=\"" << panel.top + kPanel + 16
       << "\" text-anchor=\"end\">updates (max " << max_step << ")</text>\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& r = runs[i];
      const char* color = kColors[i % std::size(kColors)];
      if (r.curve.empty()) continue;
      if (panel.contribution) {
        os << "<polygon class=\"band\" fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
        for (const auto& p : r.curve)
          os << num(x_of(p.step)) << ',' << num(y_of(p.src_contrib_mean + p.src_contrib_std, 0, 1, panel.top)) << ' ';
        for (auto it = r.curve.rbegin(); it != r.curve.rend(); ++it)
          os << num(x_of(it->step)) << ',' << num(y_of(it->src_contrib_mean - it->src_contrib_std, 0, 1, panel.top))
             << ' ';
        os << "\"/>\n";
      }
      os << "<polyline class=\"series\" data-run=\"" << r.run << "\" fill=\"none\" stroke=\"" << color
         << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& p : r.curve) {
        const double v = panel.contribution ? p.src_contrib_mean : p.bleu;
        os << num(x_of(p.step)) << ',' << num(y_of(v, panel.lo, panel.hi, panel.top)) << ' ';
      }
      os << "\"/>\n";
      if (panel.contribution) {
        const double ly = panel.top + 14 + 16 * double(i);
        os << "<line x1=\"" << kWidth - kRight + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kWidth - kRight + 30
           << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << kWidth - kRight + 36 << "\" y=\"" << ly << "\">" << r.run << "</text>\n";
      }
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

SeedReport load_seed_report(const fs::path& seed_dir) {
  SeedReport report;
  const auto name = seed_dir.filename().string();
  if (name.rfind("seed_", 0) == 0) report.seed = std::stoull(name.substr(5));
  for (const auto& run : standard_runs()) {
    const auto path = seed_dir / run.name / "summary.json";
    if (!fs::exists(path)) {
      if (fs::exists(seed_dir / run.name)) report.missing.push_back(run.name);
      continue;
    }
    std::ifstream is(path);
    report.runs.push_back(run_report_from_json(json::parse(is)));
  }
  if (report.runs.empty()) throw ContractViolation("no finished runs under " + seed_dir.string());
  return report;
}

// ---------------------------------------------------------------------------
// Suite driver

namespace {

void write_seed_table(const SuiteResult& result, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  os << "seed,run,pretrained,final_bleu,best10_bleu,final_src_contrib\n";
  for (const auto& s : result.seeds)
    for (const auto& r : s.runs)
      os << s.seed << ',' << r.run << ',' << (r.pretrained ? "yes" : "no") << ',' << fmt_double(r.final_bleu) << ','
         << fmt_double(r.best10_bleu) << ',' << fmt_double(r.final_src_contrib) << '\n';
}

}  // namespace

SuiteResult run_suite(const SuiteConfig& config, const fs::path& out_dir, bool quiet) {
  const auto runs = config.selected_runs();
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "suite_config.json", std::ios::binary);
    os << to_json(config).dump(2) << '\n';
  }

  const auto& base = config.base;
  const bool need_mt = std::any_of(runs.begin(), runs.end(), [](const RunSpec& r) { return r.task == TaskKind::MT; });
  const bool need_st = std::any_of(runs.begin(), runs.end(), [](const RunSpec& r) { return r.task != TaskKind::MT; });
  const bool need_asr = std::any_of(runs.begin(), runs.end(),
                                    [](const RunSpec& r) { return r.pipeline == Pipeline::PretrainThenFinetune; });
  if (!quiet) std::cerr << "generating data\n";
  DatasetSplits mt, st, asr;
  if (need_mt) mt = make_task_dataset(TaskKind::MT, base.language, base.frames, config.splits, config.split_seeds);
  if (need_st) st = make_task_dataset(TaskKind::STAnalog, base.language, base.frames, config.splits, config.split_seeds);
  if (need_asr)
    asr = make_task_dataset(TaskKind::ASRAnalog, base.language, base.frames, config.splits, config.split_seeds);

  SuiteResult result;
  for (const auto seed : config.seeds) {
    const auto seed_dir = out_dir / ("seed_" + std::to_string(seed));
    SeedReport report;
    report.seed = seed;
    std::optional<PhaseResult> shared_pretrain;
    for (const auto& run : runs) {
      const auto pc = run_pipeline_config(config, run, seed);
      const auto& data = run.task == TaskKind::MT ? mt : st;
      PipelineData pd{&data, need_asr ? &asr : nullptr};
      if (!quiet) std::cerr << "seed " << seed << ": " << run.name << '\n';
      const auto bundle = run_pipeline(pc, pd, seed_dir / run.name, shared_pretrain ? &*shared_pretrain : nullptr,
                                       quiet);
      if (run.pipeline == Pipeline::PretrainThenFinetune && !shared_pretrain) shared_pretrain = bundle.phases.front();
      auto summary = summarize_run(bundle, data.test, config);
      {
        std::ofstream os(seed_dir / run.name / "summary.json", std::ios::binary);
        os << to_json(summary).dump(2) << '\n';
      }
      report.runs.push_back(std::move(summary));
    }
    emit_report(report, seed_dir);
    result.seeds.push_back(std::move(report));
  }
  write_seed_table(result, out_dir / "summary_by_seed.csv");
  return result;
}

std::string describe_suite(const SuiteConfig& config) {
  std::ostringstream os;
  const auto& b = config.base;
  os << "suite plan\n";
  os << "  seeds:";
  for (auto s : config.seeds) os << ' ' << s;
  os << "\n  data: train " << config.splits.train << ", valid " << config.splits.valid << ", test "
     << config.splits.test << " sentences per task\n";
  os << "  model: " << b.model.enc_layers << " encoder / " << b.model.dec_layers << " decoder layers, d_model "
     << b.model.d_model << ", heads " << b.model.heads << ", d_ff " << b.model.d_ff << '\n';
  os << "  updates: " << b.finetune.max_updates << " per training phase, " << b.pretrain.max_updates
     << " for recognition pretraining (peak lr " << fmt_short(b.finetune.peak_lr * 1e3) << "e-3 / "
     << fmt_short(b.finetune.peak_lr * b.pretrain_lr_ratio * 1e3) << "e-3)\n";
  os << "  runs:\n";
  bool pretrain_planned = false;
  for (const auto& r : config.selected_runs()) {
    os << "    " << r.name << ": " << to_string(r.pipeline) << ", task " << to_string(r.task) << ", residual "
       << to_string(r.residual);
    if (r.pipeline == Pipeline::PretrainThenFinetune)
      os << (pretrain_planned ? " (reuses the recognition pretraining)" : " (trains the recognition pretraining)");
    if (r.pipeline == Pipeline::PretrainThenFinetune) pretrain_planned = true;
    os << '\n';
  }
  return os.str();
}

}  // namespace srclab
