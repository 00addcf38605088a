#include "srclab/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "srclab/binary_io.hpp"
#include "srclab/ops.hpp"

namespace srclab {

namespace fs = std::filesystem;
using nlohmann::json;

double lr_schedule(std::size_t step, std::size_t warmup, double peak) {
  if (step == 0) throw ContractViolation("lr_schedule: steps start at 1");
  if (warmup == 0 || step > warmup) return warmup == 0 ? peak : peak * std::sqrt(double(warmup) / double(step));
  return peak * double(step) / double(warmup);
}

template <typename T>
ClipResult clip_grads(const std::vector<std::string>& names, std::vector<Tensor<T>>& params, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ContractViolation("clip_norm must be positive");
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].grad();
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        throw NumericError("non-finite gradient in " + (i < names.size() ? names[i] : std::to_string(i)) +
                           " at element " + std::to_string(k));
      }
      sq += double(g[k]) * double(g[k]);
    }
  }
  ClipResult out;
  out.pre_norm = std::sqrt(sq);
  if (out.pre_norm > clip_norm) {
    out.scale = clip_norm / out.pre_norm;
    for (auto& p : params) {
      if (p.grad().empty()) continue;
      for (auto& g : p.mutable_grad()) g = T(double(g) * out.scale);
    }
  }
  return out;
}

template <typename T>
void adam_update(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamOptions& options) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractViolation("adam state holds a different number of tensors");
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].size()) throw ContractViolation("adam state shape mismatch for tensor " + std::to_string(i));
    const auto g = params[i].grad();
    auto w = params[i].mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : double(g[k]);
      const double mk = options.beta1 * double(m[k]) + (1.0 - options.beta1) * gk;
      const double vk = options.beta2 * double(v[k]) + (1.0 - options.beta2) * gk * gk;
      m[k] = T(mk);
      v[k] = T(vk);
      w[k] = T(double(w[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + options.eps));
    }
  }
}

std::string to_string(Pipeline p) {
  return p == Pipeline::Scratch ? "scratch" : "pretrain_then_finetune";
}

Pipeline parse_pipeline(const std::string& s) {
  if (s == "scratch") return Pipeline::Scratch;
  if (s == "pretrain_then_finetune") return Pipeline::PretrainThenFinetune;
  throw ContractViolation("unknown pipeline '" + s + "' (expected scratch or pretrain_then_finetune)");
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (warmup_updates > max_updates && max_updates > 0) problems.emplace_back("warmup_updates must not exceed max_updates");
  if (!(clip_norm > 0.0)) problems.emplace_back("clip_norm must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) problems.emplace_back("label_smoothing must lie in [0, 1)");
  if (!(peak_lr > 0.0)) problems.emplace_back("peak_lr must be positive");
  if (checkpoint_every_dense == 0) problems.emplace_back("checkpoint_every_dense must be >= 1");
  if (checkpoint_every_sparse == 0) problems.emplace_back("checkpoint_every_sparse must be >= 1");
  if (max_tokens == 0) problems.emplace_back("max_tokens must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    problems.emplace_back("adam betas must lie in [0, 1)");
  if (problems.empty()) return;
  std::ostringstream os;
  os << "invalid train config:";
  for (const auto& p : problems) os << "\n  - " << p;
  throw ContractViolation(os.str());
}

bool TrainConfig::is_checkpoint_step(std::size_t step) const {
  return step <= early_phase_boundary ? step % checkpoint_every_dense == 0 : step % checkpoint_every_sparse == 0;
}

bool TrainConfig::is_eval_step(std::size_t step) const {
  return eval_every == 0 ? is_checkpoint_step(step) : step % eval_every == 0;
}

// ---------------------------------------------------------------------------
// Log

void TrainLog::validate() const {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (i > 0 && r.step <= rows[i - 1].step) throw ContractViolation("train log steps must strictly increase");
    for (double v : {r.train_loss, r.valid_loss, r.valid_bleu, r.src_contrib_mean, r.src_contrib_std, r.lr})
      if (!std::isfinite(v)) throw ContractViolation("non-finite value in train log at step " + std::to_string(r.step));
  }
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainLog::write_csv(const fs::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,train_loss,valid_loss,valid_bleu,src_contrib_mean,src_contrib_std,lr\n";
  for (const auto& r : rows)
    os << r.step << ',' << fmt_double(r.train_loss) << ',' << fmt_double(r.valid_loss) << ','
       << fmt_double(r.valid_bleu) << ',' << fmt_double(r.src_contrib_mean) << ',' << fmt_double(r.src_contrib_std)
       << ',' << fmt_double(r.lr) << '\n';
}

TrainLog TrainLog::read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "step,train_loss,valid_loss,valid_bleu,src_contrib_mean,src_contrib_std,lr")
    throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
  TrainLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    TrainLogRow r;
    r.step = std::stoull(cells[0]);
    r.train_loss = std::stod(cells[1]);
    r.valid_loss = std::stod(cells[2]);
    r.valid_bleu = std::stod(cells[3]);
    r.src_contrib_mean = std::stod(cells[4]);
    r.src_contrib_std = std::stod(cells[5]);
    r.lr = std::stod(cells[6]);
    log.rows.push_back(r);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Config records

json to_json(const ModelConfig& c) {
  return json{{"enc_layers", c.enc_layers},
              {"dec_layers", c.dec_layers},
              {"heads", c.heads},
              {"d_model", c.d_model},
              {"d_ff", c.d_ff},
              {"vocab_src", c.vocab_src},
              {"vocab_tgt", c.vocab_tgt},
              {"max_len", c.max_len},
              {"dropout", c.dropout},
              {"residual", to_string(c.residual)},
              {"lambda", c.lambda},
              {"input_mode", c.input_mode == InputMode::Tokens ? "tokens" : "frames"},
              {"feature_dim", c.feature_dim},
              {"pool_stride", c.pool_stride},
              {"ln_eps", c.ln_eps}};
}

namespace {

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end())
      throw ContractViolation("unknown key '" + key + "' in " + what);
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"enc_layers", "dec_layers", "heads", "d_model", "d_ff", "vocab_src", "vocab_tgt", "max_len", "dropout",
                  "residual", "lambda", "input_mode", "feature_dim", "pool_stride", "ln_eps"},
                 "model config");
  ModelConfig c;
  read_opt(j, "enc_layers", c.enc_layers);
  read_opt(j, "dec_layers", c.dec_layers);
  read_opt(j, "heads", c.heads);
  read_opt(j, "d_model", c.d_model);
  read_opt(j, "d_ff", c.d_ff);
  read_opt(j, "vocab_src", c.vocab_src);
  read_opt(j, "vocab_tgt", c.vocab_tgt);
  read_opt(j, "max_len", c.max_len);
  read_opt(j, "dropout", c.dropout);
  if (j.contains("residual")) c.residual = parse_residual_variant(j.at("residual").get<std::string>());
  read_opt(j, "lambda", c.lambda);
  if (j.contains("input_mode")) {
    const auto m = j.at("input_mode").get<std::string>();
    if (m != "tokens" && m != "frames") throw ContractViolation("input_mode must be tokens or frames");
    c.input_mode = m == "tokens" ? InputMode::Tokens : InputMode::Frames;
  }
  read_opt(j, "feature_dim", c.feature_dim);
  read_opt(j, "pool_stride", c.pool_stride);
  read_opt(j, "ln_eps", c.ln_eps);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"max_updates", c.max_updates},
              {"warmup_updates", c.warmup_updates},
              {"peak_lr", c.peak_lr},
              {"clip_norm", c.clip_norm},
              {"label_smoothing", c.label_smoothing},
              {"checkpoint_every_dense", c.checkpoint_every_dense},
              {"early_phase_boundary", c.early_phase_boundary},
              {"checkpoint_every_sparse", c.checkpoint_every_sparse},
              {"seed", c.seed},
              {"pipeline", to_string(c.pipeline)},
              {"task", to_string(c.task)},
              {"eval_every", c.eval_every},
              {"max_tokens", c.max_tokens},
              {"best_k", c.best_k},
              {"adam_beta1", c.adam.beta1},
              {"adam_beta2", c.adam.beta2},
              {"adam_eps", c.adam.eps}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"max_updates", "warmup_updates", "peak_lr", "clip_norm", "label_smoothing", "checkpoint_every_dense",
                  "early_phase_boundary", "checkpoint_every_sparse", "seed", "pipeline", "task", "eval_every",
                  "max_tokens", "best_k", "adam_beta1", "adam_beta2", "adam_eps"},
                 "train config");
  TrainConfig c;
  read_opt(j, "max_updates", c.max_updates);
  read_opt(j, "warmup_updates", c.warmup_updates);
  read_opt(j, "peak_lr", c.peak_lr);
  read_opt(j, "clip_norm", c.clip_norm);
  read_opt(j, "label_smoothing", c.label_smoothing);
  read_opt(j, "checkpoint_every_dense", c.checkpoint_every_dense);
  read_opt(j, "early_phase_boundary", c.early_phase_boundary);
  read_opt(j, "checkpoint_every_sparse", c.checkpoint_every_sparse);
  read_opt(j, "seed", c.seed);
  if (j.contains("pipeline")) c.pipeline = parse_pipeline(j.at("pipeline").get<std::string>());
  if (j.contains("task")) c.task = parse_task_kind(j.at("task").get<std::string>());
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "max_tokens", c.max_tokens);
  read_opt(j, "best_k", c.best_k);
  read_opt(j, "adam_beta1", c.adam.beta1);
  read_opt(j, "adam_beta2", c.adam.beta2);
  read_opt(j, "adam_eps", c.adam.eps);
  return c;
}

namespace {

json to_json(const SynthLanguageSpec& s) {
  return json{{"vocab_src", s.vocab_src}, {"vocab_tgt", s.vocab_tgt}, {"min_len", s.min_len},
              {"max_len", s.max_len},     {"successors", s.successors}, {"mapping", s.mapping},
              {"seed", s.seed}};
}

SynthLanguageSpec language_from_json(const json& j) {
  reject_unknown(j, {"vocab_src", "vocab_tgt", "min_len", "max_len", "successors", "mapping", "seed"}, "language spec");
  SynthLanguageSpec s;
  read_opt(j, "vocab_src", s.vocab_src);
  read_opt(j, "vocab_tgt", s.vocab_tgt);
  read_opt(j, "min_len", s.min_len);
  read_opt(j, "max_len", s.max_len);
  read_opt(j, "successors", s.successors);
  read_opt(j, "mapping", s.mapping);
  read_opt(j, "seed", s.seed);
  return s;
}

json to_json(const FrameRenderSpec& s) {
  return json{{"feature_dim", s.feature_dim}, {"k_min", s.k_min}, {"k_max", s.k_max},
              {"noise_std", s.noise_std},     {"seed", s.seed}};
}

FrameRenderSpec frames_from_json(const json& j) {
  reject_unknown(j, {"feature_dim", "k_min", "k_max", "noise_std", "seed"}, "frame spec");
  FrameRenderSpec s;
  read_opt(j, "feature_dim", s.feature_dim);
  read_opt(j, "k_min", s.k_min);
  read_opt(j, "k_max", s.k_max);
  read_opt(j, "noise_std", s.noise_std);
  read_opt(j, "seed", s.seed);
  return s;
}

json to_json(const EvalOptions& e) {
  return json{{"bleu_sentences", e.bleu_sentences},
              {"contrib_sentences", e.contrib_sentences},
              {"decode_max_len", e.decode_max_len},
              {"batch_size", e.batch_size}};
}

EvalOptions eval_from_json(const json& j) {
  reject_unknown(j, {"bleu_sentences", "contrib_sentences", "decode_max_len", "batch_size"}, "eval options");
  EvalOptions e;
  read_opt(j, "bleu_sentences", e.bleu_sentences);
  read_opt(j, "contrib_sentences", e.contrib_sentences);
  read_opt(j, "decode_max_len", e.decode_max_len);
  read_opt(j, "batch_size", e.batch_size);
  return e;
}

}  // namespace

json to_json(const PipelineConfig& c) {
  return json{{"name", c.name},
              {"language", to_json(c.language)},
              {"frames", to_json(c.frames)},
              {"model", to_json(c.model)},
              {"finetune", to_json(c.finetune)},
              {"pretrain", to_json(c.pretrain)},
              {"pretrain_lr_ratio", c.pretrain_lr_ratio},
              {"eval", to_json(c.eval)}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  reject_unknown(j, {"name", "language", "frames", "model", "finetune", "pretrain", "pretrain_lr_ratio", "eval"},
                 "pipeline config");
  PipelineConfig c;
  read_opt(j, "name", c.name);
  if (j.contains("language")) c.language = language_from_json(j.at("language"));
  if (j.contains("frames")) c.frames = frames_from_json(j.at("frames"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("finetune")) c.finetune = train_config_from_json(j.at("finetune"));
  if (j.contains("pretrain")) c.pretrain = train_config_from_json(j.at("pretrain"));
  read_opt(j, "pretrain_lr_ratio", c.pretrain_lr_ratio);
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string checkpoint_stem(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06zu", step);
  return buf;
}

void save_checkpoint(const fs::path& stem, const Model<float>& model, std::size_t step) {
  auto manifest_path = stem;
  manifest_path += ".txt";
  auto blob_path = stem;
  blob_path += ".bin";
  std::ofstream blob(blob_path, std::ios::binary);
  std::ofstream manifest(manifest_path, std::ios::binary);
  if (!blob || !manifest) throw std::runtime_error("cannot write checkpoint " + stem.string());
  manifest << "#srclab-checkpoint v1\n";
  manifest << "step " << step << '\n';
  manifest << "config " << to_json(model.config).dump() << '\n';
  std::size_t offset = 0;
  const auto& names = model.params.names();
  const auto& tensors = model.params.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& t = tensors[i];
    manifest << "tensor " << names[i] << " float32 ";
    for (std::size_t a = 0; a < t.rank(); ++a) manifest << (a ? "x" : "") << t.dim(a);
    manifest << ' ' << offset << '\n';
    for (float v : t.data()) io::write_le<float>(blob, v);
    offset += t.size() * sizeof(float);
  }
  if (!blob || !manifest) throw std::runtime_error("failed writing checkpoint " + stem.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& stem) {
  auto manifest_path = stem;
  manifest_path += ".txt";
  auto blob_path = stem;
  blob_path += ".bin";
  std::ifstream manifest(manifest_path);
  std::ifstream blob(blob_path, std::ios::binary);
  if (!manifest || !blob) throw std::runtime_error("cannot open checkpoint " + stem.string());

  std::string line;
  std::getline(manifest, line);
  if (line != "#srclab-checkpoint v1") throw std::runtime_error(manifest_path.string() + ": not a checkpoint manifest");
  LoadedCheckpoint out;
  bool have_config = false;
  std::vector<std::tuple<std::string, Shape, std::size_t>> entries;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "step") {
      ls >> out.step;
    } else if (key == "config") {
      std::string rest;
      std::getline(ls, rest);
      out.model.config = model_config_from_json(json::parse(rest));
      have_config = true;
    } else if (key == "tensor") {
      std::string name, dtype, dims;
      std::size_t offset = 0;
      ls >> name >> dtype >> dims >> offset;
      if (!ls || dtype != "float32") throw std::runtime_error(manifest_path.string() + ": bad tensor line '" + line + "'");
      Shape shape;
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, 'x')) shape.push_back(std::stoull(d));
      entries.emplace_back(name, shape, offset);
    } else {
      throw std::runtime_error(manifest_path.string() + ": unknown record '" + key + "'");
    }
  }
  if (!have_config) throw std::runtime_error(manifest_path.string() + ": missing config");

  const auto layout = parameter_layout(out.model.config);
  if (layout.size() != entries.size())
    throw std::runtime_error(manifest_path.string() + ": tensor count does not match the config");
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, shape, offset] = entries[i];
    if (name != layout[i].first || shape != layout[i].second || offset != expected_offset)
      throw std::runtime_error(manifest_path.string() + ": tensor " + name + " does not match the config layout");
    std::vector<float> values(numel(shape));
    for (auto& v : values) v = io::read_le<float>(blob);
    out.model.params.add(name, Tensor<float>(shape, std::move(values), true));
    expected_offset += numel(shape) * sizeof(float);
  }
  if (blob.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(blob_path.string() + ": trailing bytes after the last tensor");
  return out;
}

std::vector<CheckpointRecord> best_k(const std::vector<CheckpointRecord>& checkpoints, std::size_t k) {
  std::vector<CheckpointRecord> scored;
  for (const auto& c : checkpoints)
    if (c.valid_bleu) scored.push_back(c);
  std::stable_sort(scored.begin(), scored.end(),
                   [](const CheckpointRecord& a, const CheckpointRecord& b) { return *a.valid_bleu > *b.valid_bleu; });
  if (scored.size() > k) scored.resize(k);
  return scored;
}

// ---------------------------------------------------------------------------
// Training

namespace {

Tensor<float> batch_loss(Tape<float>& tape, const Model<float>& model, const Batch& batch, double smoothing,
                         RunContext<float>& ctx) {
  const auto encoded = encoder_forward(tape, model, batch.source, ctx);
  const auto logits =
      decoder_forward(tape, model, encoded, batch.target.input, batch.target.batch, batch.target.max_length, ctx);
  return ops::label_smoothed_ce(tape, logits, batch.target.output, smoothing, kPadId);
}

void write_best(const fs::path& path, const std::vector<CheckpointRecord>& best) {
  std::ofstream os(path, std::ios::binary);
  os << "step,valid_bleu,checkpoint\n";
  for (const auto& b : best) os << b.step << ',' << fmt_double(*b.valid_bleu) << ',' << b.stem.filename().string() << '\n';
}

}  // namespace

TrainResult train(Model<float> model, const Dataset& train_data, const Dataset& eval, const TrainConfig& config,
                  const EvalOptions& eval_options, const std::optional<fs::path>& out_dir, bool quiet) {
  config.validate();
  model.config.validate();
  if (train_data.examples.empty()) throw ContractViolation("training set is empty");
  if (eval.examples.empty()) throw ContractViolation("evaluation set is empty");

  TrainResult result;
  fs::path ckpt_dir;
  if (out_dir) {
    ckpt_dir = *out_dir / "checkpoints";
    fs::create_directories(ckpt_dir);
  }
  if (config.max_updates == 0) {
    result.model = std::move(model);
    return result;
  }

  BatchIterator batches(train_data, config.max_tokens, derive_seed(config.seed, 1));
  std::mt19937_64 dropout_rng(derive_seed(config.seed, 2));
  AdamState<float> adam;
  Tape<float> tape;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  auto checkpoint_and_log = [&](std::size_t step, double lr) {
    const bool ckpt = config.is_checkpoint_step(step);
    std::optional<double> bleu;
    if (config.is_eval_step(step)) {
      const auto rec = evaluate_model(model, eval, eval_options);
      TrainLogRow row{step, loss_sum / double(loss_count), rec.valid_loss, rec.bleu, rec.src_contrib_mean,
                      rec.src_contrib_std, lr};
      result.log.rows.push_back(row);
      loss_sum = 0.0;
      loss_count = 0;
      bleu = rec.bleu;
      if (!quiet)
        std::cerr << "  step " << step << "  train " << row.train_loss << "  valid " << row.valid_loss << "  bleu "
                  << row.valid_bleu << "  src " << row.src_contrib_mean << '\n';
    }
    if (ckpt) {
      CheckpointRecord rec{step, ckpt_dir / checkpoint_stem(step), bleu};
      if (out_dir) save_checkpoint(rec.stem, model, step);
      result.checkpoints.push_back(rec);
    }
  };

  {
    // Step-0 row: loss of the first batch without dropout.
    Tape<float> probe(false);
    RunContext<float> ctx;
    loss_sum = double(batch_loss(probe, model, batches.next(), config.label_smoothing, ctx).item());
    loss_count = 1;
    batches = BatchIterator(train_data, config.max_tokens, derive_seed(config.seed, 1));
    checkpoint_and_log(0, 0.0);
  }

  auto& names = model.params.names();
  auto& tensors = model.params.tensors();
  for (std::size_t step = 1; step <= config.max_updates; ++step) {
    try {
      const auto& batch = batches.next();
      tape.clear();
      model.params.zero_grads();
      RunContext<float> ctx{true, &dropout_rng, nullptr};
      const auto loss = batch_loss(tape, model, batch, config.label_smoothing, ctx);
      const double value = double(loss.item());
      if (!std::isfinite(value)) throw NumericError("loss is " + std::to_string(value));
      tape.backward(loss);
      clip_grads(names, tensors, config.clip_norm);
      const double lr = lr_schedule(step, config.warmup_updates, config.peak_lr);
      adam_update(tensors, adam, lr, config.adam);
      loss_sum += value;
      ++loss_count;
      checkpoint_and_log(step, lr);
    } catch (const TrainingAborted&) {
      throw;
    } catch (const NumericError& e) {
      // Diverged parameters can also surface inside the next forward or evaluation.
      throw TrainingAborted(step, e.what());
    }
  }
  tape.clear();

  result.best = best_k(result.checkpoints, config.best_k);
  if (out_dir) {
    result.log.write_csv(*out_dir / "log.csv");
    write_best(*out_dir / "best_k.csv", result.best);
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Pipelines

ModelConfig phase_model_config(const PipelineConfig& config, TaskKind task, bool pretraining) {
  ModelConfig c = config.model;
  configure_for_task(c, task, config.language, config.frames);
  if (pretraining) c.residual = ResidualVariant::Standard;
  return c;
}

TrainConfig pretrain_train_config(const PipelineConfig& config) {
  TrainConfig c = config.pretrain;
  c.task = TaskKind::ASRAnalog;
  c.pipeline = Pipeline::Scratch;
  c.peak_lr = config.finetune.peak_lr * config.pretrain_lr_ratio;
  c.seed = derive_seed(config.finetune.seed, 11);
  return c;
}

Model<float> finetune_start(const ModelConfig& finetune_config, const Model<float>& pretrained, std::uint64_t seed) {
  return Model<float>{finetune_config, reinit_decoder(finetune_config, pretrained.params, seed)};
}

ExperimentBundle run_pipeline(const PipelineConfig& config, const PipelineData& data, const fs::path& dir,
                              const PhaseResult* shared_pretrain, bool quiet) {
  const auto& ft = config.finetune;
  if (!data.main) throw ContractViolation("run_pipeline: missing dataset for the final phase");
  const bool pretrain = ft.pipeline == Pipeline::PretrainThenFinetune;
  if (pretrain && !data.pretrain && !shared_pretrain)
    throw ContractViolation("run_pipeline: pretrain_then_finetune needs a recognition dataset");
  if (pretrain && ft.task == TaskKind::ASRAnalog)
    throw ContractViolation("run_pipeline: the finetuning task cannot be recognition");

  ExperimentBundle bundle;
  bundle.name = config.name;
  bundle.pipeline = ft.pipeline;
  bundle.dir = dir;
  fs::create_directories(dir);

  auto record = to_json(config);
  record["pipeline"] = to_string(ft.pipeline);
  record["phases"] = json::array();

  Model<float> start;
  const auto final_config = phase_model_config(config, ft.task, false);
  if (pretrain) {
    if (shared_pretrain) {
      bundle.phases.push_back(*shared_pretrain);
      record["phases"].push_back({{"phase", "pretrain"},
                                  {"dir", fs::relative(shared_pretrain->dir, dir).string()},
                                  {"train", to_json(pretrain_train_config(config))}});
    } else {
      const auto pre_cfg = pretrain_train_config(config);
      const auto pre_model_cfg = phase_model_config(config, TaskKind::ASRAnalog, true);
      PhaseResult phase{"pretrain", TaskKind::ASRAnalog, {}, dir / "pretrain"};
      if (!quiet) std::cerr << config.name << ": pretraining on " << to_string(TaskKind::ASRAnalog) << '\n';
      phase.result = train(build_model<float>(pre_model_cfg, derive_seed(pre_cfg.seed, 3)), data.pretrain->train,
                           data.pretrain->valid, pre_cfg, config.eval, phase.dir, quiet);
      bundle.phases.push_back(std::move(phase));
      record["phases"].push_back({{"phase", "pretrain"}, {"dir", "pretrain"}, {"train", to_json(pre_cfg)}});
    }
    start = finetune_start(final_config, bundle.phases.back().result.model, derive_seed(ft.seed, 12));
  } else {
    start = build_model<float>(final_config, derive_seed(ft.seed, 3));
  }

  PhaseResult phase{"finetune", ft.task, {}, dir / "finetune"};
  if (!quiet) std::cerr << config.name << ": training on " << to_string(ft.task) << '\n';
  phase.result = train(std::move(start), data.main->train, data.main->valid, ft, config.eval, phase.dir, quiet);
  bundle.phases.push_back(std::move(phase));
  record["phases"].push_back({{"phase", "finetune"}, {"dir", "finetune"}, {"train", to_json(ft)}});

  std::ofstream os(dir / "config.json", std::ios::binary);
  os << record.dump(2) << '\n';
  return bundle;
}

template ClipResult clip_grads(const std::vector<std::string>&, std::vector<Tensor<float>>&, double);
template ClipResult clip_grads(const std::vector<std::string>&, std::vector<Tensor<double>>&, double);
template void adam_update(std::vector<Tensor<float>>&, AdamState<float>&, double, const AdamOptions&);
template void adam_update(std::vector<Tensor<double>>&, AdamState<double>&, double, const AdamOptions&);

}  // namespace srclab
