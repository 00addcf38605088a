#include "srclab/model.hpp"

#include <cmath>
#include <sstream>

#include "srclab/ops.hpp"

namespace srclab {

std::string to_string(ResidualVariant v) {
  switch (v) {
    case ResidualVariant::Standard: return "standard";
    case ResidualVariant::WeRC: return "werc";
    case ResidualVariant::WeRCNoNorm: return "werc_no_norm";
    case ResidualVariant::WeRCNoWeights: return "werc_no_weights";
  }
  return "unknown";
}

ResidualVariant parse_residual_variant(const std::string& s) {
  for (auto v : {ResidualVariant::Standard, ResidualVariant::WeRC, ResidualVariant::WeRCNoNorm,
                 ResidualVariant::WeRCNoWeights})
    if (to_string(v) == s) return v;
  throw ContractViolation("unknown residual variant '" + s + "'");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (enc_layers == 0) problems.emplace_back("enc_layers must be >= 1");
  if (dec_layers == 0) problems.emplace_back("dec_layers must be >= 1");
  if (heads == 0 || d_model % heads != 0) problems.emplace_back("d_model must be divisible by heads");
  if (d_model < 2) problems.emplace_back("d_model must be >= 2");
  if (d_ff == 0) problems.emplace_back("d_ff must be >= 1");
  if (vocab_src <= kNumSpecialTokens && input_mode == InputMode::Tokens)
    problems.emplace_back("vocab_src must exceed the special tokens");
  if (vocab_tgt <= kNumSpecialTokens) problems.emplace_back("vocab_tgt must exceed the special tokens");
  if (max_len == 0) problems.emplace_back("max_len must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) problems.emplace_back("dropout must lie in [0, 1)");
  if (!(lambda > 0.0 && lambda <= 1.0)) problems.emplace_back("lambda must lie in (0, 1]");
  if (input_mode == InputMode::Frames && feature_dim == 0) problems.emplace_back("feature_dim must be >= 1");
  if (pool_stride == 0) problems.emplace_back("pool_stride must be >= 1");
  if (!(ln_eps >= 0.0)) problems.emplace_back("ln_eps must be >= 0");
  if (problems.empty()) return;
  std::ostringstream os;
  os << "invalid model config:";
  for (const auto& p : problems) os << "\n  - " << p;
  throw ContractViolation(os.str());
}

double ModelConfig::effective_lambda() const {
  return residual == ResidualVariant::WeRCNoWeights ? 0.5 : lambda;
}

std::size_t ModelConfig::encoder_length(std::size_t length) const {
  return input_mode == InputMode::Frames ? (length + pool_stride - 1) / pool_stride : length;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
void ModelParams<T>::add(std::string name, Tensor<T> tensor) {
  if (index_.contains(name)) throw ContractViolation("duplicate parameter " + name);
  index_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

template <typename T>
const Tensor<T>& ModelParams<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
  return tensors_[it->second];
}

template <typename T>
Tensor<T>& ModelParams<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
  return tensors_[it->second];
}

template <typename T>
std::size_t ModelParams<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grads() {
  for (auto& t : tensors_) t.zero_grad();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast(bool requires_grad) const {
  ModelParams<U> out;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    out.add(names_[i], srclab::cast<U>(tensors_[i], requires_grad));
  return out;
}

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
  enum Kind { Uniform, One, Zero } kind;
  double bound;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const auto d = c.d_model;
  const double inv_d = 1.0 / std::sqrt(double(d));
  std::vector<ParamSpec> specs;
  auto linear = [&](const std::string& p, std::size_t in, std::size_t out) {
    const double b = 1.0 / std::sqrt(double(in));
    specs.push_back({p + ".weight", {in, out}, ParamSpec::Uniform, b});
    specs.push_back({p + ".bias", {out}, ParamSpec::Uniform, b});
  };
  auto norm = [&](const std::string& p) {
    specs.push_back({p + ".gain", {d}, ParamSpec::One, 0.0});
    specs.push_back({p + ".bias", {d}, ParamSpec::Zero, 0.0});
  };
  auto attention = [&](const std::string& p) {
    for (const char* proj : {".q", ".k", ".v", ".o"}) linear(p + proj, d, d);
  };
  auto ffn = [&](const std::string& p) {
    linear(p + ".fc1", d, c.d_ff);
    linear(p + ".fc2", c.d_ff, d);
  };

  if (c.input_mode == InputMode::Tokens)
    specs.push_back({"enc.embed", {c.vocab_src, d}, ParamSpec::Uniform, inv_d});
  else
    linear("enc.frontend", c.feature_dim, d);
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    const auto p = "enc.layers." + std::to_string(l);
    norm(p + ".self_attn_ln");
    attention(p + ".self_attn");
    norm(p + ".ffn_ln");
    ffn(p + ".ffn");
  }
  norm("enc.final_ln");

  specs.push_back({"dec.embed", {c.vocab_tgt, d}, ParamSpec::Uniform, inv_d});
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    const auto p = "dec.layers." + std::to_string(l);
    norm(p + ".self_attn_ln");
    attention(p + ".self_attn");
    norm(p + ".cross_attn_ln");
    attention(p + ".cross_attn");
    norm(p + ".ffn_ln");
    ffn(p + ".ffn");
  }
  norm("dec.final_ln");
  linear("dec.out_proj", d, c.vocab_tgt);
  return specs;
}

template <typename T>
Tensor<T> init_tensor(const ParamSpec& spec, std::mt19937_64& rng) {
  std::vector<T> values(numel(spec.shape));
  switch (spec.kind) {
    case ParamSpec::One: std::fill(values.begin(), values.end(), T(1)); break;
    case ParamSpec::Zero: std::fill(values.begin(), values.end(), T(0)); break;
    case ParamSpec::Uniform: {
      std::uniform_real_distribution<double> dist(-spec.bound, spec.bound);
      for (auto& v : values) v = T(dist(rng));
      break;
    }
  }
  return Tensor<T>(spec.shape, std::move(values), true);
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : param_specs(config)) out.emplace_back(s.name, s.shape);
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(config)) n += numel(shape);
  return n;
}

bool is_decoder_param(const std::string& name) { return name.starts_with("dec."); }

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> model{config, {}};
  std::mt19937_64 rng(seed);
  for (const auto& spec : param_specs(config)) model.params.add(spec.name, init_tensor<T>(spec, rng));
  return model;
}

template <typename T>
ModelParams<T> reinit_decoder(const ModelConfig& config, const ModelParams<T>& params, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> out;
  for (const auto& spec : param_specs(config)) {
    if (is_decoder_param(spec.name))
      out.add(spec.name, init_tensor<T>(spec, rng));
    else
      out.add(spec.name, params.get(spec.name).clone(true));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d) {
  std::vector<T> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(d));
      pe[pos * d + i] = T(std::sin(double(pos) * freq));
      if (i + 1 < d) pe[pos * d + i + 1] = T(std::cos(double(pos) * freq));
    }
  return Tensor<T>({length, d}, std::move(pe));
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& x) {
  return ops::add(tape, ops::matmul(tape, x, p.get(prefix + ".weight")), p.get(prefix + ".bias"));
}

template <typename T>
Tensor<T> norm(Tape<T>& tape, const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& x, double eps) {
  return ops::layer_norm(tape, x, eps, p.get(prefix + ".gain"), p.get(prefix + ".bias"));
}

/// keep[b][q][k] expanded over heads to [B*H*Lq*Lk].
template <typename Pred>
std::vector<std::uint8_t> attention_mask(std::size_t batch, std::size_t heads, std::size_t lq, std::size_t lk,
                                         Pred keep) {
  std::vector<std::uint8_t> mask(batch * heads * lq * lk);
  std::size_t i = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < lq; ++q)
        for (std::size_t k = 0; k < lk; ++k) mask[i++] = keep(b, q, k) ? 1 : 0;
  return mask;
}

template <typename T>
struct AttentionResult {
  Tensor<T> output;   // [B, Lq, d]
  Tensor<T> weights;  // [B*H, Lq, Lk] before dropout
};

template <typename T>
AttentionResult<T> multi_head_attention(Tape<T>& tape, const Model<T>& model, const std::string& prefix,
                                        const Tensor<T>& query_in, const Tensor<T>& kv_in,
                                        std::span<const std::uint8_t> keep, RunContext<T>& ctx) {
  const auto& p = model.params;
  const auto& c = model.config;
  const auto batch = query_in.dim(0);
  auto q = ops::split_heads(tape, linear(tape, p, prefix + ".q", query_in), c.heads);
  auto k = ops::split_heads(tape, linear(tape, p, prefix + ".k", kv_in), c.heads);
  auto v = ops::split_heads(tape, linear(tape, p, prefix + ".v", kv_in), c.heads);
  auto scores = ops::scale(tape, ops::bmm(tape, q, k, true), T(1.0 / std::sqrt(double(c.head_dim()))));
  auto alpha = ops::masked_softmax(tape, scores, keep);
  auto dropped = ctx.training ? ops::dropout(tape, alpha, c.dropout, true, *ctx.rng) : alpha;
  auto context = ops::merge_heads(tape, ops::bmm(tape, dropped, v, false), batch);
  return {linear(tape, p, prefix + ".o", context), alpha};
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const Model<T>& model, const std::string& prefix, const Tensor<T>& x,
                       RunContext<T>& ctx) {
  auto h = ops::relu(tape, linear(tape, model.params, prefix + ".fc1", x));
  if (ctx.training) h = ops::dropout(tape, h, model.config.dropout, true, *ctx.rng);
  return linear(tape, model.params, prefix + ".fc2", h);
}

template <typename T>
std::vector<T> values_of(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <typename T>
void record_trace(RunContext<T>& ctx, BlockKind kind, std::size_t layer, const Tensor<T>& value_input,
                  const Tensor<T>& weights, const Tensor<T>& attn_out, const Tensor<T>& residual,
                  const Tensor<T>& attn_term, const Tensor<T>& res_term, const Tensor<T>& output) {
  if (ctx.trace == nullptr) return;
  AttentionTrace<T> t;
  t.kind = kind;
  t.layer = layer;
  t.queries = attn_out.dim(1);
  t.keys = value_input.dim(1);
  t.value_input = values_of(value_input);
  t.weights = values_of(weights);
  t.attn_out = values_of(attn_out);
  t.residual = values_of(residual);
  t.attn_term = values_of(attn_term);
  t.res_term = values_of(res_term);
  t.output = values_of(output);
  ctx.trace->blocks.push_back(std::move(t));
}

template <typename T>
void check_context(const RunContext<T>& ctx, std::size_t batch) {
  if (ctx.training && ctx.rng == nullptr) throw ContractViolation("training forward needs an rng for dropout");
  if (ctx.trace != nullptr && batch != 1) throw ContractViolation("tracing requires a batch of one sentence");
}

}  // namespace

template <typename T>
Tensor<T> combine_cross_residual(Tape<T>& tape, const Tensor<T>& x_attn, const Tensor<T>& x_res,
                                 ResidualVariant variant, double lambda, double eps, Tensor<T>* attn_term,
                                 Tensor<T>* res_term) {
  if (x_attn.shape() != x_res.shape())
    throw ContractViolation("combine_cross_residual shape mismatch: " + shape_str(x_attn.shape()) + " vs " +
                            shape_str(x_res.shape()));
  if (x_attn.shape().back() < 2) throw ContractViolation("combine_cross_residual needs d >= 2");
  if (variant == ResidualVariant::WeRCNoWeights) lambda = 0.5;
  if (variant != ResidualVariant::Standard && !(lambda > 0.0 && lambda <= 1.0))
    throw ContractViolation("lambda must lie in (0, 1]");

  Tensor<T> a = x_attn;
  Tensor<T> r = x_res;
  switch (variant) {
    case ResidualVariant::Standard: break;
    case ResidualVariant::WeRCNoNorm:
      a = ops::scale(tape, x_attn, T(lambda));
      r = ops::scale(tape, x_res, T(1.0 - lambda));
      break;
    case ResidualVariant::WeRC:
    case ResidualVariant::WeRCNoWeights:
      a = ops::scale(tape, ops::layer_norm(tape, x_attn, eps), T(lambda));
      r = ops::scale(tape, ops::layer_norm(tape, x_res, eps), T(1.0 - lambda));
      break;
  }
  if (attn_term) *attn_term = a;
  if (res_term) *res_term = r;
  return ops::add(tape, a, r);
}

template <typename T>
Tensor<T> subsample_frames(Tape<T>& tape, const Model<T>& model, const Tensor<T>& frames,
                           std::span<const std::size_t> lengths) {
  if (model.config.input_mode != InputMode::Frames) throw ContractViolation("model is not in frame input mode");
  if (frames.rank() != 3 || frames.dim(2) != model.config.feature_dim)
    throw ContractViolation("frames must be [B x T x " + std::to_string(model.config.feature_dim) + "], got " +
                            shape_str(frames.shape()));
  for (auto len : lengths)
    if (len == 0) throw ContractViolation("subsample_frames: empty frame sequence");
  auto pooled = ops::mean_pool_time(tape, frames, lengths, model.config.pool_stride);
  return linear(tape, model.params, "enc.frontend", pooled);
}

template <typename T>
EncoderOutput<T> encoder_forward(Tape<T>& tape, const Model<T>& model, const SourceBatch& source,
                                 RunContext<T>& ctx) {
  const auto& c = model.config;
  const auto& p = model.params;
  const auto batch = source.batch;
  if (batch == 0 || source.lengths.size() != batch) throw ContractViolation("malformed source batch");
  check_context(ctx, batch);

  EncoderOutput<T> out;
  for (auto len : source.lengths) {
    if (len == 0) throw ContractViolation("empty source sequence");
    out.lengths.push_back(c.encoder_length(len));
  }

  Tensor<T> x;
  if (c.input_mode == InputMode::Tokens) {
    if (source.tokens.size() != batch * source.max_length) throw ContractViolation("source token buffer size");
    x = ops::scale(tape, ops::embedding(tape, p.get("enc.embed"), source.tokens, {batch, source.max_length}),
                   T(std::sqrt(double(c.d_model))));
  } else {
    if (source.frames.size() != batch * source.max_length * c.feature_dim)
      throw ContractViolation("source frame buffer size");
    Tensor<T> frames({batch, source.max_length, c.feature_dim},
                     std::vector<T>(source.frames.begin(), source.frames.end()));
    x = subsample_frames(tape, model, frames, source.lengths);
  }
  const auto length = x.dim(1);
  if (length > c.max_len)
    throw ContractViolation("source length " + std::to_string(length) + " exceeds max_len " +
                            std::to_string(c.max_len));
  x = ops::add(tape, x, positional_encoding<T>(length, c.d_model));

  const auto& lens = out.lengths;
  auto keep = attention_mask(batch, c.heads, length, length, [&](auto b, auto, auto k) { return k < lens[b]; });
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    const auto pre = "enc.layers." + std::to_string(l);
    auto h = norm(tape, p, pre + ".self_attn_ln", x, c.ln_eps);
    auto attn = multi_head_attention(tape, model, pre + ".self_attn", h, h, keep, ctx);
    auto y = ops::add(tape, attn.output, x);
    record_trace(ctx, BlockKind::EncoderSelf, l, x, attn.weights, attn.output, x, attn.output, x, y);
    x = ops::add(tape, y, feed_forward(tape, model, pre + ".ffn", norm(tape, p, pre + ".ffn_ln", y, c.ln_eps), ctx));
  }
  out.states = norm(tape, p, "enc.final_ln", x, c.ln_eps);
  return out;
}

template <typename T>
Tensor<T> decoder_forward(Tape<T>& tape, const Model<T>& model, const EncoderOutput<T>& encoded,
                          std::span<const int> target_inputs, std::size_t batch, std::size_t length,
                          RunContext<T>& ctx) {
  const auto& c = model.config;
  const auto& p = model.params;
  if (length > c.max_len)
    throw ContractViolation("target length " + std::to_string(length) + " exceeds max_len " +
                            std::to_string(c.max_len));
  if (target_inputs.size() != batch * length || encoded.states.dim(0) != batch)
    throw ContractViolation("decoder inputs do not match the encoder batch");
  check_context(ctx, batch);
  const auto src_len = encoded.states.dim(1);

  auto y = ops::scale(tape, ops::embedding(tape, p.get("dec.embed"), target_inputs, {batch, length}),
                      T(std::sqrt(double(c.d_model))));
  y = ops::add(tape, y, positional_encoding<T>(length, c.d_model));

  auto causal = attention_mask(batch, c.heads, length, length, [](auto, auto q, auto k) { return k <= q; });
  const auto& enc_lens = encoded.lengths;
  auto cross = attention_mask(batch, c.heads, length, src_len, [&](auto b, auto, auto k) { return k < enc_lens[b]; });

  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    const auto pre = "dec.layers." + std::to_string(l);
    auto h = norm(tape, p, pre + ".self_attn_ln", y, c.ln_eps);
    auto self = multi_head_attention(tape, model, pre + ".self_attn", h, h, causal, ctx);
    auto after_self = ops::add(tape, self.output, y);
    record_trace(ctx, BlockKind::DecoderSelf, l, y, self.weights, self.output, y, self.output, y, after_self);

    h = norm(tape, p, pre + ".cross_attn_ln", after_self, c.ln_eps);
    auto xattn = multi_head_attention(tape, model, pre + ".cross_attn", h, encoded.states, cross, ctx);
    Tensor<T> attn_term, res_term;
    auto combined = combine_cross_residual(tape, xattn.output, after_self, c.residual, c.lambda, c.ln_eps,
                                           &attn_term, &res_term);
    record_trace(ctx, BlockKind::DecoderCross, l, encoded.states, xattn.weights, xattn.output, after_self,
                 attn_term, res_term, combined);

    y = ops::add(tape, combined,
                 feed_forward(tape, model, pre + ".ffn", norm(tape, p, pre + ".ffn_ln", combined, c.ln_eps), ctx));
  }
  return linear(tape, p, "dec.out_proj", norm(tape, p, "dec.final_ln", y, c.ln_eps));
}

#define SRCLAB_INSTANTIATE_MODEL(T)                                                                              \
  template class ModelParams<T>;                                                                                 \
  template Model<T> build_model<T>(const ModelConfig&, std::uint64_t);                                           \
  template ModelParams<T> reinit_decoder<T>(const ModelConfig&, const ModelParams<T>&, std::uint64_t);           \
  template Tensor<T> combine_cross_residual(Tape<T>&, const Tensor<T>&, const Tensor<T>&, ResidualVariant,       \
                                            double, double, Tensor<T>*, Tensor<T>*);                             \
  template Tensor<T> subsample_frames(Tape<T>&, const Model<T>&, const Tensor<T>&, std::span<const std::size_t>); \
  template EncoderOutput<T> encoder_forward(Tape<T>&, const Model<T>&, const SourceBatch&, RunContext<T>&);      \
  template Tensor<T> decoder_forward(Tape<T>&, const Model<T>&, const EncoderOutput<T>&, std::span<const int>,    \
                                     std::size_t, std::size_t, RunContext<T>&);

SRCLAB_INSTANTIATE_MODEL(float)
SRCLAB_INSTANTIATE_MODEL(double)
template ModelParams<double> ModelParams<float>::cast<double>(bool) const;
template ModelParams<float> ModelParams<double>::cast<float>(bool) const;
template ModelParams<float> ModelParams<float>::cast<float>(bool) const;
template ModelParams<double> ModelParams<double>::cast<double>(bool) const;

}  // namespace srclab
