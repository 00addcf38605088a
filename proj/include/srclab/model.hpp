#pragma once

// Pre-LN encoder-decoder transformer with a pluggable combiner for the
// residual sum after each decoder cross-attention block.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "srclab/tensor.hpp"

namespace srclab {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kNumSpecialTokens = 3;

/// How the cross-attention output x_attn and the residual stream x_res are
/// summed inside every decoder layer.
enum class ResidualVariant {
  Standard,       // x_attn + x_res
  WeRC,           // lambda * LN(x_attn) + (1 - lambda) * LN(x_res), parameter-free LN
  WeRCNoNorm,     // lambda * x_attn + (1 - lambda) * x_res
  WeRCNoWeights,  // WeRC with lambda = 0.5
};

std::string to_string(ResidualVariant v);
ResidualVariant parse_residual_variant(const std::string& s);

enum class InputMode { Tokens, Frames };

struct ModelConfig {
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_src = 100 + kNumSpecialTokens;
  std::size_t vocab_tgt = 100 + kNumSpecialTokens;
  std::size_t max_len = 64;
  double dropout = 0.1;
  ResidualVariant residual = ResidualVariant::Standard;
  double lambda = 0.65;
  InputMode input_mode = InputMode::Tokens;
  std::size_t feature_dim = 16;
  std::size_t pool_stride = 2;
  double ln_eps = 1e-5;

  /// Throws ContractViolation listing every invalid field.
  void validate() const;
  std::size_t head_dim() const { return d_model / heads; }
  /// Lambda actually applied by the combiner (0.5 for WeRCNoWeights).
  double effective_lambda() const;
  /// Number of encoder positions produced for a source of `length` tokens or frames.
  std::size_t encoder_length(std::size_t length) const;
};

/// Named parameter tensors in a fixed insertion order.
template <typename T>
class ModelParams {
 public:
  void add(std::string name, Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.contains(name); }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  std::size_t element_count() const;

  void zero_grads();
  /// Deep copy in another precision.
  template <typename U>
  ModelParams<U> cast(bool requires_grad) const;
  ModelParams clone() const { return cast<T>(true); }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct Model {
  ModelConfig config;
  ModelParams<T> params;
};

/// Parameter shapes implied by a config, in creation order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

/// Scaled-uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
/// fan_in the leading extent of weights (d_model for embeddings and biases of
/// the same block); layer-norm gains 1, biases 0.
template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed);

/// Resamples every decoder-side parameter (embedding, all decoder layers,
/// final LN and output projection) from `seed`; encoder-side tensors are
/// copied bitwise.
template <typename T>
ModelParams<T> reinit_decoder(const ModelConfig& config, const ModelParams<T>& params, std::uint64_t seed);

bool is_decoder_param(const std::string& name);

// ---------------------------------------------------------------------------
// Inputs

/// Padded source batch. Token mode fills `tokens` [B x max_length]; frame
/// mode fills `frames` [B x max_length x feature_dim].
struct SourceBatch {
  std::size_t batch = 0;
  std::size_t max_length = 0;
  std::vector<std::size_t> lengths;
  std::vector<int> tokens;
  std::vector<float> frames;
};

/// Teacher-forcing targets: `input` is BOS-prefixed, `output` EOS-terminated,
/// both [B x max_length] padded with kPadId.
struct TargetBatch {
  std::size_t batch = 0;
  std::size_t max_length = 0;
  std::vector<std::size_t> lengths;
  std::vector<int> input;
  std::vector<int> output;
};

// ---------------------------------------------------------------------------
// Forward pass

enum class BlockKind { EncoderSelf, DecoderSelf, DecoderCross };

/// Activations of one attention block for a single sentence (batch of 1).
template <typename T>
struct AttentionTrace {
  BlockKind kind = BlockKind::EncoderSelf;
  std::size_t layer = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<T> value_input;  // [keys x d] stream read by the value path, before any pre-LN
  std::vector<T> weights;      // [heads x queries x keys]
  std::vector<T> attn_out;     // [queries x d] x_attn
  std::vector<T> residual;     // [queries x d] x_res
  std::vector<T> attn_term;    // summand of the residual sum coming from x_attn
  std::vector<T> res_term;     // summand coming from x_res
  std::vector<T> output;       // [queries x d]
};

template <typename T>
struct ForwardTrace {
  std::vector<AttentionTrace<T>> blocks;
};

template <typename T>
struct RunContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  ForwardTrace<T>* trace = nullptr;  // batch size 1 only
};

template <typename T>
struct EncoderOutput {
  Tensor<T> states;                  // [B x S x d], final layer norm applied
  std::vector<std::size_t> lengths;  // valid positions per example
};

/// Parameter-free LN form for WeRC variants; plain sum for Standard.
template <typename T>
Tensor<T> combine_cross_residual(Tape<T>& tape, const Tensor<T>& x_attn, const Tensor<T>& x_res,
                                 ResidualVariant variant, double lambda, double eps,
                                 Tensor<T>* attn_term = nullptr, Tensor<T>* res_term = nullptr);

/// Mean-pool frames[B x T x f] in windows of `stride`, then project f -> d_model.
template <typename T>
Tensor<T> subsample_frames(Tape<T>& tape, const Model<T>& model, const Tensor<T>& frames,
                           std::span<const std::size_t> lengths);

template <typename T>
EncoderOutput<T> encoder_forward(Tape<T>& tape, const Model<T>& model, const SourceBatch& source, RunContext<T>& ctx);

/// Logits [B x L x vocab_tgt] for BOS-prefixed inputs ids[B x L].
template <typename T>
Tensor<T> decoder_forward(Tape<T>& tape, const Model<T>& model, const EncoderOutput<T>& encoded,
                          std::span<const int> target_inputs, std::size_t batch, std::size_t length,
                          RunContext<T>& ctx);

}  // namespace srclab
