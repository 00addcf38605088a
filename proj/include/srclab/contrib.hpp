#pragma once

// Source-contribution measurement.
//
// Every attention block is rewritten as an exact sum over contributing
// tokens: y_i = sum_j T_i(x_j) + b_i + residual_i, with layer norms frozen at
// their forward-pass scale. Per-token relevance is
//   r_ij = max(0, |y_i|_1 - |y_i - T_i(x_j)|_1),
// rows are normalized, and the per-layer matrices are composed across the
// encoder and decoder to split each prediction between source positions and
// target-prefix positions.

#include <cstddef>
#include <vector>

#include "srclab/model.hpp"
#include "srclab/synth.hpp"

namespace srclab {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  static Matrix identity(std::size_t n);
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double row_sum(std::size_t r) const;
};

Matrix multiply(const Matrix& a, const Matrix& b);

/// Throws ContractViolation unless entries are >= -tol and rows sum to 1 within tol.
void require_row_stochastic(const Matrix& m, double tol, const char* what);

struct BlockDecomposition {
  BlockKind kind = BlockKind::EncoderSelf;
  std::size_t layer = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::size_t width = 0;
  std::vector<double> token_terms;  // [queries x keys x width]: T_i(x_j)
  std::vector<double> bias;         // [queries x width]
  std::vector<double> residual;     // [queries x width]
  std::vector<double> output;       // [queries x width]: block output of the forward pass

  const double* term(std::size_t i, std::size_t j) const { return token_terms.data() + (i * keys + j) * width; }
  /// Sum of the token terms of query i (the attention-side contribution).
  std::vector<double> attention_part(std::size_t i) const;
  /// max_i |output_i - (sum_j T_i(x_j) + b_i + residual_i)|_inf
  double reconstruction_error() const;
};

/// Rewrites one traced block. The value path reads the pre-LN stream for
/// self-attention (LN linearized with its frozen per-vector scale) and the
/// encoder output for cross-attention; WeRC weighting and the parameter-free
/// LN of the combiner are folded into T, b and the residual.
/// Throws NumericError when the reconstruction misses by more than `tolerance`.
BlockDecomposition decompose_attention_block(const Model<double>& model, const AttentionTrace<double>& trace,
                                             double tolerance = 1e-6);

/// Rows are queries; columns are the keys followed by one residual column.
struct LayerContrib {
  Matrix matrix;
  std::size_t fallback_rows = 0;  // all-zero relevance rows replaced by uniform
};

LayerContrib layer_contribution_matrix(const BlockDecomposition& block);

/// Self-attention contribution folded into a square mixing matrix: the
/// residual column goes to the query's own position.
Matrix self_mixing(const LayerContrib& contrib);

/// Composes encoder layer mixings (layer 0 first) into a map from encoder
/// outputs to source input positions.
Matrix encoder_rollout(const std::vector<Matrix>& layers);

/// Decoder composition. Each layer applies its self-attention mixing to the
/// accumulated target-side composition, then sends the cross-attention key
/// mass through `encoder` to the source positions and the residual mass to
/// the accumulated composition. Result rows are decoder outputs; columns are
/// source positions followed by target input positions.
Matrix decoder_rollout(const Matrix& encoder, const std::vector<Matrix>& self_layers,
                       const std::vector<LayerContrib>& cross_layers);

struct SentenceContribution {
  std::size_t example = 0;
  std::vector<double> source_share;  // one per predicted target token
  std::vector<double> target_share;
  double mean = 0.0;
};

struct ContributionReport {
  std::vector<SentenceContribution> sentences;
  double corpus_mean = 0.0;
  double corpus_std = 0.0;  // population std over sentence means
  std::size_t fallback_rows = 0;
  std::size_t skipped = 0;
  double max_reconstruction_error = 0.0;
};

/// Full pipeline for one sentence of `data`.
SentenceContribution sentence_contribution(const Model<double>& model, const Dataset& data, std::size_t index,
                                           std::size_t* fallback_rows = nullptr,
                                           double* reconstruction_error = nullptr);

/// Teacher-forced analysis of the first `limit` examples (all when 0).
ContributionReport source_contribution(const Model<double>& model, const Dataset& data, std::size_t limit = 0);

/// Fills corpus_mean and corpus_std from the sentence means.
void summarize_corpus(ContributionReport& report);

}  // namespace srclab
