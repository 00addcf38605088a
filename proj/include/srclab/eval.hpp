#pragma once

// Decoding and translation-quality metrics, plus the per-checkpoint
// evaluation record shared by training logs and checkpoint sweeps.

#include <cstddef>
#include <span>
#include <vector>

#include "srclab/model.hpp"
#include "srclab/synth.hpp"

namespace srclab {

/// Greedy decoding of every source in `source`. Each output stops before
/// EOS or after `max_len` tokens; argmax ties go to the lowest id.
template <typename T>
std::vector<std::vector<int>> greedy_decode(const Model<T>& model, const SourceBatch& source, std::size_t max_len);

/// Corpus BLEU-4 in [0, 100]: clipped n-gram precisions (add-one smoothing
/// for n >= 2) combined geometrically, times the brevity penalty.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references);

/// Fraction of non-pad positions whose argmax (lowest id on ties) equals the target.
template <typename T>
double token_accuracy(const Tensor<T>& logits, std::span<const int> targets, int pad_id);

/// Strips a trailing EOS.
std::vector<int> strip_eos(const std::vector<int>& target);

struct EvalOptions {
  std::size_t bleu_sentences = 200;     // 0 = whole eval set
  std::size_t contrib_sentences = 50;   // 0 = whole eval set
  std::size_t decode_max_len = 40;
  std::size_t batch_size = 50;
};

struct EvalRecord {
  double valid_loss = 0.0;  // teacher-forced cross-entropy per target token
  double bleu = 0.0;
  double src_contrib_mean = 0.0;
  double src_contrib_std = 0.0;
};

/// Cross-entropy (no smoothing) over the first `limit` examples, token-weighted.
double teacher_forced_loss(const Model<float>& model, const Dataset& data, std::size_t limit, std::size_t batch_size);

/// Greedy-decode BLEU on the first `limit` examples.
double decode_bleu(const Model<float>& model, const Dataset& data, std::size_t limit, std::size_t batch_size,
                   std::size_t max_len);

EvalRecord evaluate_model(const Model<float>& model, const Dataset& eval, const EvalOptions& options);

}  // namespace srclab
