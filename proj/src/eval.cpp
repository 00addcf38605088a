#include "srclab/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

#include "srclab/contrib.hpp"
#include "srclab/ops.hpp"

namespace srclab {

namespace {

template <typename T>
std::size_t argmax_lowest(const T* z, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (z[c] > z[best]) best = c;
  return best;
}

std::vector<std::size_t> first_n(const Dataset& data, std::size_t limit) {
  const auto n = limit == 0 ? data.examples.size() : std::min(limit, data.examples.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::vector<std::vector<std::size_t>> chunks(const std::vector<std::size_t>& idx, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + size)));
  return out;
}

}  // namespace

template <typename T>
std::vector<std::vector<int>> greedy_decode(const Model<T>& model, const SourceBatch& source, std::size_t max_len) {
  const auto batch = source.batch;
  std::vector<std::vector<int>> out(batch);
  if (max_len == 0) return out;
  Tape<T> tape(false);
  RunContext<T> ctx;
  const auto encoded = encoder_forward(tape, model, source, ctx);
  const auto vocab = model.config.vocab_tgt;

  std::vector<std::vector<int>> prefix(batch, std::vector<int>{kBosId});
  std::vector<bool> done(batch, false);
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto len = step + 1;
    std::vector<int> ids(batch * len);
    for (std::size_t b = 0; b < batch; ++b) std::copy(prefix[b].begin(), prefix[b].end(), ids.begin() + b * len);
    tape.clear();
    const auto logits = decoder_forward(tape, model, encoded, ids, batch, len, ctx);
    const auto z = logits.data();
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) {
        prefix[b].push_back(kPadId);
        continue;
      }
      const auto tok = static_cast<int>(argmax_lowest(z.data() + (b * len + step) * vocab, vocab));
      prefix[b].push_back(tok);
      if (tok == kEosId) {
        done[b] = true;
      } else {
        out[b].push_back(tok);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references) {
  if (hypotheses.size() != references.size())
    throw ContractViolation("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                            std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw ContractViolation("corpus_bleu: empty corpus");

  constexpr std::size_t kOrder = 4;
  std::array<double, kOrder> matches{};
  std::array<double, kOrder> totals{};
  double hyp_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    if (ref.empty()) throw ContractViolation("corpus_bleu: empty reference");
    hyp_len += double(hyp.size());
    ref_len += double(ref.size());
    for (std::size_t n = 1; n <= kOrder; ++n) {
      std::map<std::vector<int>, int> ref_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
      std::map<std::vector<int>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
      for (const auto& [gram, count] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }
  if (hyp_len == 0.0 || matches[0] == 0.0) return 0.0;
  double log_sum = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < kOrder; ++n) log_sum += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double brevity = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * brevity * std::exp(log_sum / double(kOrder));
}

template <typename T>
double token_accuracy(const Tensor<T>& logits, std::span<const int> targets, int pad_id) {
  const auto vocab = logits.shape().back();
  if (logits.size() != targets.size() * vocab)
    throw ContractViolation("token_accuracy: " + std::to_string(targets.size()) + " targets for " +
                            shape_str(logits.shape()));
  const auto z = logits.data();
  std::size_t hit = 0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == pad_id) continue;
    ++counted;
    if (argmax_lowest(z.data() + r * vocab, vocab) == static_cast<std::size_t>(targets[r])) ++hit;
  }
  if (counted == 0) throw ContractViolation("token_accuracy: every target is padding");
  return double(hit) / double(counted);
}

std::vector<int> strip_eos(const std::vector<int>& target) {
  if (!target.empty() && target.back() == kEosId) return {target.begin(), target.end() - 1};
  return target;
}

double teacher_forced_loss(const Model<float>& model, const Dataset& data, std::size_t limit, std::size_t batch_size) {
  double total = 0.0;
  double tokens = 0.0;
  Tape<float> tape(false);
  RunContext<float> ctx;
  for (const auto& idx : chunks(first_n(data, limit), batch_size)) {
    const auto batch = collate(data, idx);
    tape.clear();
    const auto encoded = encoder_forward(tape, model, batch.source, ctx);
    const auto logits =
        decoder_forward(tape, model, encoded, batch.target.input, batch.target.batch, batch.target.max_length, ctx);
    const auto loss = ops::label_smoothed_ce(tape, logits, batch.target.output, 0.0, kPadId);
    const double n = double(batch.target_tokens());
    total += double(loss.item()) * n;
    tokens += n;
  }
  if (tokens == 0.0) throw ContractViolation("teacher_forced_loss: empty evaluation set");
  return total / tokens;
}

double decode_bleu(const Model<float>& model, const Dataset& data, std::size_t limit, std::size_t batch_size,
                   std::size_t max_len) {
  std::vector<std::vector<int>> hyps;
  std::vector<std::vector<int>> refs;
  for (const auto& idx : chunks(first_n(data, limit), batch_size)) {
    const auto batch = collate(data, idx);
    for (auto& h : greedy_decode(model, batch.source, max_len)) hyps.push_back(std::move(h));
    for (auto i : idx) refs.push_back(strip_eos(data.examples[i].target));
  }
  return corpus_bleu(hyps, refs);
}

EvalRecord evaluate_model(const Model<float>& model, const Dataset& eval, const EvalOptions& options) {
  EvalRecord rec;
  rec.valid_loss = teacher_forced_loss(model, eval, options.bleu_sentences, options.batch_size);
  rec.bleu = decode_bleu(model, eval, options.bleu_sentences, options.batch_size, options.decode_max_len);
  const Model<double> wide{model.config, model.params.cast<double>(false)};
  const auto report = source_contribution(wide, eval, options.contrib_sentences);
  rec.src_contrib_mean = report.corpus_mean;
  rec.src_contrib_std = report.corpus_std;
  return rec;
}

template std::vector<std::vector<int>> greedy_decode(const Model<float>&, const SourceBatch&, std::size_t);
template std::vector<std::vector<int>> greedy_decode(const Model<double>&, const SourceBatch&, std::size_t);
template double token_accuracy(const Tensor<float>&, std::span<const int>, int);
template double token_accuracy(const Tensor<double>&, std::span<const int>, int);

}  // namespace srclab
