#pragma once

// Synthetic translation corpora with a controllable encoder difficulty:
// a text-like task (source tokens) and a speech-like task where every
// source token is rendered as a variable number of noisy feature frames.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "srclab/model.hpp"

namespace srclab {

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0);

/// Source language and its token mapping. Ids here are content ids in
/// [0, vocab); the dataset layer shifts them past the special tokens.
struct SynthLanguageSpec {
  std::size_t vocab_src = 100;
  std::size_t vocab_tgt = 100;
  std::size_t min_len = 5;
  std::size_t max_len = 20;
  /// Distinct successors per token in the source bigram chain; 0 samples
  /// tokens independently and uniformly.
  std::size_t successors = 4;
  /// Optional explicit mapping (must be a permutation); derived from seed when empty.
  std::vector<int> mapping;
  std::uint64_t seed = 1;
};

class SynthLanguage {
 public:
  explicit SynthLanguage(SynthLanguageSpec spec);

  const SynthLanguageSpec& spec() const { return spec_; }
  int map(int src) const { return mapping_.at(static_cast<std::size_t>(src)); }
  int unmap(int tgt) const { return inverse_.at(static_cast<std::size_t>(tgt)); }

  /// Map every token, then swap each adjacent pair (0,1), (2,3), ... whose
  /// smaller source id is even. The swap test is symmetric in the pair, so
  /// the reorder is an involution and translation is invertible.
  std::vector<int> translate(const std::vector<int>& src) const;
  std::vector<int> inverse_translate(const std::vector<int>& tgt) const;

  std::vector<int> sample_sentence(std::mt19937_64& rng) const;

 private:
  SynthLanguageSpec spec_;
  std::vector<int> mapping_;
  std::vector<int> inverse_;
  std::vector<std::vector<int>> next_;  // successors per token
  std::vector<std::vector<double>> next_weights_;
};

struct ParallelPair {
  std::vector<int> src;
  std::vector<int> tgt;
};

/// Sentence i is drawn from derive_seed(spec.seed, stream, i).
std::vector<ParallelPair> gen_parallel_corpus(const SynthLanguageSpec& spec, std::size_t n,
                                              std::uint64_t stream = 0);

struct FrameRenderSpec {
  std::size_t feature_dim = 16;
  std::size_t k_min = 2;
  std::size_t k_max = 5;
  double noise_std = 0.3;
  std::uint64_t seed = 7;
};

/// Row-major [frame_count x feature_dim].
struct FrameMatrix {
  std::size_t frame_count = 0;
  std::size_t feature_dim = 0;
  std::vector<float> values;
};

class FrameRenderer {
 public:
  FrameRenderer(FrameRenderSpec spec, std::size_t vocab);

  const FrameRenderSpec& spec() const { return spec_; }
  std::span<const float> prototype(int token) const;

  /// Each token emits k ~ U[k_min, k_max] frames, each prototype + N(0, noise_std^2).
  FrameMatrix render(const std::vector<int>& tokens, std::uint64_t seed) const;

 private:
  FrameRenderSpec spec_;
  std::size_t vocab_;
  std::vector<float> prototypes_;
};

FrameMatrix render_frames(const std::vector<int>& tokens, const FrameRenderSpec& spec, std::size_t vocab,
                          std::uint64_t seed);

enum class TaskKind { MT, ASRAnalog, STAnalog };
std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);
inline bool uses_frames(TaskKind k) { return k != TaskKind::MT; }

/// One training example in model ids (content id + kNumSpecialTokens).
struct Example {
  std::size_t id = 0;
  std::vector<int> source_tokens;  // underlying sentence, kept for every task
  FrameMatrix frames;              // empty for MT
  std::vector<int> target;         // ends with kEosId

  std::size_t source_length() const { return frames.frame_count ? frames.frame_count : source_tokens.size(); }
};

struct Dataset {
  TaskKind kind = TaskKind::MT;
  std::size_t feature_dim = 0;
  std::vector<Example> examples;
};

struct DatasetSplits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

struct SplitSizes {
  std::size_t train = 20000;
  std::size_t valid = 1000;
  std::size_t test = 1000;
};

struct SplitSeeds {
  std::uint64_t train = 101;
  std::uint64_t valid = 202;
  std::uint64_t test = 303;
};

/// Sentences are generated split by split; a sentence already used by an
/// earlier split is redrawn, so splits are disjoint. ASR and ST datasets
/// built from the same specs share frames example by example.
DatasetSplits make_task_dataset(TaskKind kind, const SynthLanguageSpec& lang, const FrameRenderSpec& frames,
                                SplitSizes sizes, SplitSeeds seeds = {});

/// Model-side config fields implied by a task (vocabularies, input mode).
void configure_for_task(ModelConfig& config, TaskKind kind, const SynthLanguageSpec& lang,
                        const FrameRenderSpec& frames);

std::uint64_t hash_tokens(const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::size_t> indices;  // into the dataset
  SourceBatch source;
  TargetBatch target;
  std::size_t target_tokens() const;  // non-pad target tokens
};

/// Packs the given dataset examples into padded model inputs.
Batch collate(const Dataset& data, std::vector<std::size_t> indices);

/// One epoch: examples sorted by length with seeded tie-breaking, packed so
/// that batch_size * longest_target <= max_tokens, batch order shuffled.
std::vector<Batch> batch_epoch(const Dataset& data, std::size_t max_tokens, std::uint64_t seed);

/// Endless stream of batches; epoch e is shuffled with derive_seed(seed, e).
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t max_tokens, std::uint64_t seed);
  const Batch& next();
  std::size_t epoch() const { return epoch_; }

 private:
  const Dataset* data_;
  std::size_t max_tokens_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<Batch> batches_;
};

// ---------------------------------------------------------------------------
// Files

/// Writes <dir>/<name>.txt (one record per line) and, for frame tasks,
/// <dir>/<name>.frames.bin holding one [uint32 T][uint32 f][T*f float32]
/// block per example, little-endian.
void save_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& name);
Dataset load_dataset(const std::filesystem::path& dir, const std::string& name);

}  // namespace srclab
