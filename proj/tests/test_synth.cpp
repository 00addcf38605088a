#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "srclab/synth.hpp"

using namespace srclab;
namespace fs = std::filesystem;

namespace {

SynthLanguageSpec shift_language(int shift) {
  SynthLanguageSpec s;
  s.mapping.resize(100);
  for (int i = 0; i < 100; ++i) s.mapping[std::size_t(i)] = (i + shift) % 100;
  return s;
}

SynthLanguageSpec small_language() {
  SynthLanguageSpec s;
  s.vocab_src = s.vocab_tgt = 30;
  s.min_len = 3;
  s.max_len = 8;
  s.seed = 4;
  return s;
}

FrameRenderSpec small_frames() {
  FrameRenderSpec f;
  f.feature_dim = 6;
  f.seed = 9;
  return f;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("srclab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Reference reorder written from the rule: after mapping, swap positions
// (2i, 2i+1) when the smaller source id of the pair is even.
std::vector<int> reference_translate(const std::vector<int>& src, const std::vector<int>& mapping) {
  std::vector<int> out;
  for (int s : src) out.push_back(mapping[std::size_t(s)]);
  for (std::size_t i = 0; i + 1 < src.size(); i += 2)
    if (std::min(src[i], src[i + 1]) % 2 == 0) std::swap(out[i], out[i + 1]);
  return out;
}

}  // namespace

TEST(SynthLanguage, ShiftMappingExample) {
  const SynthLanguage lang(shift_language(7));
  EXPECT_EQ(lang.translate({2, 5}), (std::vector<int>{12, 9}));
  EXPECT_EQ(lang.translate({3, 5}), (std::vector<int>{10, 12}));
  EXPECT_EQ(lang.translate({95, 4, 6}), (std::vector<int>{11, 2, 13}));
}

TEST(SynthLanguage, MatchesReferenceRule) {
  const auto spec = small_language();
  const SynthLanguage lang(spec);
  std::vector<int> mapping(30);
  for (int i = 0; i < 30; ++i) mapping[std::size_t(i)] = lang.map(i);
  for (const auto& p : gen_parallel_corpus(spec, 300)) EXPECT_EQ(p.tgt, reference_translate(p.src, mapping));
}

TEST(SynthLanguage, MappingIsBijection) {
  const SynthLanguage lang(small_language());
  std::set<int> image;
  for (int i = 0; i < 30; ++i) {
    image.insert(lang.map(i));
    EXPECT_EQ(lang.unmap(lang.map(i)), i);
  }
  EXPECT_EQ(image.size(), 30u);
}

TEST(SynthLanguage, NonPermutationMappingRejected) {
  auto spec = shift_language(7);
  spec.mapping[3] = spec.mapping[4];
  EXPECT_THROW(SynthLanguage{spec}, ContractViolation);
  auto bad = small_language();
  bad.vocab_tgt = 31;
  EXPECT_THROW(SynthLanguage{bad}, ContractViolation);
}

TEST(SynthLanguage, InverseRecoversSourceProperty) {
  const auto spec = small_language();
  const SynthLanguage lang(spec);
  for (const auto& p : gen_parallel_corpus(spec, 1000)) {
    ASSERT_EQ(lang.inverse_translate(p.tgt), p.src);
    EXPECT_EQ(p.tgt.size(), p.src.size());
  }
}

TEST(GenParallelCorpus, SameSeedIsIdentical) {
  const auto a = gen_parallel_corpus(small_language(), 200);
  const auto b = gen_parallel_corpus(small_language(), 200);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].src, b[i].src);
    EXPECT_EQ(a[i].tgt, b[i].tgt);
  }
  auto other = small_language();
  other.seed = 5;
  const auto c = gen_parallel_corpus(other, 200);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].src == c[i].src;
  EXPECT_LT(same, 5u);
}

TEST(GenParallelCorpus, LengthsAndIdsInRange) {
  const auto spec = small_language();
  for (const auto& p : gen_parallel_corpus(spec, 500)) {
    EXPECT_GE(p.src.size(), spec.min_len);
    EXPECT_LE(p.src.size(), spec.max_len);
    for (int t : p.src) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 30);
    }
  }
}

TEST(RenderFrames, NoiselessSingleFrameEqualsPrototypes) {
  FrameRenderSpec f = small_frames();
  f.noise_std = 0.0;
  f.k_min = f.k_max = 1;
  const FrameRenderer r(f, 30);
  const std::vector<int> tokens{4, 0, 29, 4};
  const auto m = r.render(tokens, 3);
  ASSERT_EQ(m.frame_count, 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto proto = r.prototype(tokens[t]);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(m.values[t * 6 + j], proto[j]);
  }
}

TEST(RenderFrames, FrameCountBounds) {
  const auto f = small_frames();
  std::mt19937_64 rng(1);
  for (std::size_t trial = 0; trial < 200; ++trial) {
    std::vector<int> tokens(1 + rng() % 20);
    for (auto& t : tokens) t = int(rng() % 30);
    const auto m = render_frames(tokens, f, 30, trial);
    EXPECT_GE(m.frame_count, 2 * tokens.size());
    EXPECT_LE(m.frame_count, 5 * tokens.size());
    EXPECT_EQ(m.values.size(), m.frame_count * 6);
  }
}

TEST(RenderFrames, PrototypesPairwiseDistinct) {
  const FrameRenderer r(small_frames(), 30);
  for (int a = 0; a < 30; ++a)
    for (int b = a + 1; b < 30; ++b) {
      const auto pa = r.prototype(a), pb = r.prototype(b);
      EXPECT_FALSE(std::equal(pa.begin(), pa.end(), pb.begin()));
    }
}

TEST(RenderFrames, NearestPrototypeRecoversTokensProperty) {
  FrameRenderSpec f = small_frames();
  f.noise_std = 0.0;
  const FrameRenderer r(f, 30);
  std::mt19937_64 rng(2);
  for (std::size_t trial = 0; trial < 100; ++trial) {
    std::vector<int> tokens(1 + rng() % 15);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      // Avoid immediate repeats so de-duplication is unambiguous.
      do tokens[i] = int(rng() % 30);
      while (i > 0 && tokens[i] == tokens[i - 1]);
    }
    const auto m = r.render(tokens, trial);
    std::vector<int> decoded;
    for (std::size_t t = 0; t < m.frame_count; ++t) {
      int best = -1;
      double best_d = 1e300;
      for (int c = 0; c < 30; ++c) {
        const auto p = r.prototype(c);
        double d = 0.0;
        for (std::size_t j = 0; j < 6; ++j) d += (m.values[t * 6 + j] - p[j]) * (m.values[t * 6 + j] - p[j]);
        if (d < best_d) best_d = d, best = c;
      }
      if (decoded.empty() || decoded.back() != best) decoded.push_back(best);
    }
    EXPECT_EQ(decoded, tokens);
  }
}

TEST(RenderFrames, InvalidSpecRejected) {
  FrameRenderSpec f = small_frames();
  f.k_min = 0;
  EXPECT_THROW(FrameRenderer(f, 30), ContractViolation);
  const FrameRenderer ok(small_frames(), 30);
  EXPECT_THROW(ok.render({30}, 1), ContractViolation);
}

TEST(MakeTaskDataset, SharedSentencesAcrossTasks) {
  const auto lang = small_language();
  const auto frames = small_frames();
  const SplitSizes sizes{60, 10, 10};
  const auto mt = make_task_dataset(TaskKind::MT, lang, frames, sizes);
  const auto st = make_task_dataset(TaskKind::STAnalog, lang, frames, sizes);
  const auto asr = make_task_dataset(TaskKind::ASRAnalog, lang, frames, sizes);
  for (auto member : {&DatasetSplits::train, &DatasetSplits::valid, &DatasetSplits::test}) {
    const auto &m = mt.*member, &s = st.*member, &a = asr.*member;
    ASSERT_EQ(m.examples.size(), s.examples.size());
    for (std::size_t i = 0; i < m.examples.size(); ++i) {
      EXPECT_EQ(s.examples[i].target, m.examples[i].target);
      EXPECT_EQ(s.examples[i].source_tokens, m.examples[i].source_tokens);
      EXPECT_EQ(a.examples[i].frames.values, s.examples[i].frames.values);
      auto expected = a.examples[i].source_tokens;
      expected.push_back(kEosId);
      EXPECT_EQ(a.examples[i].target, expected);
      EXPECT_EQ(m.examples[i].frames.frame_count, 0u);
      EXPECT_EQ(m.examples[i].target.back(), kEosId);
    }
  }
}

TEST(MakeTaskDataset, SplitsAreDisjointByHash) {
  const auto d = make_task_dataset(TaskKind::MT, small_language(), small_frames(), {400, 100, 100});
  std::map<std::uint64_t, int> owner;
  int split = 0;
  for (const auto* part : {&d.train, &d.valid, &d.test}) {
    for (const auto& ex : part->examples) {
      const auto h = hash_tokens(ex.source_tokens);
      const auto [it, inserted] = owner.emplace(h, split);
      if (!inserted) EXPECT_EQ(it->second, split) << "sentence shared across splits";
    }
    ++split;
  }
}

TEST(MakeTaskDataset, EqualSplitSeedsRejected) {
  EXPECT_THROW(make_task_dataset(TaskKind::MT, small_language(), small_frames(), {10, 5, 5}, {1, 1, 2}),
               ContractViolation);
}

TEST(MakeTaskDataset, ConfigureForTaskSetsVocabularies) {
  ModelConfig c;
  configure_for_task(c, TaskKind::STAnalog, small_language(), small_frames());
  EXPECT_EQ(c.input_mode, InputMode::Frames);
  EXPECT_EQ(c.feature_dim, 6u);
  EXPECT_EQ(c.vocab_tgt, 30u + kNumSpecialTokens);
  configure_for_task(c, TaskKind::MT, small_language(), small_frames());
  EXPECT_EQ(c.input_mode, InputMode::Tokens);
  EXPECT_EQ(c.vocab_src, 30u + kNumSpecialTokens);
}

TEST(BatchEpoch, EqualLengthsPackInThrees) {
  Dataset d;
  for (std::size_t i = 0; i < 9; ++i) {
    Example ex;
    ex.id = i;
    ex.source_tokens = {5, 6, 7};
    ex.target = {5, 6, 7, kEosId};
    d.examples.push_back(ex);
  }
  const auto batches = batch_epoch(d, 12, 1);
  ASSERT_EQ(batches.size(), 3u);
  for (const auto& b : batches) {
    EXPECT_EQ(b.indices.size(), 3u);
    EXPECT_EQ(b.target_tokens(), 12u);
  }
}

TEST(BatchEpoch, CapRespectedAndNothingLostProperty) {
  const auto d = make_task_dataset(TaskKind::STAnalog, small_language(), small_frames(), {300, 10, 10}).train;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t cap = 20 + 10 * seed;
    const auto batches = batch_epoch(d, cap, seed);
    std::vector<std::size_t> seen;
    for (const auto& b : batches) {
      std::size_t longest = 0;
      for (auto i : b.indices) longest = std::max(longest, d.examples[i].target.size());
      EXPECT_LE(b.indices.size() * longest, cap);
      EXPECT_LE(b.target_tokens(), cap);
      seen.insert(seen.end(), b.indices.begin(), b.indices.end());
    }
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(d.examples.size());
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(seen, all);
  }
}

TEST(BatchEpoch, OversizedExampleRejected) {
  const auto d = make_task_dataset(TaskKind::MT, small_language(), small_frames(), {20, 5, 5}).train;
  EXPECT_THROW(batch_epoch(d, 3, 1), ContractViolation);
}

TEST(BatchIterator, SameSeedSameSequence) {
  const auto d = make_task_dataset(TaskKind::MT, small_language(), small_frames(), {100, 5, 5}).train;
  BatchIterator a(d, 40, 3), b(d, 40, 3);
  for (int i = 0; i < 50; ++i) {
    const auto& x = a.next();
    const auto& y = b.next();
    EXPECT_EQ(x.indices, y.indices);
  }
  EXPECT_GT(a.epoch(), 0u);
}

TEST(Collate, PaddingAndTeacherForcingLayout) {
  Dataset d;
  d.kind = TaskKind::MT;
  for (auto tgt : {std::vector<int>{7, 8, kEosId}, std::vector<int>{9, kEosId}}) {
    Example ex;
    ex.source_tokens = {3, 4, 5};
    ex.source_tokens.resize(tgt.size() + 1, 6);
    ex.target = tgt;
    d.examples.push_back(ex);
  }
  const auto b = collate(d, {0, 1});
  EXPECT_EQ(b.target.max_length, 3u);
  EXPECT_EQ(b.target.input, (std::vector<int>{kBosId, 7, 8, kBosId, 9, kPadId}));
  EXPECT_EQ(b.target.output, (std::vector<int>{7, 8, kEosId, 9, kEosId, kPadId}));
  EXPECT_EQ(b.source.lengths, (std::vector<std::size_t>{4, 3}));
  EXPECT_EQ(b.source.tokens[7], kPadId);
  EXPECT_EQ(b.target_tokens(), 5u);
}

TEST(DatasetFiles, SaveLoadRoundTrip) {
  const auto dir = scratch_dir("dataset");
  for (auto kind : {TaskKind::MT, TaskKind::STAnalog}) {
    const auto d = make_task_dataset(kind, small_language(), small_frames(), {30, 5, 5}).train;
    save_dataset(d, dir, to_string(kind));
    const auto r = load_dataset(dir, to_string(kind));
    EXPECT_EQ(r.kind, d.kind);
    EXPECT_EQ(r.feature_dim, d.feature_dim);
    ASSERT_EQ(r.examples.size(), d.examples.size());
    for (std::size_t i = 0; i < d.examples.size(); ++i) {
      EXPECT_EQ(r.examples[i].id, d.examples[i].id);
      EXPECT_EQ(r.examples[i].source_tokens, d.examples[i].source_tokens);
      EXPECT_EQ(r.examples[i].target, d.examples[i].target);
      EXPECT_EQ(r.examples[i].frames.values, d.examples[i].frames.values);
    }
  }
  EXPECT_THROW(load_dataset(dir, "absent"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(DeriveSeed, StreamsDiffer) {
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
}
