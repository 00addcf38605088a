#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "srclab/contrib.hpp"

using namespace srclab;

namespace {

SynthLanguageSpec small_language() {
  SynthLanguageSpec s;
  s.vocab_src = s.vocab_tgt = 20;
  s.min_len = 2;
  s.max_len = 7;
  s.seed = 3;
  return s;
}

FrameRenderSpec small_frames() {
  FrameRenderSpec f;
  f.feature_dim = 6;
  f.k_min = 1;
  f.k_max = 3;
  return f;
}

Model<double> small_model(TaskKind task, ResidualVariant v, std::size_t enc = 2, std::size_t dec = 2,
                          std::uint64_t seed = 5) {
  ModelConfig c;
  c.enc_layers = enc;
  c.dec_layers = dec;
  c.heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.residual = v;
  configure_for_task(c, task, small_language(), small_frames());
  return build_model<double>(c, seed);
}

Dataset small_data(TaskKind task, std::size_t n = 12) {
  return make_task_dataset(task, small_language(), small_frames(), {n, 2, 2}).train;
}

ForwardTrace<double> trace_of(const Model<double>& m, const Dataset& d, std::size_t index) {
  const auto b = collate(d, {index});
  Tape<double> tape(false);
  ForwardTrace<double> trace;
  RunContext<double> ctx{false, nullptr, &trace};
  const auto enc = encoder_forward(tape, m, b.source, ctx);
  decoder_forward(tape, m, enc, b.target.input, 1, b.target.max_length, ctx);
  return trace;
}

const std::vector<ResidualVariant> kVariants{ResidualVariant::Standard, ResidualVariant::WeRC,
                                             ResidualVariant::WeRCNoNorm, ResidualVariant::WeRCNoWeights};

BlockDecomposition hand_block(std::size_t keys, std::size_t width) {
  BlockDecomposition b;
  b.queries = 1;
  b.keys = keys;
  b.width = width;
  b.token_terms.assign(keys * width, 0.0);
  b.bias.assign(width, 0.0);
  b.residual.assign(width, 0.0);
  b.output.assign(width, 0.0);
  return b;
}

Matrix random_stochastic(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (m(i, j) = u(rng));
    for (std::size_t j = 0; j < cols; ++j) m(i, j) /= s;
  }
  return m;
}

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j)
      for (std::size_t k = 0; k < a.cols; ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

}  // namespace

TEST(Decompose, ReconstructionExactForEveryVariantAndTask) {
  for (auto task : {TaskKind::MT, TaskKind::STAnalog}) {
    const auto data = small_data(task);
    for (auto v : kVariants) {
      const auto m = small_model(task, v);
      for (std::size_t i = 0; i < data.examples.size(); ++i) {
        for (const auto& block : trace_of(m, data, i).blocks) {
          const auto dec = decompose_attention_block(m, block);
          EXPECT_LT(dec.reconstruction_error(), 1e-6) << to_string(task) << ' ' << to_string(v);
          EXPECT_EQ(dec.output, block.output);
        }
      }
    }
  }
}

TEST(Decompose, SingleKeyTermsSumToAttentionOutput) {
  const auto m = small_model(TaskKind::MT, ResidualVariant::Standard);
  Dataset d;
  d.kind = TaskKind::MT;
  Example ex;
  ex.source_tokens = {7};
  ex.target = {9, 10, kEosId};
  d.examples.push_back(ex);
  for (const auto& block : trace_of(m, d, 0).blocks) {
    if (block.kind != BlockKind::DecoderCross) continue;
    ASSERT_EQ(block.keys, 1u);
    const auto dec = decompose_attention_block(m, block);
    for (std::size_t i = 0; i < dec.queries; ++i) {
      const auto part = dec.attention_part(i);
      for (std::size_t c = 0; c < dec.width; ++c)
        EXPECT_NEAR(part[c] + dec.bias[i * dec.width + c], block.attn_out[i * dec.width + c], 1e-12);
    }
  }
}

TEST(Decompose, MaskedKeysContributeNothing) {
  const auto m = small_model(TaskKind::MT, ResidualVariant::WeRC);
  const auto data = small_data(TaskKind::MT);
  for (const auto& block : trace_of(m, data, 0).blocks) {
    if (block.kind != BlockKind::DecoderSelf) continue;
    const auto dec = decompose_attention_block(m, block);
    for (std::size_t i = 0; i < dec.queries; ++i)
      for (std::size_t j = i + 1; j < dec.keys; ++j)
        for (std::size_t c = 0; c < dec.width; ++c) EXPECT_EQ(dec.term(i, j)[c], 0.0);
  }
}

TEST(Decompose, WeRCSummandMassRatioIsLambda) {
  for (auto v : {ResidualVariant::WeRC, ResidualVariant::WeRCNoWeights}) {
    auto m = small_model(TaskKind::MT, v);
    m.config.ln_eps = 0.0;
    const double lambda = m.config.effective_lambda();
    const auto data = small_data(TaskKind::MT);
    for (const auto& block : trace_of(m, data, 1).blocks) {
      if (block.kind != BlockKind::DecoderCross) continue;
      const auto dec = decompose_attention_block(m, block);
      const auto d = dec.width;
      // Parameter-free LN of the traced summands, computed directly.
      auto ln_l1 = [d](const double* x) {
        double mean = 0.0, var = 0.0, l1 = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += x[c] / double(d);
        for (std::size_t c = 0; c < d; ++c) var += (x[c] - mean) * (x[c] - mean) / double(d);
        for (std::size_t c = 0; c < d; ++c) l1 += std::abs(x[c] - mean) / std::sqrt(var);
        return l1;
      };
      for (std::size_t i = 0; i < dec.queries; ++i) {
        const auto part = dec.attention_part(i);
        double attn_l1 = 0.0, res_l1 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          attn_l1 += std::abs(part[c] + dec.bias[i * d + c]);
          res_l1 += std::abs(dec.residual[i * d + c]);
        }
        EXPECT_NEAR(attn_l1 / ln_l1(block.attn_out.data() + i * d), lambda, 1e-9);
        EXPECT_NEAR(res_l1 / ln_l1(block.residual.data() + i * d), 1.0 - lambda, 1e-9);
      }
    }
  }
}

TEST(Decompose, CorruptedTraceIsDetected) {
  const auto m = small_model(TaskKind::MT, ResidualVariant::Standard);
  auto trace = trace_of(m, small_data(TaskKind::MT), 0);
  auto block = trace.blocks.front();
  block.output[0] += 1e-3;
  EXPECT_THROW(decompose_attention_block(m, block), NumericError);
}

TEST(LayerContribution, SymmetricKeysSplitEvenly) {
  auto b = hand_block(2, 3);
  for (std::size_t j = 0; j < 2; ++j) {
    b.token_terms[j * 3 + 0] = 0.5;
    b.token_terms[j * 3 + 1] = -1.0;
    b.token_terms[j * 3 + 2] = 2.0;
  }
  const auto lc = layer_contribution_matrix(b);
  EXPECT_NEAR(lc.matrix(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(lc.matrix(0, 1), 0.5, 1e-15);
  EXPECT_EQ(lc.matrix(0, 2), 0.0);
  EXPECT_EQ(lc.fallback_rows, 0u);
}

TEST(LayerContribution, DominantResidualTakesAllMass) {
  auto b = hand_block(3, 4);
  for (auto& v : b.token_terms) v = 1e-12;
  b.residual = {5.0, -3.0, 2.0, 1.0};
  const auto lc = layer_contribution_matrix(b);
  EXPECT_GT(lc.matrix(0, 3), 1.0 - 1e-9);
}

TEST(LayerContribution, HandComputedOneQueryTwoKeys) {
  // y = [1,2] + [-1,1] + [0.5,0.5] = [0.5, 3.5], |y|_1 = 4
  // r_0 = 4 - |[-0.5, 1.5]|_1 = 2, r_1 = 4 - |[1.5, 2.5]|_1 = 0, r_res = 4 - |[0, 3]|_1 = 1
  auto b = hand_block(2, 2);
  b.token_terms = {1.0, 2.0, -1.0, 1.0};
  b.residual = {0.5, 0.5};
  const auto lc = layer_contribution_matrix(b);
  EXPECT_NEAR(lc.matrix(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(lc.matrix(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(lc.matrix(0, 2), 1.0 / 3.0, 1e-15);
}

TEST(LayerContribution, BiasGetsNoCredit) {
  // Bias is part of y but never a column; with terms [1,0] and bias [0,1]:
  // y = [1,1], r_0 = 2 - 1 = 1, r_res = 2 - 2 = 0.
  auto b = hand_block(1, 2);
  b.token_terms = {1.0, 0.0};
  b.bias = {0.0, 1.0};
  const auto lc = layer_contribution_matrix(b);
  EXPECT_NEAR(lc.matrix(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(lc.matrix(0, 1), 0.0, 1e-15);
}

TEST(LayerContribution, AllZeroRowFallsBackToUniform) {
  const auto lc = layer_contribution_matrix(hand_block(3, 2));
  EXPECT_EQ(lc.fallback_rows, 1u);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(lc.matrix(0, j), 0.25);
}

TEST(LayerContribution, HomogeneityProperty) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    BlockDecomposition b;
    b.queries = 3;
    b.keys = 4;
    b.width = 5;
    for (std::size_t i = 0; i < 3 * 4 * 5; ++i) b.token_terms.push_back(n(rng));
    for (std::size_t i = 0; i < 3 * 5; ++i) {
      b.bias.push_back(n(rng));
      b.residual.push_back(n(rng));
    }
    auto scaled = b;
    const double c = scale(rng);
    for (auto* v : {&scaled.token_terms, &scaled.bias, &scaled.residual})
      for (auto& x : *v) x *= c;
    const auto a = layer_contribution_matrix(b).matrix;
    const auto s = layer_contribution_matrix(scaled).matrix;
    for (std::size_t k = 0; k < a.values.size(); ++k) EXPECT_NEAR(a.values[k], s.values[k], 1e-12);
  }
}

TEST(LayerContribution, RowsStochasticOnRealBlocks) {
  for (auto v : kVariants) {
    const auto m = small_model(TaskKind::STAnalog, v);
    const auto data = small_data(TaskKind::STAnalog);
    for (std::size_t i = 0; i < data.examples.size(); ++i)
      for (const auto& block : trace_of(m, data, i).blocks) {
        const auto lc = layer_contribution_matrix(decompose_attention_block(m, block));
        EXPECT_NO_THROW(require_row_stochastic(lc.matrix, 1e-9, "test"));
        for (double x : lc.matrix.values) EXPECT_GE(x, 0.0);
      }
  }
}

TEST(Rollout, IdentityLayersGiveIdentity) {
  const auto enc = encoder_rollout({Matrix::identity(4), Matrix::identity(4), Matrix::identity(4)});
  EXPECT_EQ(enc.values, Matrix::identity(4).values);

  LayerContrib keep_all{Matrix(3, 5), 0};
  for (std::size_t i = 0; i < 3; ++i) keep_all.matrix(i, 4) = 1.0;
  const auto z = decoder_rollout(enc, {Matrix::identity(3), Matrix::identity(3)}, {keep_all, keep_all});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(z(i, c), c == 4 + i ? 1.0 : 0.0);
}

TEST(Rollout, ProductOfStochasticIsStochasticProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Matrix> layers;
    for (int l = 0; l < 1 + trial % 5; ++l) layers.push_back(random_stochastic(6, 6, rng));
    EXPECT_NO_THROW(require_row_stochastic(encoder_rollout(layers), 1e-9, "rollout"));
    std::vector<Matrix> self;
    std::vector<LayerContrib> cross;
    for (int l = 0; l < 3; ++l) {
      self.push_back(random_stochastic(4, 4, rng));
      cross.push_back({random_stochastic(4, 7, rng), 0});
    }
    EXPECT_NO_THROW(require_row_stochastic(decoder_rollout(encoder_rollout(layers), self, cross), 1e-9, "decoder"));
  }
}

TEST(Rollout, EncoderOrderIsLaterLayerOnTheLeft) {
  Matrix a(2, 2), b(2, 2);
  a.values = {1.0, 0.0, 0.5, 0.5};
  b.values = {0.2, 0.8, 0.0, 1.0};
  EXPECT_EQ(encoder_rollout({a, b}).values, naive_product(b, a).values);
}

TEST(Rollout, TwoLayerDecoderMatchesJointMatrixProduct) {
  // State space [source 0..1 | target 0..1]. A decoder layer maps target rows to
  //   [C_src * E | diag(c_res) * S] and leaves source rows fixed, so the whole
  // rollout is the product of two 4x4 matrices applied to the identity.
  Matrix e(2, 2);
  e.values = {0.6, 0.4, 0.2, 0.8};
  Matrix s1(2, 2), s2(2, 2);
  s1.values = {1.0, 0.0, 0.5, 0.5};
  s2.values = {1.0, 0.0, 0.3, 0.7};
  LayerContrib c1{Matrix(2, 3), 0}, c2{Matrix(2, 3), 0};
  c1.matrix.values = {0.5, 0.1, 0.4, 0.2, 0.2, 0.6};
  c2.matrix.values = {0.0, 0.3, 0.7, 0.25, 0.25, 0.5};

  auto joint = [&](const Matrix& s, const Matrix& c) {
    Matrix j(4, 4);
    j(0, 0) = j(1, 1) = 1.0;
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t src = 0; src < 2; ++src)
        for (std::size_t k = 0; k < 2; ++k) j(2 + i, src) += c(i, k) * e(k, src);
      for (std::size_t t = 0; t < 2; ++t) j(2 + i, 2 + t) = c(i, 2) * s(i, t);
    }
    return j;
  };
  const auto expected = naive_product(joint(s2, c2.matrix), joint(s1, c1.matrix));
  const auto got = decoder_rollout(e, {s1, s2}, {c1, c2});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got(i, c), expected(2 + i, c), 1e-15);
}

TEST(Rollout, NonStochasticInputRejected) {
  Matrix bad(2, 2);
  bad.values = {0.5, 0.6, 0.0, 1.0};
  EXPECT_THROW(encoder_rollout({bad}), ContractViolation);
  LayerContrib cross{Matrix(2, 3), 0};
  EXPECT_THROW(decoder_rollout(Matrix::identity(2), {Matrix::identity(2)}, {cross}), ContractViolation);
}

TEST(Rollout, ShapeMismatchRejected) {
  LayerContrib cross{Matrix(2, 4), 0};
  for (std::size_t i = 0; i < 2; ++i) cross.matrix(i, 3) = 1.0;
  EXPECT_THROW(decoder_rollout(Matrix::identity(2), {Matrix::identity(2)}, {cross}), ContractViolation);
  EXPECT_THROW(decoder_rollout(Matrix::identity(2), {}, {}), ContractViolation);
}

TEST(SentenceContribution, SharesSumToOne) {
  for (auto task : {TaskKind::MT, TaskKind::STAnalog})
    for (auto v : kVariants) {
      const auto m = small_model(task, v);
      const auto data = small_data(task);
      for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const auto s = sentence_contribution(m, data, i);
        ASSERT_EQ(s.source_share.size(), data.examples[i].target.size());
        for (std::size_t t = 0; t < s.source_share.size(); ++t) {
          EXPECT_NEAR(s.source_share[t] + s.target_share[t], 1.0, 1e-9);
          EXPECT_GE(s.source_share[t], -1e-12);
          EXPECT_LE(s.source_share[t], 1.0 + 1e-12);
        }
      }
    }
}

TEST(SentenceContribution, ZeroCrossValuePathMeansNoSource) {
  auto m = small_model(TaskKind::MT, ResidualVariant::Standard);
  for (std::size_t l = 0; l < m.config.dec_layers; ++l)
    for (const char* part : {".weight", ".bias"})
      for (auto& x : m.params.get("dec.layers." + std::to_string(l) + ".cross_attn.v" + part).mutable_data()) x = 0.0;
  const auto data = small_data(TaskKind::MT);
  for (std::size_t i = 0; i < data.examples.size(); ++i)
    for (double s : sentence_contribution(m, data, i).source_share) EXPECT_NEAR(s, 0.0, 1e-12);
}

TEST(SentenceContribution, SingleLayerClosedForm) {
  // With one decoder layer the source share of token i is the cross-attention
  // key mass of row i; encoder mixing only redistributes it among sources.
  for (auto v : kVariants) {
    const auto m = small_model(TaskKind::MT, v, 1, 1, 8);
    const auto data = small_data(TaskKind::MT);
    for (std::size_t idx = 0; idx < data.examples.size(); ++idx) {
      const auto s = sentence_contribution(m, data, idx);
      for (const auto& block : trace_of(m, data, idx).blocks) {
        if (block.kind != BlockKind::DecoderCross) continue;
        const auto lc = layer_contribution_matrix(decompose_attention_block(m, block));
        for (std::size_t i = 0; i < block.queries; ++i) {
          double key_mass = 0.0;
          for (std::size_t j = 0; j < block.keys; ++j) key_mass += lc.matrix(i, j);
          EXPECT_NEAR(s.source_share[i], key_mass, 1e-12);
        }
      }
    }
  }
}

TEST(SourceContribution, CorpusMeanOfTwoSentences) {
  ContributionReport r;
  r.sentences.push_back({0, {}, {}, 0.6});
  r.sentences.push_back({1, {}, {}, 0.8});
  summarize_corpus(r);
  EXPECT_NEAR(r.corpus_mean, 0.7, 1e-15);
  EXPECT_NEAR(r.corpus_std, 0.1, 1e-15);
}

TEST(SourceContribution, CorpusReportMatchesSentences) {
  const auto m = small_model(TaskKind::STAnalog, ResidualVariant::WeRC);
  const auto data = small_data(TaskKind::STAnalog);
  const auto rep = source_contribution(m, data, 5);
  ASSERT_EQ(rep.sentences.size(), 5u);
  double sum = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto s = sentence_contribution(m, data, i);
    EXPECT_EQ(rep.sentences[i].mean, s.mean);
    sum += s.mean;
  }
  EXPECT_NEAR(rep.corpus_mean, sum / 5.0, 1e-15);
  EXPECT_GE(rep.corpus_mean, 0.0);
  EXPECT_LE(rep.corpus_mean, 1.0);
  EXPECT_LT(rep.max_reconstruction_error, 1e-6);
}

TEST(SourceContribution, EmptyExampleIsSkipped) {
  const auto m = small_model(TaskKind::MT, ResidualVariant::Standard);
  auto data = small_data(TaskKind::MT, 3);
  data.examples[1].source_tokens.clear();
  const auto rep = source_contribution(m, data);
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_EQ(rep.sentences.size(), 2u);
}
