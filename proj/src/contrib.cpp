#include "srclab/contrib.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>

#include "srclab/ops.hpp"

namespace srclab {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double Matrix::row_sum(std::size_t r) const {
  double s = 0.0;
  for (std::size_t c = 0; c < cols; ++c) s += (*this)(r, c);
  return s;
}

Matrix multiply(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ContractViolation("matrix product dimension mismatch");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double v = a(i, k);
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += v * b(k, j);
    }
  return out;
}

void require_row_stochastic(const Matrix& m, double tol, const char* what) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c)
      if (m(r, c) < -tol) throw ContractViolation(std::string(what) + ": negative entry");
    if (std::abs(m.row_sum(r) - 1.0) > tol)
      throw ContractViolation(std::string(what) + ": row " + std::to_string(r) + " sums to " +
                              std::to_string(m.row_sum(r)));
  }
}

// ---------------------------------------------------------------------------
// Decomposition

std::vector<double> BlockDecomposition::attention_part(std::size_t i) const {
  std::vector<double> out(width, 0.0);
  for (std::size_t j = 0; j < keys; ++j) {
    const double* t = term(i, j);
    for (std::size_t c = 0; c < width; ++c) out[c] += t[c];
  }
  return out;
}

double BlockDecomposition::reconstruction_error() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < queries; ++i) {
    const auto attn = attention_part(i);
    for (std::size_t c = 0; c < width; ++c) {
      const double rebuilt = attn[c] + bias[i * width + c] + residual[i * width + c];
      worst = std::max(worst, std::abs(output[i * width + c] - rebuilt));
    }
  }
  return worst;
}

namespace {

std::string block_prefix(BlockKind kind, std::size_t layer) {
  switch (kind) {
    case BlockKind::EncoderSelf: return "enc.layers." + std::to_string(layer) + ".self_attn";
    case BlockKind::DecoderSelf: return "dec.layers." + std::to_string(layer) + ".self_attn";
    case BlockKind::DecoderCross: return "dec.layers." + std::to_string(layer) + ".cross_attn";
  }
  return {};
}

}  // namespace

BlockDecomposition decompose_attention_block(const Model<double>& model, const AttentionTrace<double>& trace,
                                             double tolerance) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  const auto d = cfg.d_model;
  const auto heads = cfg.heads;
  const auto dh = cfg.head_dim();
  const auto nq = trace.queries;
  const auto nk = trace.keys;
  const auto prefix = block_prefix(trace.kind, trace.layer);

  const auto wv = p.get(prefix + ".v.weight").data();
  const auto bv = p.get(prefix + ".v.bias").data();
  const auto wo = p.get(prefix + ".o.weight").data();
  const auto bo = p.get(prefix + ".o.bias").data();

  // Linear part of the value-side input (LN frozen at its scale) and the
  // constant it leaves behind.
  std::vector<double> z(nk * d);
  std::vector<double> offset(d, 0.0);
  if (trace.kind == BlockKind::DecoderCross) {
    z = trace.value_input;
  } else {
    const auto ln = prefix + "_ln";
    const auto gain = p.get(ln + ".gain").data();
    const auto beta = p.get(ln + ".bias").data();
    for (std::size_t j = 0; j < nk; ++j) {
      const double* x = trace.value_input.data() + j * d;
      double mean = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += x[c];
      mean /= double(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= double(d);
      const double inv = 1.0 / std::sqrt(var + cfg.ln_eps);
      for (std::size_t c = 0; c < d; ++c) z[j * d + c] = gain[c] * (x[c] - mean) * inv;
    }
    std::copy(beta.begin(), beta.end(), offset.begin());
  }

  // u[j][h] = (z_j W_V^h) W_O^h ; per-head constant c[h] = (offset W_V^h + b_V^h) W_O^h
  auto project = [&](const double* in, std::size_t h, double* out, bool with_bias) {
    std::vector<double> v(dh, 0.0);
    for (std::size_t e = 0; e < dh; ++e) {
      const auto col = h * dh + e;
      double acc = with_bias ? bv[col] : 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += in[c] * wv[c * d + col];
      v[e] = acc;
    }
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t e = 0; e < dh; ++e) acc += v[e] * wo[(h * dh + e) * d + c];
      out[c] = acc;
    }
  };
  std::vector<double> u(nk * heads * d);
  for (std::size_t j = 0; j < nk; ++j)
    for (std::size_t h = 0; h < heads; ++h) project(z.data() + j * d, h, u.data() + (j * heads + h) * d, false);
  std::vector<double> head_const(heads * d);
  for (std::size_t h = 0; h < heads; ++h) project(offset.data(), h, head_const.data() + h * d, true);

  BlockDecomposition out;
  out.kind = trace.kind;
  out.layer = trace.layer;
  out.queries = nq;
  out.keys = nk;
  out.width = d;
  out.token_terms.assign(nq * nk * d, 0.0);
  out.bias.assign(nq * d, 0.0);
  out.output = trace.output;

  for (std::size_t i = 0; i < nq; ++i) {
    double* b = out.bias.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) b[c] = bo[c];
    for (std::size_t h = 0; h < heads; ++h) {
      double mass = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        const double a = trace.weights[(h * nq + i) * nk + j];
        if (a == 0.0) continue;
        mass += a;
        double* t = out.token_terms.data() + (i * nk + j) * d;
        const double* uj = u.data() + (j * heads + h) * d;
        for (std::size_t c = 0; c < d; ++c) t[c] += a * uj[c];
      }
      for (std::size_t c = 0; c < d; ++c) b[c] += mass * head_const[h * d + c];
    }
  }

  // Fold the residual combiner into the decomposition.
  const bool is_cross = trace.kind == BlockKind::DecoderCross;
  const auto variant = is_cross ? cfg.residual : ResidualVariant::Standard;
  const double lambda = cfg.effective_lambda();
  switch (variant) {
    case ResidualVariant::Standard: out.residual = trace.residual; break;
    case ResidualVariant::WeRCNoNorm:
      for (auto& v : out.token_terms) v *= lambda;
      for (auto& v : out.bias) v *= lambda;
      out.residual = trace.residual;
      for (auto& v : out.residual) v *= 1.0 - lambda;
      break;
    case ResidualVariant::WeRC:
    case ResidualVariant::WeRCNoWeights: {
      out.residual = trace.res_term;
      for (std::size_t i = 0; i < nq; ++i) {
        const double* a = trace.attn_out.data() + i * d;
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += a[c];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (a[c] - mean) * (a[c] - mean);
        var /= double(d);
        const double factor = lambda / std::sqrt(var + cfg.ln_eps);
        auto center_scale = [&](double* v) {
          double m = 0.0;
          for (std::size_t c = 0; c < d; ++c) m += v[c];
          m /= double(d);
          for (std::size_t c = 0; c < d; ++c) v[c] = factor * (v[c] - m);
        };
        for (std::size_t j = 0; j < nk; ++j) center_scale(out.token_terms.data() + (i * nk + j) * d);
        center_scale(out.bias.data() + i * d);
      }
      break;
    }
  }

  const double err = out.reconstruction_error();
  if (!(err <= tolerance))
    throw NumericError("attention block decomposition misses the forward pass by " + std::to_string(err) + " (" +
                       prefix + ")");
  return out;
}

// ---------------------------------------------------------------------------
// Contribution matrices

LayerContrib layer_contribution_matrix(const BlockDecomposition& block) {
  const auto nq = block.queries;
  const auto nk = block.keys;
  const auto d = block.width;
  LayerContrib out{Matrix(nq, nk + 1), 0};

  auto l1 = [d](const double* v) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::abs(v[c]);
    return s;
  };
  auto l1_minus = [d](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::abs(a[c] - b[c]);
    return s;
  };

  std::vector<double> y(d);
  for (std::size_t i = 0; i < nq; ++i) {
    const auto attn = block.attention_part(i);
    const double* res = block.residual.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) y[c] = attn[c] + block.bias[i * d + c] + res[c];
    const double y_norm = l1(y.data());

    double total = 0.0;
    for (std::size_t j = 0; j < nk; ++j) {
      const double r = std::max(0.0, y_norm - l1_minus(y.data(), block.term(i, j)));
      out.matrix(i, j) = r;
      total += r;
    }
    const double r_res = std::max(0.0, y_norm - l1_minus(y.data(), res));
    out.matrix(i, nk) = r_res;
    total += r_res;

    if (total > 0.0) {
      for (std::size_t j = 0; j <= nk; ++j) out.matrix(i, j) /= total;
    } else {
      ++out.fallback_rows;
      for (std::size_t j = 0; j <= nk; ++j) out.matrix(i, j) = 1.0 / double(nk + 1);
    }
  }
  return out;
}

Matrix self_mixing(const LayerContrib& contrib) {
  const auto n = contrib.matrix.rows;
  if (contrib.matrix.cols != n + 1) throw ContractViolation("self_mixing needs a square block plus residual column");
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m(i, j) = contrib.matrix(i, j);
    m(i, i) += contrib.matrix(i, n);
  }
  return m;
}

Matrix encoder_rollout(const std::vector<Matrix>& layers) {
  if (layers.empty()) throw ContractViolation("encoder_rollout needs at least one layer");
  Matrix acc = Matrix::identity(layers.front().cols);
  for (const auto& layer : layers) {
    require_row_stochastic(layer, 1e-9, "encoder layer contribution");
    acc = multiply(layer, acc);
  }
  return acc;
}

Matrix decoder_rollout(const Matrix& encoder, const std::vector<Matrix>& self_layers,
                       const std::vector<LayerContrib>& cross_layers) {
  if (self_layers.size() != cross_layers.size() || self_layers.empty())
    throw ContractViolation("decoder_rollout needs matching, non-empty self and cross layers");
  require_row_stochastic(encoder, 1e-9, "encoder rollout");
  const auto n_tgt = self_layers.front().rows;
  const auto n_enc = encoder.rows;
  const auto n_src = encoder.cols;

  Matrix z(n_tgt, n_src + n_tgt);
  for (std::size_t i = 0; i < n_tgt; ++i) z(i, n_src + i) = 1.0;

  for (std::size_t l = 0; l < self_layers.size(); ++l) {
    const auto& self = self_layers[l];
    const auto& cross = cross_layers[l].matrix;
    if (self.rows != n_tgt || self.cols != n_tgt) throw ContractViolation("decoder self layer shape mismatch");
    if (cross.rows != n_tgt || cross.cols != n_enc + 1) throw ContractViolation("decoder cross layer shape mismatch");
    require_row_stochastic(self, 1e-9, "decoder self-attention contribution");
    require_row_stochastic(cross, 1e-9, "decoder cross-attention contribution");

    const Matrix mixed = multiply(self, z);
    Matrix next(n_tgt, n_src + n_tgt);
    for (std::size_t i = 0; i < n_tgt; ++i) {
      for (std::size_t j = 0; j < n_enc; ++j) {
        const double w = cross(i, j);
        if (w == 0.0) continue;
        for (std::size_t s = 0; s < n_src; ++s) next(i, s) += w * encoder(j, s);
      }
      const double keep = cross(i, n_enc);
      for (std::size_t c = 0; c < n_src + n_tgt; ++c) next(i, c) += keep * mixed(i, c);
    }
    z = std::move(next);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Pipeline

SentenceContribution sentence_contribution(const Model<double>& model, const Dataset& data, std::size_t index,
                                           std::size_t* fallback_rows, double* reconstruction_error) {
  const auto batch = collate(data, {index});
  Tape<double> tape(false);
  ForwardTrace<double> trace;
  RunContext<double> ctx{false, nullptr, &trace};
  const auto encoded = encoder_forward(tape, model, batch.source, ctx);
  decoder_forward(tape, model, encoded, batch.target.input, 1, batch.target.max_length, ctx);

  std::vector<Matrix> enc_layers;
  std::vector<Matrix> dec_self;
  std::vector<LayerContrib> dec_cross;
  for (const auto& block : trace.blocks) {
    const auto decomposition = decompose_attention_block(model, block);
    if (reconstruction_error)
      *reconstruction_error = std::max(*reconstruction_error, decomposition.reconstruction_error());
    auto contrib = layer_contribution_matrix(decomposition);
    if (fallback_rows) *fallback_rows += contrib.fallback_rows;
    switch (block.kind) {
      case BlockKind::EncoderSelf: enc_layers.push_back(self_mixing(contrib)); break;
      case BlockKind::DecoderSelf: dec_self.push_back(self_mixing(contrib)); break;
      case BlockKind::DecoderCross: dec_cross.push_back(std::move(contrib)); break;
    }
  }

  const auto rolled = decoder_rollout(encoder_rollout(enc_layers), dec_self, dec_cross);
  const auto n_src = enc_layers.front().cols;
  SentenceContribution out;
  out.example = index;
  const auto n_tgt = batch.target.lengths.front();
  double total = 0.0;
  for (std::size_t i = 0; i < n_tgt; ++i) {
    double src = 0.0;
    double tgt = 0.0;
    for (std::size_t c = 0; c < rolled.cols; ++c) (c < n_src ? src : tgt) += rolled(i, c);
    out.source_share.push_back(src);
    out.target_share.push_back(tgt);
    total += src;
  }
  out.mean = total / double(n_tgt);
  return out;
}

ContributionReport source_contribution(const Model<double>& model, const Dataset& data, std::size_t limit) {
  if (data.examples.empty()) throw ContractViolation("source_contribution needs a non-empty dataset");
  const auto n = limit == 0 ? data.examples.size() : std::min(limit, data.examples.size());
  ContributionReport report;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = data.examples[i];
    if (ex.source_length() == 0 || ex.target.empty()) {
      std::cerr << "warning: skipping empty example " << ex.id << " in contribution analysis\n";
      ++report.skipped;
      continue;
    }
    report.sentences.push_back(
        sentence_contribution(model, data, i, &report.fallback_rows, &report.max_reconstruction_error));
  }
  if (report.sentences.empty()) throw ContractViolation("no analyzable sentences");
  summarize_corpus(report);
  return report;
}

void summarize_corpus(ContributionReport& report) {
  if (report.sentences.empty()) throw ContractViolation("no sentences to summarize");
  double sum = 0.0;
  for (const auto& s : report.sentences) sum += s.mean;
  report.corpus_mean = sum / double(report.sentences.size());
  double sq = 0.0;
  for (const auto& s : report.sentences) sq += (s.mean - report.corpus_mean) * (s.mean - report.corpus_mean);
  report.corpus_std = std::sqrt(sq / double(report.sentences.size()));
}

}  // namespace srclab
