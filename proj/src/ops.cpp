#include "srclab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace srclab::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
TensorNode<T>& node_of(const Tensor<T>& t) {
  return *t.node();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ContractViolation(message);
}

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && b.rank() == 2 && a.shape().back() == b.dim(0),
          "matmul shape mismatch: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  const auto k = b.dim(0);
  const auto n = b.dim(1);
  const auto m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;

  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);

  auto an = a.node();
  auto bn = b.node();
  return tape.record("matmul", std::move(out_shape), std::move(out), {a, b},
                     [an, bn, m, k, n](const TensorNode<T>& o) {
                       ConstMatMap<T> dc(o.grad.data(), m, n);
                       if (an->requires_grad)
                         MatMap<T>(an->grad.data(), m, k).noalias() +=
                             dc * ConstMatMap<T>(bn->value.data(), k, n).transpose();
                       if (bn->requires_grad)
                         MatMap<T>(bn->grad.data(), k, n).noalias() +=
                             ConstMatMap<T>(an->value.data(), m, k).transpose() * dc;
                     });
}

template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm shape mismatch: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  const auto batch = a.dim(0);
  const auto m = a.dim(1);
  const auto k = a.dim(2);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k,
          "bmm inner extent mismatch: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));

  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap<T> am(a.data().data() + i * m * k, m, k);
    MatMap<T> cm(out.data() + i * m * n, m, n);
    if (transpose_b)
      cm.noalias() = am * ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    else
      cm.noalias() = am * ConstMatMap<T>(b.data().data() + i * k * n, k, n);
  }

  auto an = a.node();
  auto bn = b.node();
  return tape.record("bmm", {batch, m, n}, std::move(out), {a, b},
                     [an, bn, batch, m, k, n, transpose_b](const TensorNode<T>& o) {
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMatMap<T> dc(o.grad.data() + i * m * n, m, n);
                         ConstMatMap<T> am(an->value.data() + i * m * k, m, k);
                         if (transpose_b) {
                           ConstMatMap<T> bm(bn->value.data() + i * n * k, n, k);
                           if (an->requires_grad) MatMap<T>(an->grad.data() + i * m * k, m, k).noalias() += dc * bm;
                           if (bn->requires_grad)
                             MatMap<T>(bn->grad.data() + i * n * k, n, k).noalias() += dc.transpose() * am;
                         } else {
                           ConstMatMap<T> bm(bn->value.data() + i * k * n, k, n);
                           if (an->requires_grad)
                             MatMap<T>(an->grad.data() + i * m * k, m, k).noalias() += dc * bm.transpose();
                           if (bn->requires_grad)
                             MatMap<T>(bn->grad.data() + i * k * n, k, n).noalias() += am.transpose() * dc;
                         }
                       }
                     });
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const bool scalar_b = b.size() == 1;
  require(scalar_b || is_suffix(a.shape(), b.shape()),
          "add broadcast mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  const auto period = b.size();
  const auto rows = a.size() / period;
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bv = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * period;
    for (std::size_t c = 0; c < period; ++c) row[c] += bv[c];
  }

  auto an = a.node();
  auto bn = b.node();
  return tape.record("add", a.shape(), std::move(out), {a, b}, [an, bn, period, rows](const TensorNode<T>& o) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    if (bn->requires_grad) {
      T* bg = bn->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = o.grad.data() + r * period;
        for (std::size_t c = 0; c < period; ++c) bg[c] += g[c];
      }
    }
  });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) + " ∘ " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return tape.record("mul", a.shape(), std::move(out), {a, b}, [an, bn](const TensorNode<T>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += o.grad[i] * bn->value[i];
      if (bn->requires_grad) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return tape.record("scale", a.shape(), std::move(out), {a}, [an, factor](const TensorNode<T>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += factor * o.grad[i];
  });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto xn = x.node();
  return tape.record("relu", x.shape(), std::move(out), {x}, [xn](const TensorNode<T>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  require(p >= 0.0 && p < 1.0, "dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  // Each 64-bit draw yields four 16-bit uniforms; p is resolved to 1/65536.
  const auto threshold = static_cast<std::uint32_t>(std::lround(p * 65536.0));
  std::vector<T> mask(x.size());
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i % 4 == 0) bits = rng();
    const auto u = static_cast<std::uint32_t>(bits & 0xFFFFu);
    bits >>= 16;
    mask[i] = u >= threshold ? keep_scale : T(0);
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return tape.record("dropout", x.shape(), std::move(out), {x},
                     [xn, mask = std::move(mask)](const TensorNode<T>& o) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * mask[i];
                     });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "softmax axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  const auto extent = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto outer = x.size() / (extent * inner);

  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * extent * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(xv[base + e * inner] - mx);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }

  auto xn = x.node();
  return tape.record("softmax", x.shape(), std::move(out), {x},
                     [xn, outer, inner, extent](const TensorNode<T>& o) {
                       for (std::size_t ob = 0; ob < outer; ++ob) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const auto base = ob * extent * inner + in;
                           T dot = 0;
                           for (std::size_t e = 0; e < extent; ++e)
                             dot += o.value[base + e * inner] * o.grad[base + e * inner];
                           for (std::size_t e = 0; e < extent; ++e) {
                             const auto idx = base + e * inner;
                             xn->grad[idx] += o.value[idx] * (o.grad[idx] - dot);
                           }
                         }
                       }
                     });
}

template <typename T>
Tensor<T> masked_softmax(Tape<T>& tape, const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  require(keep.size() == x.size(), "mask has " + std::to_string(keep.size()) + " flags for " + shape_str(x.shape()));
  const auto width = x.shape().back();
  const auto rows = x.size() / width;
  std::vector<T> out(x.size(), T(0));
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto base = r * width;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < width; ++c) {
      if (!keep[base + c]) continue;
      if (!std::isfinite(xv[base + c])) throw NumericError("masked_softmax: non-finite score in row " + std::to_string(r));
      mx = std::max(mx, xv[base + c]);
    }
    if (mx == -std::numeric_limits<T>::infinity())
      throw ContractViolation("masked_softmax row " + std::to_string(r) + " has no unmasked entry");
    T total = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (!keep[base + c]) continue;
      const T v = std::exp(xv[base + c] - mx);
      out[base + c] = v;
      total += v;
    }
    for (std::size_t c = 0; c < width; ++c) out[base + c] /= total;
  }

  auto xn = x.node();
  return tape.record("masked_softmax", x.shape(), std::move(out), {x}, [xn, rows, width](const TensorNode<T>& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto base = r * width;
      T dot = 0;
      for (std::size_t c = 0; c < width; ++c) dot += o.value[base + c] * o.grad[base + c];
      for (std::size_t c = 0; c < width; ++c)
        xn->grad[base + c] += o.value[base + c] * (o.grad[base + c] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, double eps, const Tensor<T>& gain, const Tensor<T>& bias) {
  const auto d = x.shape().back();
  require(d >= 2, "layer_norm needs a last extent >= 2, got " + shape_str(x.shape()));
  require(eps >= 0.0, "layer_norm eps must be non-negative");
  require(!gain.defined() || (gain.rank() == 1 && gain.dim(0) == d), "layer_norm gain must be [d]");
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == d), "layer_norm bias must be [d]");
  const auto rows = x.size() / d;

  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(d);
    const T denom = var + T(eps);
    if (!(denom > T(0))) throw NumericError("layer_norm of a constant vector with eps = 0");
    inv_std[r] = T(1) / std::sqrt(denom);
    for (std::size_t c = 0; c < d; ++c) xhat[r * d + c] = (row[c] - mean) * inv_std[r];
  }

  std::vector<T> out = xhat;
  if (gain.defined() || bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        auto& v = out[r * d + c];
        if (gain.defined()) v *= gain.data()[c];
        if (bias.defined()) v += bias.data()[c];
      }
  }

  auto xn = x.node();
  auto gn = gain.defined() ? gain.node() : nullptr;
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto backward = [xn, gn, bn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorNode<T>& o) {
    std::vector<T> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = o.grad.data() + r * d;
      const T* xh = xhat.data() + r * d;
      T mean_dxhat = 0;
      T mean_dxhat_xhat = 0;
      for (std::size_t c = 0; c < d; ++c) {
        dxhat[c] = gn ? dy[c] * gn->value[c] : dy[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xh[c];
        if (gn && gn->requires_grad) gn->grad[c] += dy[c] * xh[c];
        if (bn && bn->requires_grad) bn->grad[c] += dy[c];
      }
      mean_dxhat /= T(d);
      mean_dxhat_xhat /= T(d);
      if (xn->requires_grad)
        for (std::size_t c = 0; c < d; ++c)
          xn->grad[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
    }
  };
  if (gain.defined() && bias.defined())
    return tape.record("layer_norm", x.shape(), std::move(out), {x, gain, bias}, std::move(backward));
  if (gain.defined()) return tape.record("layer_norm", x.shape(), std::move(out), {x, gain}, std::move(backward));
  if (bias.defined()) return tape.record("layer_norm", x.shape(), std::move(out), {x, bias}, std::move(backward));
  return tape.record("layer_norm", x.shape(), std::move(out), {x}, std::move(backward));
}

template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids, Shape leading) {
  require(table.rank() == 2, "embedding table must be [V, d]");
  require(numel(leading) == ids.size(), "embedding leading shape " + shape_str(leading) + " does not hold " +
                                            std::to_string(ids.size()) + " ids");
  const auto vocab = table.dim(0);
  const auto d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw ContractViolation("embedding id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(vocab) +
                              ")");
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape shape = std::move(leading);
  shape.push_back(d);
  auto tn = table.node();
  return tape.record("embedding", std::move(shape), std::move(out), {table},
                     [tn, d, ids = std::vector<int>(ids.begin(), ids.end())](const TensorNode<T>& o) {
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         T* row = tn->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                         for (std::size_t c = 0; c < d; ++c) row[c] += o.grad[i * d + c];
                       }
                     });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return tape.record("reshape", std::move(shape), std::move(out), {x}, [xn](const TensorNode<T>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> swap_axes_1_2(Tape<T>& tape, const Tensor<T>& x) {
  require(x.rank() == 4, "swap_axes_1_2 needs rank 4, got " + shape_str(x.shape()));
  const auto a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k)
        std::copy_n(xv.data() + ((i * b + j) * c + k) * d, d, out.data() + ((i * c + k) * b + j) * d);
  auto xn = x.node();
  return tape.record("swap_axes_1_2", {a, c, b, d}, std::move(out), {x}, [xn, a, b, c, d](const TensorNode<T>& o) {
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < c; ++k) {
          const T* src = o.grad.data() + ((i * c + k) * b + j) * d;
          T* dst = xn->grad.data() + ((i * b + j) * c + k) * d;
          for (std::size_t e = 0; e < d; ++e) dst[e] += src[e];
        }
  });
}

template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads >= 1 && x.dim(2) % heads == 0,
          "split_heads needs [B, L, H*dh], got " + shape_str(x.shape()));
  const auto batch = x.dim(0), len = x.dim(1), dh = x.dim(2) / heads;
  std::vector<T> out(x.size());
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv + ((b * len + l) * heads + h) * dh, dh, out.data() + ((b * heads + h) * len + l) * dh);
  auto xn = x.node();
  return tape.record("split_heads", {batch * heads, len, dh}, std::move(out), {x},
                     [xn, batch, len, heads, dh](const TensorNode<T>& o) {
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t l = 0; l < len; ++l)
                           for (std::size_t h = 0; h < heads; ++h) {
                             const T* src = o.grad.data() + ((b * heads + h) * len + l) * dh;
                             T* dst = xn->grad.data() + ((b * len + l) * heads + h) * dh;
                             for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
                           }
                     });
}

template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch) {
  require(x.rank() == 3 && batch >= 1 && x.dim(0) % batch == 0,
          "merge_heads needs [B*H, L, dh], got " + shape_str(x.shape()));
  const auto heads = x.dim(0) / batch, len = x.dim(1), dh = x.dim(2);
  std::vector<T> out(x.size());
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xv + ((b * heads + h) * len + l) * dh, dh, out.data() + ((b * len + l) * heads + h) * dh);
  auto xn = x.node();
  return tape.record("merge_heads", {batch, len, heads * dh}, std::move(out), {x},
                     [xn, batch, len, heads, dh](const TensorNode<T>& o) {
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t h = 0; h < heads; ++h)
                           for (std::size_t l = 0; l < len; ++l) {
                             const T* src = o.grad.data() + ((b * len + l) * heads + h) * dh;
                             T* dst = xn->grad.data() + ((b * heads + h) * len + l) * dh;
                             for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
                           }
                     });
}

template <typename T>
Tensor<T> mean_pool_time(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> lengths, std::size_t stride) {
  require(x.rank() == 3, "mean_pool_time needs [B, T, f], got " + shape_str(x.shape()));
  require(stride >= 1, "pool stride must be >= 1");
  const auto batch = x.dim(0), frames = x.dim(1), feat = x.dim(2);
  require(lengths.size() == batch, "mean_pool_time needs one length per example");
  std::size_t max_len = 0;
  for (auto len : lengths) {
    require(len >= 1 && len <= frames, "frame length " + std::to_string(len) + " outside [1, " +
                                           std::to_string(frames) + "]");
    max_len = std::max(max_len, len);
  }
  const auto out_len = (max_len + stride - 1) / stride;
  std::vector<T> out(batch * out_len * feat, T(0));
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t w = 0; w * stride < lengths[b]; ++w) {
      const auto lo = w * stride;
      const auto hi = std::min(lengths[b], lo + stride);
      const T inv = T(1) / T(hi - lo);
      T* dst = out.data() + (b * out_len + w) * feat;
      for (auto t = lo; t < hi; ++t)
        for (std::size_t c = 0; c < feat; ++c) dst[c] += xv[(b * frames + t) * feat + c] * inv;
    }
  auto xn = x.node();
  return tape.record("mean_pool_time", {batch, out_len, feat}, std::move(out), {x},
                     [xn, lens = std::vector<std::size_t>(lengths.begin(), lengths.end()), stride, frames, feat,
                      out_len](const TensorNode<T>& o) {
                       for (std::size_t b = 0; b < lens.size(); ++b)
                         for (std::size_t w = 0; w * stride < lens[b]; ++w) {
                           const auto lo = w * stride;
                           const auto hi = std::min(lens[b], lo + stride);
                           const T inv = T(1) / T(hi - lo);
                           const T* src = o.grad.data() + (b * out_len + w) * feat;
                           for (auto t = lo; t < hi; ++t)
                             for (std::size_t c = 0; c < feat; ++c) xn->grad[(b * frames + t) * feat + c] += src[c] * inv;
                         }
                     });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  auto xn = x.node();
  return tape.record("sum", {1}, {total}, {x}, [xn](const TensorNode<T>& o) {
    for (auto& g : xn->grad) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> label_smoothed_ce(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets, double eps,
                            int pad_id) {
  require(eps >= 0.0 && eps < 1.0, "label smoothing must lie in [0, 1)");
  const auto vocab = logits.shape().back();
  const auto rows = logits.size() / vocab;
  require(targets.size() == rows, "label_smoothed_ce: " + std::to_string(targets.size()) + " targets for " +
                                      shape_str(logits.shape()));
  std::size_t counted = 0;
  for (auto t : targets) {
    if (t == pad_id) continue;
    require(t >= 0 && static_cast<std::size_t>(t) < vocab, "target id " + std::to_string(t) + " outside vocabulary");
    ++counted;
  }
  if (counted == 0) throw ContractViolation("label_smoothed_ce: every target is padding");

  const auto lv = logits.data();
  std::vector<T> probs(logits.size(), T(0));
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const T* z = lv.data() + r * vocab;
    T mx = *std::max_element(z, z + vocab);
    T se = 0;
    T zsum = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      se += std::exp(z[c] - mx);
      zsum += z[c];
    }
    const T lse = mx + std::log(se);
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] = std::exp(z[c] - lse);
    const T nll_target = lse - z[static_cast<std::size_t>(targets[r])];
    const T nll_uniform = lse - zsum / T(vocab);
    total += double((T(1) - T(eps)) * nll_target + T(eps) * nll_uniform);
  }
  const T loss = T(total / double(counted));

  auto ln = logits.node();
  return tape.record("label_smoothed_ce", {1}, {loss}, {logits},
                     [ln, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()), vocab,
                      counted, eps, pad_id](const TensorNode<T>& o) {
                       const T up = o.grad[0] / T(counted);
                       const T uniform = T(eps) / T(vocab);
                       for (std::size_t r = 0; r < tg.size(); ++r) {
                         if (tg[r] == pad_id) continue;
                         T* g = ln->grad.data() + r * vocab;
                         const T* p = probs.data() + r * vocab;
                         for (std::size_t c = 0; c < vocab; ++c) g[c] += up * (p[c] - uniform);
                         g[static_cast<std::size_t>(tg[r])] -= up * (T(1) - T(eps));
                       }
                     });
}

#define SRCLAB_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> bmm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, bool);                              \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                 \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, bool, std::mt19937_64&);                  \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> masked_softmax(Tape<T>&, const Tensor<T>&, std::span<const std::uint8_t>);            \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, double, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> embedding(Tape<T>&, const Tensor<T>&, std::span<const int>, Shape);                   \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                           \
  template Tensor<T> swap_axes_1_2(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> split_heads(Tape<T>&, const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> merge_heads(Tape<T>&, const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> mean_pool_time(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>, std::size_t); \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> label_smoothed_ce(Tape<T>&, const Tensor<T>&, std::span<const int>, double, int);

SRCLAB_INSTANTIATE_OPS(float)
SRCLAB_INSTANTIATE_OPS(double)

}  // namespace srclab::ops
