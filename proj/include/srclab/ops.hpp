#pragma once

// Differentiable primitives. Every op takes the tape it records onto as its
// first argument. Broadcasting is limited to a trailing-suffix operand
// (e.g. a bias row added to every leading position) and scalars.

#include <cstdint>
#include <random>
#include <span>

#include "srclab/tensor.hpp"

namespace srclab::ops {

/// a[..., k] · b[k, n] -> [..., n]. Leading extents of `a` are flattened.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Batched product a[B, m, k] · b[B, k, n]; with transpose_b, b is [B, n, k].
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);

/// a + b where b has a's shape, a trailing suffix of it, or a single element.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

/// Inverted dropout. Identity (same node) when !training or p == 0.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, bool training,
                  std::mt19937_64& rng);

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis);

/// Softmax over the last axis where keep[i] == 0 forces probability 0.
/// `keep` has one flag per element of x; every row needs one kept entry.
template <typename T>
Tensor<T> masked_softmax(Tape<T>& tape, const Tensor<T>& x, std::span<const std::uint8_t> keep);

/// Normalizes over the last axis: (x - mean) / sqrt(var + eps), then the
/// optional affine gain/bias (pass undefined tensors for the parameter-free
/// form). eps == 0 on a constant row raises NumericError.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, double eps, const Tensor<T>& gain = {},
                     const Tensor<T>& bias = {});

/// Row gather table[ids[i]] -> [leading..., d] where numel(leading) == ids.size().
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids, Shape leading);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// [a, b, c, d] -> [a, c, b, d].
template <typename T>
Tensor<T> swap_axes_1_2(Tape<T>& tape, const Tensor<T>& x);

/// [B, L, H*dh] -> [B*H, L, dh]: one attention problem per (example, head).
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);

/// Inverse of split_heads: [B*H, L, dh] -> [B, L, H*dh].
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch);

/// Non-overlapping mean pool along time of x[B, T, f]. Example b has
/// lengths[b] valid frames; window w covers frames [w*stride, (w+1)*stride)
/// clipped to the valid length. Output [B, ceil(max_len/stride), f], zero
/// where an example has no frames left.
template <typename T>
Tensor<T> mean_pool_time(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> lengths,
                         std::size_t stride);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Per row: (1 - eps) * NLL(target) + eps * mean_c NLL(c), averaged over rows
/// whose target != pad_id. logits [..., V], one target per leading position.
template <typename T>
Tensor<T> label_smoothed_ce(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                            double eps, int pad_id);

}  // namespace srclab::ops
