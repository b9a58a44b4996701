#pragma once

#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "cre/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes at its boundary
// (DimensionError naming the offending shapes) and records a backward rule
// on the tape when any input requires a gradient. No implicit broadcasting;
// the few broadcasting forms (add_bias) are separate ops.

namespace cre {

/// [m x k] * [k x n] -> [m x n]
template <typename Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b);

/// Elementwise (Hadamard) product of equal-shape tensors.
template <typename Real>
Tensor<Real> multiply(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& a, std::type_identity_t<Real> factor);

/// x[... x D] + bias[D], bias repeated over every leading index.
template <typename Real>
Tensor<Real> add_bias(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& bias);

/// Exact (erf) GELU.
template <typename Real>
Tensor<Real> gelu(Tape<Real>& tape, const Tensor<Real>& x);

template <typename Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x);

template <typename Real>
Tensor<Real> mean(Tape<Real>& tape, const Tensor<Real>& x);

template <typename Real>
Tensor<Real> transpose(Tape<Real>& tape, const Tensor<Real>& x);

template <typename Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& x, Shape shape);

/// Stacks 2-D tensors with equal column counts along rows.
template <typename Real>
Tensor<Real> concat_rows(Tape<Real>& tape, std::span<const Tensor<Real>> parts);

/// Joins 2-D tensors with equal row counts along columns.
template <typename Real>
Tensor<Real> concat_cols(Tape<Real>& tape, std::span<const Tensor<Real>> parts);

template <typename Real>
Tensor<Real> slice_rows(Tape<Real>& tape, const Tensor<Real>& x, std::size_t begin,
                        std::size_t end);

template <typename Real>
Tensor<Real> slice_cols(Tape<Real>& tape, const Tensor<Real>& x, std::size_t begin,
                        std::size_t end);

/// out[i] = x[index[i]]; repeated indices accumulate in backward.
template <typename Real>
Tensor<Real> gather_rows(Tape<Real>& tape, const Tensor<Real>& x,
                         std::span<const std::size_t> index);

/// Embedding lookup: rows of `table` selected by integer ids.
template <typename Real>
Tensor<Real> embedding(Tape<Real>& tape, const Tensor<Real>& table, std::span<const int> ids);

/// x[groups*n x D] -> [groups x D], the mean over each block of n rows.
template <typename Real>
Tensor<Real> mean_rows_grouped(Tape<Real>& tape, const Tensor<Real>& x, std::size_t groups);

/// Row-wise softmax over the last dimension of a 2-D tensor.
template <typename Real>
Tensor<Real> softmax(Tape<Real>& tape, const Tensor<Real>& x);

/// Mean over rows of -log softmax(logits)[target], max-subtracted.
template <typename Real>
Tensor<Real> softmax_cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits,
                                   std::span<const int> targets);

inline constexpr double kLayerNormEps = 1e-6;

template <typename Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias);

inline constexpr double kMinRowNorm = 1e-12;

template <typename Real>
Tensor<Real> l2_normalize(Tape<Real>& tape, const Tensor<Real>& x);

/// Square matrix with its diagonal overwritten by `value` (no gradient there).
template <typename Real>
Tensor<Real> fill_diagonal(Tape<Real>& tape, const Tensor<Real>& x,
                           std::type_identity_t<Real> value);

/// softmax(q k^T / sqrt(d)) v for one head, composed from primitive ops.
template <typename Real>
Tensor<Real> scaled_dot_product_attention(Tape<Real>& tape, const Tensor<Real>& q,
                                          const Tensor<Real>& k, const Tensor<Real>& v);

/// Fused multi-head self-attention over `batch` independent sequences.
/// qkv is [batch*n x 3E] laid out as [q | k | v]; head h owns columns
/// [h*E/heads, (h+1)*E/heads) of each block. Returns [batch*n x E].
template <typename Real>
Tensor<Real> multi_head_attention(Tape<Real>& tape, const Tensor<Real>& qkv, std::size_t batch,
                                  std::size_t heads);

/// x[n x k] W[k x m] + b[m], fused.
template <typename Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& weight,
                    const Tensor<Real>& bias);

}  // namespace cre
