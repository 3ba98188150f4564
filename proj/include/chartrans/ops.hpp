#pragma once

// Differentiable operations. Everything the three translation models need and
// nothing more. Row-major layout throughout; "rows" of an N-d tensor are its
// slices along the last dimension.

#include <cstdint>
#include <span>

#include "chartrans/tensor.hpp"

namespace chartrans {

enum class Activation { kRelu, kSigmoid, kTanh };

// [m x k] * [k x n]. Throws ShapeError naming both shapes on mismatch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Batched product of [n x m x k] with [n x k x p], or with [n x p x k] when
// transpose_b is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// x[..., in] * w[in x out] + bias[out]. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Elementwise sum. b's shape must equal a trailing suffix of a's shape and is
// broadcast over the leading dimensions.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// scale * x + shift
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

// Masking for attention scores of shape [batch*heads x q_len x k_len].
// key_pad holds batch*k_len flags (nonzero = masked) or is empty. Masked
// positions behave as -inf before normalization; a row with every position
// masked produces zeros.
struct AttentionMask {
  std::span<const std::uint8_t> key_pad;
  std::size_t heads = 1;
  bool causal = false;
};

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const AttentionMask& mask);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-6);

// x: [L x E] or [B x L x E]; filters: [width x E x F]. Zero padding of
// floor((width-1)/2) on the left and ceil((width-1)/2) on the right keeps the
// output length equal to L. Each batch row is padded independently.
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& filters, std::size_t width);

// Non-overlapping max over windows of `stride` positions. x: [L x C] or
// [B x L x C]; L must be divisible by stride. The gradient goes to the first
// maximal element of each window.
template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t stride);

// Gathers rows of table [V x E]. Output shape is `lead` + [E]; ids.size()
// must equal the element count of `lead`.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                           const Shape& lead);

template <typename T>
Tensor<T> concat_lastdim(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// [A x B x C x D] -> [A x C x B x D]
template <typename T>
Tensor<T> swap_middle_axes(const Tensor<T>& x);

// Multiplies each last-dim row i by the constant factors[i].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors);

// Inverted dropout. rate == 0 returns x unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Summed cross-entropy of logits[..., V] against one target id per row. Rows
// whose target equals `ignore_id` contribute nothing. With smoothing e the
// target distribution is (1-e) on the gold id plus e spread uniformly over
// every id except `ignore_id`.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        double smoothing, std::int32_t ignore_id);

}  // namespace chartrans
