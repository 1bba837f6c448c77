#pragma once

// Differentiable operations over Tensor. Shapes must match exactly except
// where a row vector is broadcast across the leading (row) dimension.

#include <cstdint>
#include <span>
#include <vector>

#include "bitmar/rng.hpp"
#include "bitmar/tensor.hpp"

namespace bitmar {

/// Offsets of packed variable-length sequences: segment i spans rows
/// [offsets[i], offsets[i+1]).
using Segments = std::vector<std::size_t>;

std::size_t segment_count(const Segments& segments);
Segments segments_from_lengths(std::span<const std::size_t> lengths);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x · wᵀ for x [n×in] and w [out×in].
Tensor linear(const Tensor& x, const Tensor& w);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);
/// Inverted dropout. Identity when !training or p == 0.
Tensor dropout(const Tensor& a, float p, Rng& rng, bool training);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_squares(const Tensor& a);

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets);
/// Σ_i weights[i] · nll_i. Rows with weight 0 are ignored.
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                              std::span<const float> weights);

/// Gathers rows of `table` [vocab×d].
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

/// Per-segment row mean, [segments×d]. Empty segments yield zero rows.
Tensor segment_mean(const Tensor& x, const Segments& segments);
/// Repeats row i of x for every row of segment i.
Tensor segment_expand(const Tensor& x, const Segments& segments);

Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f);

}  // namespace bitmar
