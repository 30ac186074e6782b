#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "restune/rng.hpp"
#include "restune/tensor.hpp"

namespace restune {

// Differentiable tensor operations. Each op records itself on the active tape
// (if any) when an input requires grad. Inputs are never modified.

// [..., m, k] @ [..., k, n]. Batch dims must match exactly, or `b` may be a
// plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);

// x [..., d_in] * W [d_in, d_out] (+ b [d_out]).
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order);
Tensor transpose_last2(const Tensor& x);
// Removes `axis`, keeping slice `index`.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Repeats size-1 dims to `shape`; rank must match.
Tensor expand(const Tensor& x, const Shape& shape);

// Exact form x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Inverted dropout. Identity (same tensor) when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng);

// Mean over the batch of label-smoothed cross entropy. logits [B, K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels, double smoothing = 0.0);

}  // namespace restune
