#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "reattn/numerics/tensor.hpp"

// Differentiable primitives. Every op takes the tape of the current forward
// pass first; when the tape is recording and an input requires a gradient,
// the op registers its adjoint rule. Binary elementwise ops broadcast with
// numpy semantics (right-aligned extents, 1 stretches).
namespace reattn::num {

template <typename T> Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& x, T value);
template <typename T> Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> log(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(Tape<T>& tape, const Tensor<T>& x);
// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

template <typename T> Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> sum_axis(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T>
Tensor<T> mean_axis(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdim = false);

// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T> Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Swap the last two axes.
template <typename T> Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& order);
template <typename T> Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t length);
template <typename T> Tensor<T> broadcast_to(Tape<T>& tape, const Tensor<T>& x, Shape shape);

// softmax(x / temperature) along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, T temperature = T(1));

// (x - mean) / sqrt(var + eps) with population statistics over `axes`.
template <typename T>
struct Standardized {
  Tensor<T> value;
  std::vector<T> mean;  // one entry per group (product of the kept extents)
  std::vector<T> var;
};
template <typename T>
Standardized<T> standardize(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes,
                            T epsilon);

// Applies precomputed statistics (evaluation-mode batch norm). `mean`/`var`
// are indexed like the groups of standardize over the same axes.
template <typename T>
Tensor<T> standardize_with(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes,
                           std::span<const T> mean, std::span<const T> var, T epsilon);

// x * mask / (1 - rate), mask entries in {0, 1}.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& mask, T rate);

// Rows of `table` [V, D] at `indices` -> [n, D].
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> indices);

// Mean over rows of -log softmax(logits)[label]; logits [N, C].
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels);

}  // namespace reattn::num
