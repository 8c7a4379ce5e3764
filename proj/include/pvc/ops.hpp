#pragma once

// Differentiable tensor operations. Each op computes its forward value and,
// when a GradTape is active and an input requires gradients, records the
// exact reverse-mode adjoint.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pvc/tensor.hpp"

namespace pvc {

using Index = std::uint32_t;

enum class Elementwise { add, sub, mul, relu, exp, log };
enum class Reduction { mean, max, sum };

// Binary ops accept equal shapes, a single-element operand, or an operand
// whose shape is a suffix of the other's (e.g. a per-channel row [C] against
// [N×C]).
template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::mul, a, b); }
template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return elementwise(Elementwise::relu, a); }
template <typename T>
Tensor<T> exp(const Tensor<T>& a) { return elementwise(Elementwise::exp, a); }
template <typename T>
Tensor<T> log(const Tensor<T>& a) { return elementwise(Elementwise::log, a); }

/// a[M×K] · b[K×P]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// x[N×I] · w[I×O] + bias[O]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Elementwise two-way softmax: (e^a/(e^a+e^b), e^b/(e^a+e^b)).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> softmax_pairwise(const Tensor<T>& a, const Tensor<T>& b);

/// Softmax along the last axis of a rank-2 tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a);

/// Reduces `axis` away. Max routes its gradient to the lowest-index argmax.
template <typename T>
Tensor<T> reduce(Reduction kind, const Tensor<T>& a, std::size_t axis);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const Index> idx);

/// target + rows of src added at idx (repeated indices accumulate).
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& target, std::span<const Index> idx, const Tensor<T>& src);

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// volume[C_in×G×G×G] ⋆ kernels[C_out×C_in×k×k×k] + bias[C_out], zero padded,
/// stride 1, same-size output.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& volume, const Tensor<T>& kernels, const Tensor<T>& bias);

/// Places row m of rows[M×C] into cell cells[m] of a zero C×G×G×G volume.
template <typename T>
Tensor<T> rows_to_volume(const Tensor<T>& rows, std::span<const Index> cells, std::size_t grid);

/// Row n of the result is the channel vector of volume cell cells[n].
template <typename T>
Tensor<T> volume_to_rows(const Tensor<T>& volume, std::span<const Index> cells);

/// Mean of feature rows per segment; segment s spans members[offsets[s]..offsets[s+1]).
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& features, std::span<const Index> offsets, std::span<const Index> members);

/// Per-column standardization over rows: (x − mean) / sqrt(var + eps), with
/// population variance. No learned scale or shift.
template <typename T>
Tensor<T> standardize_columns(const Tensor<T>& x, double eps = 1e-5);

/// Attention-weighted neighbor sum. For query m and neighbor slot k (row
/// r = m·K + k), with x_r = [offsets[r], features[nbr[r]]]:
///   out[m] = Σ_k relu(x_r · w + bias) ⊙ features[nbr[r]]
/// offsets[M·K×3] is treated as a constant.
template <typename T>
Tensor<T> attentive_aggregate(const Tensor<T>& features, const Tensor<T>& offsets, std::span<const Index> nbr,
                              std::size_t k, const Tensor<T>& w, const Tensor<T>& bias);

/// Mean over unmasked rows of −log probs[n, labels[n]]. An empty mask keeps
/// every row; probabilities are floored at the smallest normal value.
template <typename T>
Tensor<T> masked_nll(const Tensor<T>& probs, std::span<const Index> labels, std::span<const std::uint8_t> mask);

}  // namespace pvc
