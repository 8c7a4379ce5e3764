#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Every kernel in pvc::kernels is OpenMP-parallel and accumulates each output
// element in a fixed order, so results are bit-identical for any thread
// count. pvc::kernels::serial holds the plain single-threaded reference
// versions; they are kept for tests and for the kernel benchmark.

#include <cstddef>
#include <span>

namespace pvc::kernels {

/// c[m×n] (+)= a[m×k] · b[k×n], all row-major.
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

/// out[cols×rows] = in[rows×cols]ᵀ
template <typename T>
void transpose(std::span<const T> in, std::span<T> out, std::size_t rows, std::size_t cols);

struct Conv3dShape {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t grid;    // G, cubic volume G×G×G
  std::size_t kernel;  // odd edge length k
};

/// Same-padded stride-1 3-D cross-correlation. Input cells whose channels are
/// all zero are skipped, which makes the cost proportional to the number of
/// occupied cells while producing the dense result.
template <typename T>
void conv3d_forward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output);

/// Accumulates gradients of conv3d_forward into grad_input / grad_weights /
/// grad_bias (any may be empty to skip). Output cells with an all-zero
/// upstream gradient are skipped.
template <typename T>
void conv3d_backward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_weights,
                     std::span<T> grad_bias);

namespace serial {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

/// Dense direct-summation convolution, no zero skipping.
template <typename T>
void conv3d_forward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output);

template <typename T>
void conv3d_backward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_weights,
                     std::span<T> grad_bias);

}  // namespace serial

/// Sets the OpenMP thread count used by all kernels (no-op without OpenMP).
void set_num_threads(int threads);
int num_threads();

}  // namespace pvc::kernels
