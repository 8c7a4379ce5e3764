#include "pvc/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pvc/tensor.hpp"

namespace pvc::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
void check_conv_shape(const Conv3dShape& s, std::size_t input, std::size_t weights, std::size_t bias,
                      std::size_t output) {
  if (s.kernel % 2 == 0) throw ConfigError("conv3d kernel size must be odd, got " + std::to_string(s.kernel));
  const std::size_t cells = s.grid * s.grid * s.grid;
  const std::size_t k3 = s.kernel * s.kernel * s.kernel;
  if (input != s.in_channels * cells || weights != s.out_channels * s.in_channels * k3 ||
      (bias != 0 && bias != s.out_channels) || (output != 0 && output != s.out_channels * cells)) {
    throw DimensionError("conv3d buffer sizes do not match shape");
  }
}

struct Offset {
  int dx, dy, dz;
};

std::vector<Offset> kernel_offsets(std::size_t k) {
  const int r = static_cast<int>(k - 1) / 2;
  std::vector<Offset> offs;
  offs.reserve(k * k * k);
  for (int a = -r; a <= r; ++a)
    for (int b = -r; b <= r; ++b)
      for (int c = -r; c <= r; ++c) offs.push_back({a, b, c});
  return offs;
}

// Cells where at least one channel is non-zero, ascending, plus a compact
// cell-major copy of their values (rows × channels).
template <typename T>
struct ActiveCells {
  std::vector<std::uint32_t> cells;
  std::vector<std::int32_t> row_of_cell;
  std::vector<T> values;
};

template <typename T>
ActiveCells<T> find_active(std::span<const T> volume, std::size_t channels, std::size_t cells) {
  ActiveCells<T> act;
  act.row_of_cell.assign(cells, -1);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (std::size_t c = 0; c < channels; ++c) {
      if (volume[c * cells + cell] != T(0)) {
        act.row_of_cell[cell] = static_cast<std::int32_t>(act.cells.size());
        act.cells.push_back(static_cast<std::uint32_t>(cell));
        break;
      }
    }
  }
  act.values.resize(act.cells.size() * channels);
  for (std::size_t r = 0; r < act.cells.size(); ++r)
    for (std::size_t c = 0; c < channels; ++c) act.values[r * channels + c] = volume[c * cells + act.cells[r]];
  return act;
}

inline bool shifted(std::uint32_t cell, const Offset& o, std::size_t g, int sign, std::size_t& out) {
  const int gi = static_cast<int>(g);
  const int x = static_cast<int>(cell / (g * g)) + sign * o.dx;
  const int y = static_cast<int>((cell / g) % g) + sign * o.dy;
  const int z = static_cast<int>(cell % g) + sign * o.dz;
  if (x < 0 || y < 0 || z < 0 || x >= gi || y >= gi || z >= gi) return false;
  out = (static_cast<std::size_t>(x) * g + static_cast<std::size_t>(y)) * g + static_cast<std::size_t>(z);
  return true;
}

}  // namespace

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  if (a.size() != m * k || b.size() != k * n || c.size() != m * n) {
    throw DimensionError("matmul buffer sizes do not match " + std::to_string(m) + "x" + std::to_string(k) +
                         "x" + std::to_string(n));
  }
  const T* __restrict pa = a.data();
  const T* __restrict pb = b.data();
  T* __restrict pc = c.data();
  if (!accumulate) std::fill(c.begin(), c.end(), T(0));
  const std::int64_t row_blocks = static_cast<std::int64_t>((m + 3) / 4);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t blk = 0; blk < row_blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (rows == 4) {
      T* c0 = pc + i0 * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      const T* a0 = pa + i0 * k;
      const T* a1 = a0 + k;
      const T* a2 = a1 + k;
      const T* a3 = a2 + k;
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = pb + p * n;
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        T* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T v = pa[i * k + p];
          const T* brow = pb + p * n;
#pragma omp simd
          for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
        }
      }
    }
  }
}

template <typename T>
void transpose(std::span<const T> in, std::span<T> out, std::size_t rows, std::size_t cols) {
  if (in.size() != rows * cols || out.size() != rows * cols) throw DimensionError("transpose size mismatch");
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile)
    for (std::size_t j0 = 0; j0 < cols; j0 += tile)
      for (std::size_t i = i0; i < std::min(rows, i0 + tile); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + tile); ++j) out[j * rows + i] = in[i * cols + j];
}

template <typename T>
void conv3d_forward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output) {
  check_conv_shape<T>(s, input.size(), weights.size(), bias.size(), output.size());
  const std::size_t g = s.grid, cells = g * g * g, cin = s.in_channels, cout = s.out_channels;
  const auto offs = kernel_offsets(s.kernel);
  const std::size_t k3 = offs.size();
  const auto act = find_active(input, cin, cells);

  const std::int64_t co_count = static_cast<std::int64_t>(cout);
#pragma omp parallel for schedule(static) if (act.cells.size() * k3 * cin * cout > kParallelWork)
  for (std::int64_t co_i = 0; co_i < co_count; ++co_i) {
    const std::size_t co = static_cast<std::size_t>(co_i);
    // Weights of this output channel laid out [offset][ci].
    std::vector<T> w(k3 * cin);
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t o = 0; o < k3; ++o) w[o * cin + ci] = weights[(co * cin + ci) * k3 + o];
    T* out = output.data() + co * cells;
    std::fill(out, out + cells, bias.empty() ? T(0) : bias[co]);
    for (std::size_t r = 0; r < act.cells.size(); ++r) {
      const T* x = act.values.data() + r * cin;
      for (std::size_t o = 0; o < k3; ++o) {
        std::size_t q;
        // out[q] reads in[q + d], so in[p] feeds out[p - d].
        if (!shifted(act.cells[r], offs[o], g, -1, q)) continue;
        const T* wo = w.data() + o * cin;
        T acc = T(0);
        for (std::size_t ci = 0; ci < cin; ++ci) acc += wo[ci] * x[ci];
        out[q] += acc;
      }
    }
  }
}

template <typename T>
void conv3d_backward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_weights,
                     std::span<T> grad_bias) {
  check_conv_shape<T>(s, input.size(), weights.size(), 0, grad_output.size());
  const std::size_t g = s.grid, cells = g * g * g, cin = s.in_channels, cout = s.out_channels;
  const auto offs = kernel_offsets(s.kernel);
  const std::size_t k3 = offs.size();

  if (!grad_bias.empty()) {
    for (std::size_t co = 0; co < cout; ++co) {
      T acc = T(0);
      for (std::size_t q = 0; q < cells; ++q) acc += grad_output[co * cells + q];
      grad_bias[co] += acc;
    }
  }
  const auto gact = find_active(grad_output, cout, cells);
  const std::size_t work = gact.cells.size() * k3 * cin * cout;

  if (!grad_input.empty()) {
    const std::int64_t ci_count = static_cast<std::int64_t>(cin);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (std::int64_t ci_i = 0; ci_i < ci_count; ++ci_i) {
      const std::size_t ci = static_cast<std::size_t>(ci_i);
      std::vector<T> w(k3 * cout);  // [offset][co]
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t o = 0; o < k3; ++o) w[o * cout + co] = weights[(co * cin + ci) * k3 + o];
      T* gin = grad_input.data() + ci * cells;
      for (std::size_t r = 0; r < gact.cells.size(); ++r) {
        const T* go = gact.values.data() + r * cout;
        for (std::size_t o = 0; o < k3; ++o) {
          std::size_t p;
          if (!shifted(gact.cells[r], offs[o], g, +1, p)) continue;
          const T* wo = w.data() + o * cout;
          T acc = T(0);
          for (std::size_t co = 0; co < cout; ++co) acc += wo[co] * go[co];
          gin[p] += acc;
        }
      }
    }
  }

  if (!grad_weights.empty()) {
    const auto iact = find_active(input, cin, cells);
    const std::int64_t co_count = static_cast<std::int64_t>(cout);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (std::int64_t co_i = 0; co_i < co_count; ++co_i) {
      const std::size_t co = static_cast<std::size_t>(co_i);
      std::vector<T> acc(k3 * cin, T(0));  // [offset][ci]
      for (std::size_t r = 0; r < gact.cells.size(); ++r) {
        const T go = gact.values[r * cout + co];
        if (go == T(0)) continue;
        for (std::size_t o = 0; o < k3; ++o) {
          std::size_t p;
          if (!shifted(gact.cells[r], offs[o], g, +1, p)) continue;
          const std::int32_t row = iact.row_of_cell[p];
          if (row < 0) continue;
          const T* x = iact.values.data() + static_cast<std::size_t>(row) * cin;
          T* a = acc.data() + o * cin;
          for (std::size_t ci = 0; ci < cin; ++ci) a[ci] += go * x[ci];
        }
      }
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t o = 0; o < k3; ++o) grad_weights[(co * cin + ci) * k3 + o] += acc[o * cin + ci];
    }
  }
}

namespace serial {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  if (a.size() != m * k || b.size() != k * n || c.size() != m * n) throw DimensionError("matmul size mismatch");
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void conv3d_forward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                    std::span<const T> bias, std::span<T> output) {
  check_conv_shape<T>(s, input.size(), weights.size(), bias.size(), output.size());
  const std::size_t g = s.grid, cells = g * g * g;
  const auto offs = kernel_offsets(s.kernel);
  const std::size_t k3 = offs.size();
  for (std::size_t co = 0; co < s.out_channels; ++co) {
    for (std::uint32_t q = 0; q < cells; ++q) {
      T acc = bias.empty() ? T(0) : bias[co];
      for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
        for (std::size_t o = 0; o < k3; ++o) {
          std::size_t p;
          if (!shifted(q, offs[o], g, +1, p)) continue;
          acc += weights[(co * s.in_channels + ci) * k3 + o] * input[ci * cells + p];
        }
      }
      output[co * cells + q] = acc;
    }
  }
}

template <typename T>
void conv3d_backward(const Conv3dShape& s, std::span<const T> input, std::span<const T> weights,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_weights,
                     std::span<T> grad_bias) {
  check_conv_shape<T>(s, input.size(), weights.size(), 0, grad_output.size());
  const std::size_t g = s.grid, cells = g * g * g;
  const auto offs = kernel_offsets(s.kernel);
  const std::size_t k3 = offs.size();
  for (std::size_t co = 0; co < s.out_channels; ++co) {
    for (std::uint32_t q = 0; q < cells; ++q) {
      const T go = grad_output[co * cells + q];
      if (!grad_bias.empty()) grad_bias[co] += go;
      for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
        for (std::size_t o = 0; o < k3; ++o) {
          std::size_t p;
          if (!shifted(q, offs[o], g, +1, p)) continue;
          const std::size_t widx = (co * s.in_channels + ci) * k3 + o;
          if (!grad_input.empty()) grad_input[ci * cells + p] += weights[widx] * go;
          if (!grad_weights.empty()) grad_weights[widx] += input[ci * cells + p] * go;
        }
      }
    }
  }
}

}  // namespace serial

void set_num_threads(int threads) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, threads));
#else
  (void)threads;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define PVC_INSTANTIATE_KERNELS(T)                                                                            \
  template void matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,     \
                          std::size_t, bool);                                                                 \
  template void transpose<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t);                     \
  template void conv3d_forward<T>(const Conv3dShape&, std::span<const T>, std::span<const T>,                 \
                                  std::span<const T>, std::span<T>);                                          \
  template void conv3d_backward<T>(const Conv3dShape&, std::span<const T>, std::span<const T>,                \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>);             \
  template void serial::matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,          \
                                  std::size_t, std::size_t, bool);                                            \
  template void serial::conv3d_forward<T>(const Conv3dShape&, std::span<const T>, std::span<const T>,         \
                                          std::span<const T>, std::span<T>);                                  \
  template void serial::conv3d_backward<T>(const Conv3dShape&, std::span<const T>, std::span<const T>,        \
                                           std::span<const T>, std::span<T>, std::span<T>, std::span<T>);

PVC_INSTANTIATE_KERNELS(float)
PVC_INSTANTIATE_KERNELS(double)

}  // namespace pvc::kernels
