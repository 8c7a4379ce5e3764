#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "pvc/geometry.hpp"
#include "pvc/tensor.hpp"

namespace testing_helpers {

inline pvc::Tensor<double> leaf(pvc::Shape shape, std::vector<double> values) {
  pvc::Tensor<double> t(std::move(shape), std::move(values));
  return t.set_requires_grad(true);
}

inline pvc::Tensor<double> random_leaf(pvc::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = pvc::shape_numel(shape);
  return leaf(std::move(shape), oracle::random_vector(n, rng, lo, hi));
}

// Σ out ⊙ u, so the gradient w.r.t. an input is Jᵀu.
inline pvc::Tensor<double> weighted(const pvc::Tensor<double>& out, const pvc::Tensor<double>& u) {
  return pvc::reduce(pvc::Reduction::sum, pvc::reshape(pvc::mul(out, u), {out.numel()}), 0);
}

inline std::vector<float> unit_cube_positions(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> p(3 * n);
  for (auto& v : p) v = u(rng);
  return p;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

// Row i of the result is row perm[i] of `rows`.
template <typename V>
std::vector<V> permute_rows(const std::vector<V>& rows, const std::vector<std::size_t>& perm, std::size_t width) {
  std::vector<V> out(rows.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < width; ++c) out[i * width + c] = rows[perm[i] * width + c];
  return out;
}

inline pvc::PointCloud permute_cloud(const pvc::PointCloud& c, const std::vector<std::size_t>& perm) {
  pvc::PointCloud out;
  out.channels = c.channels;
  out.positions = permute_rows(c.positions, perm, 3);
  out.features = permute_rows(c.features, perm, c.channels);
  if (c.has_labels()) out.labels = permute_rows(c.labels, perm, 1);
  if (c.has_mask()) out.loss_mask = permute_rows(c.loss_mask, perm, 1);
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace testing_helpers
