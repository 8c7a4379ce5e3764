#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "pvc/ops.hpp"

namespace pvc {

struct NeighborConfig {
  std::size_t k = 32;
  std::size_t dilation = 1;

  void validate() const;
};

/// Exactly k point indices per query, nearest first.
struct NeighborIndex {
  std::size_t k = 0;
  std::vector<Index> indices;  // queries × k

  std::size_t num_queries() const { return k == 0 ? 0 : indices.size() / k; }
  std::span<const Index> row(std::size_t q) const { return std::span<const Index>(indices).subspan(q * k, k); }
  bool operator==(const NeighborIndex&) const = default;
};

/// How many ranked candidates a dilated query needs and the stride used to
/// pick from them once the point count is known. When N < K·n the stride
/// shrinks to max(1, ⌊N/K⌋); when N < K the last neighbor is repeated.
struct DilationPlan {
  std::size_t candidates;
  std::size_t stride;
};
DilationPlan plan_dilation(std::size_t num_points, const NeighborConfig& cfg);

/// Exact k nearest by Euclidean distance, ties broken by ascending index.
/// With k > N every point is returned and the farthest one repeats.
NeighborIndex knn_bruteforce(std::span<const double> queries, std::span<const float> points, std::size_t k);

/// Ranks 0, n, 2n, …, (K−1)·n of the brute-force K·n list.
NeighborIndex knn_dilated(std::span<const double> queries, std::span<const float> points, const NeighborConfig& cfg);

/// Uniform-grid spatial hash over a fixed point set. Queries search rings of
/// cells outward until no unvisited cell can hold a closer candidate, so
/// results equal knn_dilated exactly.
class PointGrid {
 public:
  explicit PointGrid(std::span<const float> points);

  NeighborIndex query(std::span<const double> queries, const NeighborConfig& cfg) const;
  std::size_t num_points() const { return num_points_; }
  std::array<std::size_t, 3> dims() const { return dims_; }

 private:
  void ranked(const double* q, std::size_t candidates, std::vector<std::pair<double, Index>>& out) const;

  std::span<const float> points_;
  std::size_t num_points_ = 0;
  std::array<double, 3> origin_{};
  double cell_ = 1.0;
  std::array<std::size_t, 3> dims_{1, 1, 1};
  std::vector<Index> cell_offsets_;  // CSR over cells
  std::vector<Index> cell_points_;
};

NeighborIndex knn_grid(std::span<const double> queries, std::span<const float> points, const NeighborConfig& cfg);

}  // namespace pvc
