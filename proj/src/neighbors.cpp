#include "pvc/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <string>
#include <utility>

namespace pvc {

namespace {

using Candidate = std::pair<double, Index>;  // (squared distance, point index)

inline double dist2(const double* q, const float* p) {
  const double dx = q[0] - static_cast<double>(p[0]);
  const double dy = q[1] - static_cast<double>(p[1]);
  const double dz = q[2] - static_cast<double>(p[2]);
  return dx * dx + dy * dy + dz * dz;
}

// Writes the selected K indices of one query given its ranked candidates.
void select_dilated(const std::vector<Candidate>& ranked, std::size_t k, std::size_t stride, Index* out) {
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t rank = std::min(s * stride, ranked.size() - 1);
    out[s] = ranked[rank].second;
  }
}

void check_inputs(std::span<const double> queries, std::span<const float> points) {
  if (queries.size() % 3 != 0 || points.size() % 3 != 0) throw DimensionError("knn inputs must be N×3");
  if (points.empty()) throw DomainError("knn over an empty point set");
}

void ranked_bruteforce(const double* q, std::span<const float> points, std::size_t candidates,
                       std::vector<Candidate>& all) {
  const std::size_t n = points.size() / 3;
  all.resize(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = {dist2(q, points.data() + 3 * i), static_cast<Index>(i)};
  const std::size_t c = std::min(candidates, n);
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c), all.end());
  all.resize(c);
}

}  // namespace

void NeighborConfig::validate() const {
  if (k < 1) throw ConfigError("neighbor count K must be at least 1");
  if (dilation < 1) throw ConfigError("dilation step must be at least 1");
}

DilationPlan plan_dilation(std::size_t num_points, const NeighborConfig& cfg) {
  cfg.validate();
  std::size_t stride = cfg.dilation;
  if (num_points < cfg.k * cfg.dilation) stride = std::max<std::size_t>(1, num_points / cfg.k);
  return {std::min(cfg.k * stride, num_points), stride};
}

NeighborIndex knn_bruteforce(std::span<const double> queries, std::span<const float> points, std::size_t k) {
  return knn_dilated(queries, points, NeighborConfig{k, 1});
}

NeighborIndex knn_dilated(std::span<const double> queries, std::span<const float> points, const NeighborConfig& cfg) {
  check_inputs(queries, points);
  const DilationPlan plan = plan_dilation(points.size() / 3, cfg);
  const std::size_t nq = queries.size() / 3;
  NeighborIndex out;
  out.k = cfg.k;
  out.indices.resize(nq * cfg.k);
  const std::int64_t count = static_cast<std::int64_t>(nq);
#pragma omp parallel
  {
    std::vector<Candidate> ranked;
#pragma omp for schedule(static)
    for (std::int64_t qi = 0; qi < count; ++qi) {
      const std::size_t q = static_cast<std::size_t>(qi);
      ranked_bruteforce(queries.data() + 3 * q, points, plan.candidates, ranked);
      select_dilated(ranked, cfg.k, plan.stride, out.indices.data() + q * cfg.k);
    }
  }
  return out;
}

PointGrid::PointGrid(std::span<const float> points) : points_(points), num_points_(points.size() / 3) {
  if (points.size() % 3 != 0) throw DimensionError("PointGrid points must be N×3");
  if (num_points_ == 0) throw DomainError("PointGrid over an empty point set");
  std::array<double, 3> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < points.size(); i += 3) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], static_cast<double>(points[i + a]));
      hi[a] = std::max(hi[a], static_cast<double>(points[i + a]));
    }
  }
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  origin_ = lo;
  cell_ = extent > 0 ? extent / std::cbrt(static_cast<double>(num_points_)) : 1.0;
  for (int a = 0; a < 3; ++a) {
    dims_[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((hi[a] - lo[a]) / cell_)));
  }
  const std::size_t ncell = dims_[0] * dims_[1] * dims_[2];
  std::vector<Index> cell_of(num_points_);
  std::vector<Index> counts(ncell + 1, 0);
  for (std::size_t i = 0; i < num_points_; ++i) {
    std::size_t c[3];
    for (int a = 0; a < 3; ++a) {
      const double u = std::floor((static_cast<double>(points[3 * i + a]) - origin_[a]) / cell_);
      c[a] = static_cast<std::size_t>(std::clamp(u, 0.0, static_cast<double>(dims_[a] - 1)));
    }
    cell_of[i] = static_cast<Index>((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
    ++counts[cell_of[i] + 1];
  }
  for (std::size_t c = 0; c < ncell; ++c) counts[c + 1] += counts[c];
  cell_offsets_ = counts;
  cell_points_.resize(num_points_);
  for (std::size_t i = 0; i < num_points_; ++i) cell_points_[counts[cell_of[i]]++] = static_cast<Index>(i);
}

void PointGrid::ranked(const double* q, std::size_t candidates, std::vector<Candidate>& out) const {
  std::array<long, 3> qc{};
  std::array<long, 3> dim{};
  for (int a = 0; a < 3; ++a) {
    dim[a] = static_cast<long>(dims_[a]);
    const double u = std::floor((q[a] - origin_[a]) / cell_);
    qc[a] = static_cast<long>(std::clamp(u, 0.0, static_cast<double>(dim[a] - 1)));
  }
  // Max-heap on (distance², index): top is the current worst kept candidate.
  std::priority_queue<Candidate> heap;
  auto visit = [&](long x, long y, long z) {
    const std::size_t c = (static_cast<std::size_t>(x) * dims_[1] + static_cast<std::size_t>(y)) * dims_[2] +
                          static_cast<std::size_t>(z);
    for (Index i = cell_offsets_[c]; i < cell_offsets_[c + 1]; ++i) {
      const Index p = cell_points_[i];
      const Candidate cand{dist2(q, points_.data() + 3 * static_cast<std::size_t>(p)), p};
      if (heap.size() < candidates) {
        heap.push(cand);
      } else if (cand < heap.top()) {
        heap.pop();
        heap.push(cand);
      }
    }
  };
  // Rounding in the cell assignment can move a point across a cell face by a
  // few ulps; shrink the stopping bound to stay exact.
  const double slack = 1e-9 * cell_ + 1e-12;
  const long max_ring = std::max({dim[0], dim[1], dim[2]});
  for (long r = 0; r <= max_ring; ++r) {
    const long x0 = std::max(0L, qc[0] - r), x1 = std::min(dim[0] - 1, qc[0] + r);
    const long y0 = std::max(0L, qc[1] - r), y1 = std::min(dim[1] - 1, qc[1] + r);
    const long z0 = std::max(0L, qc[2] - r), z1 = std::min(dim[2] - 1, qc[2] + r);
    for (long x = x0; x <= x1; ++x) {
      const bool xs = std::abs(x - qc[0]) == r;
      for (long y = y0; y <= y1; ++y) {
        const bool shell = xs || std::abs(y - qc[1]) == r;
        if (shell) {
          for (long z = z0; z <= z1; ++z) visit(x, y, z);
        } else {
          if (qc[2] - r >= 0) visit(x, y, qc[2] - r);
          if (r > 0 && qc[2] + r < dim[2]) visit(x, y, qc[2] + r);
        }
      }
    }
    // Distance from q to the nearest face of the visited box that still has
    // unvisited cells beyond it.
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (qc[a] - r > 0) bound = std::min(bound, q[a] - (origin_[a] + static_cast<double>(qc[a] - r) * cell_));
      if (qc[a] + r < dim[a] - 1) bound = std::min(bound, origin_[a] + static_cast<double>(qc[a] + r + 1) * cell_ - q[a]);
    }
    if (std::isinf(bound)) break;
    if (heap.size() == candidates) {
      const double b = std::max(0.0, bound - slack);
      if (heap.top().first < b * b) break;
    }
  }
  out.resize(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    out[i] = heap.top();
    heap.pop();
  }
}

NeighborIndex PointGrid::query(std::span<const double> queries, const NeighborConfig& cfg) const {
  if (queries.size() % 3 != 0) throw DimensionError("knn queries must be Q×3");
  const DilationPlan plan = plan_dilation(num_points_, cfg);
  const std::size_t nq = queries.size() / 3;
  NeighborIndex out;
  out.k = cfg.k;
  out.indices.resize(nq * cfg.k);
  const std::int64_t count = static_cast<std::int64_t>(nq);
#pragma omp parallel
  {
    std::vector<Candidate> ranked_list;
#pragma omp for schedule(dynamic, 64)
    for (std::int64_t qi = 0; qi < count; ++qi) {
      const std::size_t q = static_cast<std::size_t>(qi);
      ranked(queries.data() + 3 * q, plan.candidates, ranked_list);
      select_dilated(ranked_list, cfg.k, plan.stride, out.indices.data() + q * cfg.k);
    }
  }
  return out;
}

NeighborIndex knn_grid(std::span<const double> queries, std::span<const float> points, const NeighborConfig& cfg) {
  check_inputs(queries, points);
  return PointGrid(points).query(queries, cfg);
}

}  // namespace pvc
