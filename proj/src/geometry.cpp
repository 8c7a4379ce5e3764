#include "pvc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pvc {

void PointCloud::validate(std::size_t num_classes) const {
  if (positions.size() % 3 != 0) throw DimensionError("positions length is not a multiple of 3");
  const std::size_t n = size();
  if (n == 0) throw DomainError("point cloud is empty");
  if (features.size() != n * channels) {
    throw DimensionError("features hold " + std::to_string(features.size()) + " values, expected " +
                         std::to_string(n) + "x" + std::to_string(channels));
  }
  if (has_labels() && labels.size() != n) throw DimensionError("label count does not match point count");
  if (has_mask() && loss_mask.size() != n) throw DimensionError("mask length does not match point count");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!std::isfinite(positions[i])) throw DomainError("position of point " + std::to_string(i / 3) + " is not finite");
  }
  if (num_classes > 0) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) {
        throw IndexError("label " + std::to_string(labels[i]) + " of point " + std::to_string(i) +
                         " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
}

Bounds compute_bounds(std::span<const float> positions) {
  Bounds b;
  b.min.fill(std::numeric_limits<double>::infinity());
  b.max.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < positions.size(); i += 3) {
    for (int a = 0; a < 3; ++a) {
      b.min[a] = std::min(b.min[a], static_cast<double>(positions[i + a]));
      b.max[a] = std::max(b.max[a], static_cast<double>(positions[i + a]));
    }
  }
  return b;
}

std::pair<PointCloud, Bounds> normalize_cloud(const PointCloud& cloud) {
  if (cloud.size() == 0) throw DomainError("normalize_cloud on an empty cloud");
  const Bounds b = compute_bounds(cloud.positions);
  PointCloud out = cloud;
  for (std::size_t i = 0; i < out.positions.size(); i += 3) {
    for (int a = 0; a < 3; ++a) {
      const double span = b.max[a] > b.min[a] ? b.max[a] - b.min[a] : 1.0;
      out.positions[i + a] = static_cast<float>((cloud.positions[i + a] - b.min[a]) / span);
    }
  }
  return {std::move(out), b};
}

GridSpec GridSpec::fit(std::span<const float> positions, std::size_t resolution) {
  if (resolution < 1) throw ConfigError("grid resolution must be at least 1");
  const Bounds b = compute_bounds(positions);
  GridSpec s;
  s.resolution = resolution;
  for (int a = 0; a < 3; ++a) {
    const double span = b.max[a] > b.min[a] ? b.max[a] - b.min[a] : 1.0;
    s.mins[a] = b.min[a];
    s.lengths[a] = span / static_cast<double>(resolution);
  }
  return s;
}

std::array<std::uint32_t, 3> GridSpec::coords_of(const float* p) const {
  std::array<std::uint32_t, 3> c{};
  const double top = static_cast<double>(resolution - 1);
  for (int a = 0; a < 3; ++a) {
    const double u = std::floor((static_cast<double>(p[a]) - mins[a]) / lengths[a]);
    c[a] = static_cast<std::uint32_t>(std::clamp(u, 0.0, top));
  }
  return c;
}

std::array<std::uint32_t, 3> VoxelGrid::coords(std::size_t voxel) const {
  const std::size_t g = spec.resolution;
  const Index id = occupied[voxel];
  return {static_cast<std::uint32_t>(id / (g * g)), static_cast<std::uint32_t>((id / g) % g),
          static_cast<std::uint32_t>(id % g)};
}

VoxelGrid voxelize(std::span<const float> positions, std::size_t resolution) {
  if (resolution < 1) throw ConfigError("grid resolution must be at least 1");
  const std::size_t g = resolution;
  if (g * g * g > std::numeric_limits<Index>::max()) throw ConfigError("grid resolution too large");
  VoxelGrid grid;
  grid.spec = GridSpec::fit(positions, resolution);
  const std::size_t n = positions.size() / 3;
  grid.point_to_voxel.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = grid.spec.coords_of(positions.data() + 3 * i);
    grid.point_to_voxel[i] = static_cast<Index>((c[0] * g + c[1]) * g + c[2]);
  }

  // Counting sort by flat id keeps members in ascending point order.
  std::vector<Index> counts(g * g * g, 0);
  for (const Index id : grid.point_to_voxel) ++counts[id];
  std::vector<Index> slot_of_cell(g * g * g, 0);
  grid.member_offsets.push_back(0);
  for (std::size_t id = 0; id < counts.size(); ++id) {
    if (counts[id] == 0) continue;
    slot_of_cell[id] = static_cast<Index>(grid.occupied.size());
    grid.occupied.push_back(static_cast<Index>(id));
    grid.member_offsets.push_back(grid.member_offsets.back() + counts[id]);
  }
  grid.members.resize(n);
  grid.point_slot.resize(n);
  std::vector<Index> cursor(grid.member_offsets.begin(), grid.member_offsets.end() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Index slot = slot_of_cell[grid.point_to_voxel[i]];
    grid.point_slot[i] = slot;
    grid.members[cursor[slot]++] = static_cast<Index>(i);
  }

  grid.centers.resize(grid.occupied.size() * 3);
  for (std::size_t m = 0; m < grid.occupied.size(); ++m) {
    const auto c = grid.coords(m);
    for (int a = 0; a < 3; ++a) {
      grid.centers[m * 3 + a] = grid.spec.mins[a] + (static_cast<double>(c[a]) + 0.5) * grid.spec.lengths[a];
    }
  }
  return grid;
}

template <typename T>
Tensor<T> build_volume(const VoxelGrid& grid, const Tensor<T>& voxel_features) {
  if (voxel_features.rank() != 2 || voxel_features.dim(0) != grid.num_voxels()) {
    throw DimensionError("build_volume: " + shape_str(voxel_features.shape()) + " features for " +
                         std::to_string(grid.num_voxels()) + " non-empty voxels");
  }
  return rows_to_volume(voxel_features, grid.occupied, grid.spec.resolution);
}

template <typename T>
Tensor<T> devoxelize(const VoxelGrid& grid, const Tensor<T>& volume) {
  const std::size_t g = grid.spec.resolution;
  if (volume.rank() != 4 || volume.dim(1) != g || volume.dim(2) != g || volume.dim(3) != g) {
    throw DimensionError("devoxelize: volume " + shape_str(volume.shape()) + " does not match a " +
                         std::to_string(g) + "^3 grid");
  }
  return volume_to_rows(volume, grid.point_to_voxel);
}

template Tensor<float> build_volume<float>(const VoxelGrid&, const Tensor<float>&);
template Tensor<double> build_volume<double>(const VoxelGrid&, const Tensor<double>&);
template Tensor<float> devoxelize<float>(const VoxelGrid&, const Tensor<float>&);
template Tensor<double> devoxelize<double>(const VoxelGrid&, const Tensor<double>&);

}  // namespace pvc
