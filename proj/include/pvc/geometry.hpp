#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pvc/ops.hpp"
#include "pvc/tensor.hpp"

namespace pvc {

/// N points with 3-D positions, a per-point feature matrix, and optional
/// labels and loss mask (0 marks a context point excluded from the loss).
struct PointCloud {
  std::size_t channels = 0;
  std::vector<float> positions;  // N×3
  std::vector<float> features;   // N×channels
  std::vector<std::uint32_t> labels;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return positions.size() / 3; }
  bool has_labels() const { return !labels.empty(); }
  bool has_mask() const { return !loss_mask.empty(); }

  /// Throws on inconsistent lengths, non-finite positions, or labels outside
  /// [0, num_classes) when num_classes > 0.
  void validate(std::size_t num_classes = 0) const;
};

struct Bounds {
  std::array<double, 3> min{};
  std::array<double, 3> max{};
};

Bounds compute_bounds(std::span<const float> positions);

/// Maps each axis affinely onto [0, 1]. A degenerate axis (max == min) uses
/// span 1, so its points land at 0. Returns the original bounds.
std::pair<PointCloud, Bounds> normalize_cloud(const PointCloud& cloud);

struct GridSpec {
  std::size_t resolution = 1;
  std::array<double, 3> mins{};
  std::array<double, 3> lengths{};  // (max − min) / G per axis; 1/G when degenerate

  static GridSpec fit(std::span<const float> positions, std::size_t resolution);
  std::array<std::uint32_t, 3> coords_of(const float* p) const;
};

/// Occupancy of a G³ grid. Non-empty voxels are numbered 0..M−1 in ascending
/// flat id (u·G² + v·G + w); members of each voxel are stored CSR-style in
/// ascending point order.
struct VoxelGrid {
  GridSpec spec;
  std::vector<Index> point_to_voxel;  // N flat ids
  std::vector<Index> point_slot;      // N indices into occupied
  std::vector<Index> occupied;        // M flat ids, ascending
  std::vector<Index> member_offsets;  // M + 1
  std::vector<Index> members;         // N
  std::vector<double> centers;        // M×3

  std::size_t num_points() const { return point_to_voxel.size(); }
  std::size_t num_voxels() const { return occupied.size(); }
  std::span<const Index> members_of(std::size_t voxel) const {
    return std::span<const Index>(members).subspan(member_offsets[voxel],
                                                   member_offsets[voxel + 1] - member_offsets[voxel]);
  }
  std::array<std::uint32_t, 3> coords(std::size_t voxel) const;
};

VoxelGrid voxelize(std::span<const float> positions, std::size_t resolution);

/// Dense C×G×G×G volume with voxel_features[m] at occupied[m], zeros elsewhere.
template <typename T>
Tensor<T> build_volume(const VoxelGrid& grid, const Tensor<T>& voxel_features);

/// Every point takes the feature of the cell it falls into.
template <typename T>
Tensor<T> devoxelize(const VoxelGrid& grid, const Tensor<T>& volume);

}  // namespace pvc
