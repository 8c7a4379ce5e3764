#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvc/geometry.hpp"
#include "pvc/neighbors.hpp"
#include "pvc/tensor.hpp"

namespace pvc {

/// Everything a PVC layer needs that depends only on point positions: the
/// voxel grid at this layer's resolution, neighbors of each non-empty voxel
/// center, and the neighbor offsets P_k − P_c.
struct LayerGeometry {
  VoxelGrid grid;
  NeighborIndex neighbors;
  std::vector<double> offsets;  // (M·K)×3
};

/// Positions must already be normalized. Neighbors are skipped when
/// `with_neighbors` is false (the averaged-aggregation baseline).
LayerGeometry build_layer_geometry(std::span<const float> positions, std::size_t resolution,
                                   const NeighborConfig& neighbors, bool with_neighbors = true);

struct PvcLayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t grid = 4;
  NeighborConfig neighbors;
  bool local_aggregation = true;
  bool fsm = true;

  std::size_t fsm_hidden() const { return std::max<std::size_t>(out_channels / 4, 1); }
};

template <typename T>
struct PvcLayerParams {
  Tensor<T> attn_w;   // (3 + C_in)×C_in
  Tensor<T> attn_b;   // C_in
  Tensor<T> point_w;  // C_in×C_out
  Tensor<T> point_b;
  Tensor<T> voxel_w;  // C_in×C_out
  Tensor<T> voxel_b;
  Tensor<T> conv_w;   // C_out×C_out×3×3×3
  Tensor<T> conv_b;
  Tensor<T> fsm_fc;   // C_out×d
  Tensor<T> fsm_w1;   // d×C_out
  Tensor<T> fsm_w2;   // d×C_out

  /// Weights uniform in ±sqrt(6/fan_in), biases zero.
  static PvcLayerParams init(const PvcLayerSpec& spec, std::mt19937_64& rng);

  std::vector<std::pair<std::string, Tensor<T>*>> named(const std::string& prefix);
};

template <typename T>
struct FsmOutput {
  Tensor<T> fused;
  Tensor<T> gate_point;  // [C]
  Tensor<T> gate_voxel;  // [C]
};

template <typename T>
struct PvcLayerOutput {
  Tensor<T> features;  // N×C_out
  Tensor<T> point;     // point-branch output
  Tensor<T> voxel;     // devoxelized voxel-branch output
  Tensor<T> gate_point;
  Tensor<T> gate_voxel;
};

/// Σ_k relu(G([Δ_k, f_k])) ⊙ f_k for every non-empty voxel (M×C_in).
template <typename T>
Tensor<T> aggregate_local(const LayerGeometry& geo, const Tensor<T>& features, const PvcLayerParams<T>& params);

/// Mean of the member points' features for every non-empty voxel.
template <typename T>
Tensor<T> aggregate_average(const VoxelGrid& grid, const Tensor<T>& features);

/// Linear lift + ReLU, dense volume, 3³ conv + ReLU, back to the N points.
template <typename T>
Tensor<T> voxel_branch(const VoxelGrid& grid, const Tensor<T>& voxel_features, const PvcLayerParams<T>& params);

template <typename T>
Tensor<T> point_branch(const Tensor<T>& features, const PvcLayerParams<T>& params);

/// Feature selection: gates from the pooled sum of both branches, softmaxed
/// per channel against each other.
template <typename T>
FsmOutput<T> fsm_fuse(const Tensor<T>& point, const Tensor<T>& voxel, const PvcLayerParams<T>& params);

template <typename T>
PvcLayerOutput<T> pvc_forward(const LayerGeometry& geo, const Tensor<T>& features, const PvcLayerParams<T>& params,
                              const PvcLayerSpec& spec);

}  // namespace pvc
