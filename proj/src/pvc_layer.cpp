#include "pvc/pvc_layer.hpp"

#include <cmath>

#include "pvc/ops.hpp"

namespace pvc {

LayerGeometry build_layer_geometry(std::span<const float> positions, std::size_t resolution,
                                   const NeighborConfig& neighbors, bool with_neighbors) {
  LayerGeometry geo;
  geo.grid = voxelize(positions, resolution);
  if (!with_neighbors) return geo;
  geo.neighbors = knn_grid(geo.grid.centers, positions, neighbors);
  const std::size_t m = geo.grid.num_voxels(), k = neighbors.k;
  geo.offsets.resize(m * k * 3);
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t p = geo.neighbors.indices[q * k + s];
      for (int a = 0; a < 3; ++a) {
        geo.offsets[(q * k + s) * 3 + a] = static_cast<double>(positions[p * 3 + a]) - geo.grid.centers[q * 3 + a];
      }
    }
  }
  return geo;
}

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t.set_requires_grad(true);
}

template <typename T>
Tensor<T> zeros(std::size_t n) {
  Tensor<T> t(Shape{n});
  return t.set_requires_grad(true);
}

}  // namespace

template <typename T>
PvcLayerParams<T> PvcLayerParams<T>::init(const PvcLayerSpec& spec, std::mt19937_64& rng) {
  if (spec.in_channels == 0 || spec.out_channels == 0) throw ConfigError("PVC layer channels must be positive");
  const std::size_t ci = spec.in_channels, co = spec.out_channels, d = spec.fsm_hidden();
  PvcLayerParams p;
  p.attn_w = uniform<T>({3 + ci, ci}, 3 + ci, rng);
  p.attn_b = zeros<T>(ci);
  p.point_w = uniform<T>({ci, co}, ci, rng);
  p.point_b = zeros<T>(co);
  p.voxel_w = uniform<T>({ci, co}, ci, rng);
  p.voxel_b = zeros<T>(co);
  p.conv_w = uniform<T>({co, co, 3, 3, 3}, co * 27, rng);
  p.conv_b = zeros<T>(co);
  p.fsm_fc = uniform<T>({co, d}, co, rng);
  p.fsm_w1 = uniform<T>({d, co}, d, rng);
  p.fsm_w2 = uniform<T>({d, co}, d, rng);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> PvcLayerParams<T>::named(const std::string& prefix) {
  return {{prefix + "attn_w", &attn_w},   {prefix + "attn_b", &attn_b},   {prefix + "point_w", &point_w},
          {prefix + "point_b", &point_b}, {prefix + "voxel_w", &voxel_w}, {prefix + "voxel_b", &voxel_b},
          {prefix + "conv_w", &conv_w},   {prefix + "conv_b", &conv_b},   {prefix + "fsm_fc", &fsm_fc},
          {prefix + "fsm_w1", &fsm_w1},   {prefix + "fsm_w2", &fsm_w2}};
}

template <typename T>
Tensor<T> aggregate_local(const LayerGeometry& geo, const Tensor<T>& features, const PvcLayerParams<T>& params) {
  const std::size_t k = geo.neighbors.k;
  if (geo.neighbors.num_queries() != geo.grid.num_voxels()) {
    throw DimensionError("aggregate_local: neighbors were not queried at this grid's voxel centers");
  }
  std::vector<T> offs(geo.offsets.begin(), geo.offsets.end());
  const Tensor<T> offsets({geo.offsets.size() / 3, 3}, std::move(offs));
  return attentive_aggregate(features, offsets, geo.neighbors.indices, k, params.attn_w, params.attn_b);
}

template <typename T>
Tensor<T> aggregate_average(const VoxelGrid& grid, const Tensor<T>& features) {
  return segment_mean(features, grid.member_offsets, grid.members);
}

template <typename T>
Tensor<T> voxel_branch(const VoxelGrid& grid, const Tensor<T>& voxel_features, const PvcLayerParams<T>& params) {
  const Tensor<T> lifted = relu(linear(voxel_features, params.voxel_w, params.voxel_b));
  const Tensor<T> volume = build_volume(grid, lifted);
  const Tensor<T> conv = relu(conv3d(volume, params.conv_w, params.conv_b));
  return devoxelize(grid, conv);
}

template <typename T>
Tensor<T> point_branch(const Tensor<T>& features, const PvcLayerParams<T>& params) {
  return relu(linear(features, params.point_w, params.point_b));
}

template <typename T>
FsmOutput<T> fsm_fuse(const Tensor<T>& point, const Tensor<T>& voxel, const PvcLayerParams<T>& params) {
  if (point.shape() != voxel.shape()) {
    throw DimensionError("fsm_fuse: branch shapes differ " + shape_str(point.shape()) + " vs " + shape_str(voxel.shape()));
  }
  const std::size_t c = point.dim(1);
  const Tensor<T> summed = add(point, voxel);
  const Tensor<T> pooled = reshape(reduce(Reduction::mean, summed, 0), {1, c});
  const Tensor<T> squeezed = relu(matmul(pooled, params.fsm_fc));
  const Tensor<T> sp = matmul(squeezed, params.fsm_w1);
  const Tensor<T> sv = matmul(squeezed, params.fsm_w2);
  auto [gp, gv] = softmax_pairwise(reshape(sp, {c}), reshape(sv, {c}));
  FsmOutput<T> out;
  out.fused = add(mul(point, gp), mul(voxel, gv));
  out.gate_point = gp;
  out.gate_voxel = gv;
  return out;
}

template <typename T>
PvcLayerOutput<T> pvc_forward(const LayerGeometry& geo, const Tensor<T>& features, const PvcLayerParams<T>& params,
                              const PvcLayerSpec& spec) {
  if (features.rank() != 2 || features.dim(0) != geo.grid.num_points() || features.dim(1) != spec.in_channels) {
    throw DimensionError("pvc_forward: features " + shape_str(features.shape()) + " for " +
                         std::to_string(geo.grid.num_points()) + " points with " + std::to_string(spec.in_channels) +
                         " channels");
  }
  const Tensor<T> voxel_features =
      spec.local_aggregation ? aggregate_local(geo, features, params) : aggregate_average(geo.grid, features);
  PvcLayerOutput<T> out;
  out.voxel = voxel_branch(geo.grid, voxel_features, params);
  out.point = point_branch(features, params);
  if (spec.fsm) {
    auto fused = fsm_fuse(out.point, out.voxel, params);
    out.features = fused.fused;
    out.gate_point = fused.gate_point;
    out.gate_voxel = fused.gate_voxel;
  } else {
    out.features = add(out.point, out.voxel);
  }
  return out;
}

#define PVC_INSTANTIATE_LAYER(T)                                                                              \
  template struct PvcLayerParams<T>;                                                                          \
  template Tensor<T> aggregate_local<T>(const LayerGeometry&, const Tensor<T>&, const PvcLayerParams<T>&);    \
  template Tensor<T> aggregate_average<T>(const VoxelGrid&, const Tensor<T>&);                                \
  template Tensor<T> voxel_branch<T>(const VoxelGrid&, const Tensor<T>&, const PvcLayerParams<T>&);           \
  template Tensor<T> point_branch<T>(const Tensor<T>&, const PvcLayerParams<T>&);                             \
  template FsmOutput<T> fsm_fuse<T>(const Tensor<T>&, const Tensor<T>&, const PvcLayerParams<T>&);            \
  template PvcLayerOutput<T> pvc_forward<T>(const LayerGeometry&, const Tensor<T>&, const PvcLayerParams<T>&, \
                                            const PvcLayerSpec&);

PVC_INSTANTIATE_LAYER(float)
PVC_INSTANTIATE_LAYER(double)

}  // namespace pvc
