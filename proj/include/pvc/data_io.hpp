#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "pvc/geometry.hpp"

namespace pvc {

inline constexpr std::uint32_t kCloudFormatVersion = 1;

/// "PVCN" little-endian binary: magic, version, N, C, flags (bit0 labels,
/// bit1 mask), then positions f32, features f32, labels u32, mask u8.
void write_pvcn(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_pvcn(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_pvcn(const PointCloud& cloud);
PointCloud decode_pvcn(const std::vector<std::uint8_t>& bytes);

/// Rows of x,y,z,f_0..f_{C-1},label. A non-numeric first line is taken as a header.
void write_csv(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_csv(const std::filesystem::path& path);

/// Dispatches on extension: ".csv" is CSV, anything else PVCN.
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_cloud(const std::filesystem::path& path);

/// A single cloud file, or every .pvcn/.csv file of a directory in name order.
std::vector<PointCloud> load_dataset(const std::filesystem::path& path);

enum class ShapeKind : std::uint8_t { plane = 0, sphere = 1, box = 2 };

struct SyntheticSceneSpec {
  std::size_t planes = 1;
  std::size_t spheres = 1;
  std::size_t boxes = 1;
  std::size_t points = 2048;  // split evenly across shapes, remainder to the first
  double extent = 2.0;        // side of the square floor area, metres
  double noise_sigma = 0.005; // position noise along the normal, truncated at ±3σ
  double feature_noise = 0.05;
  std::uint64_t seed = 7;
  std::array<std::uint32_t, 3> class_ids{0, 1, 2};  // indexed by ShapeKind

  std::size_t num_shapes() const { return planes + spheres + boxes; }
  std::vector<std::size_t> points_per_shape() const;
};

struct SceneShape {
  ShapeKind kind;
  std::array<double, 3> center;
  double size;  // sphere radius, box half-side, plane half-side
  std::size_t points;
};

struct SyntheticScene {
  PointCloud cloud;  // features are 3-channel noisy normals
  std::vector<SceneShape> shapes;
};

SyntheticScene generate_scene(const SyntheticSceneSpec& spec);

/// One shape of the given kind with every point labeled `label`.
PointCloud generate_object(ShapeKind kind, std::size_t points, std::uint32_t label, std::uint64_t seed,
                           double noise_sigma = 0.005, double feature_noise = 0.05);

struct Block {
  PointCloud cloud;                 // loss_mask 1 for core points, 0 for padded context
  std::vector<std::size_t> source;  // room index of every block point
  std::array<std::size_t, 2> tile;
};

/// x-y tiling anchored at the room's min corner; z is not split. Each point's
/// own tile is floor((p − min) / block), clamped into range. Blocks without
/// core points are dropped.
std::vector<Block> split_blocks(const PointCloud& room, double block = 2.0, double pad = 0.5);

}  // namespace pvc
