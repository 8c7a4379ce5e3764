#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pvc/geometry.hpp"
#include "pvc/heads.hpp"
#include "pvc/pvc_layer.hpp"

namespace pvc {

struct Switches {
  bool local_aggregation = true;
  bool fsm = true;
  bool cam = true;

  bool operator==(const Switches&) const = default;
};

struct NetworkConfig {
  std::size_t num_layers = 4;
  std::vector<std::size_t> grid_sizes{32, 16, 8, 4};
  std::size_t k = 32;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  std::size_t base_channels = 64;
  double width_multiplier = 1.0;
  std::size_t in_channels = 3;
  std::size_t num_classes = 13;
  Task task = Task::segmentation;
  Switches switches;
  // Standardize each layer's output channels over the cloud's points before
  // it feeds the next layer and the heads.
  bool standardize_layers = true;

  /// round(width · C)
  std::size_t scaled_channels() const;
  /// scaled_channels · 2^layer (layer is 0-based)
  std::size_t layer_channels(std::size_t layer) const;
  std::vector<std::size_t> channels() const;
  std::size_t global_channels() const { return 2 * scaled_channels(); }

  PvcLayerSpec layer_spec(std::size_t layer) const;
  HeadsSpec heads_spec() const;
  void validate() const;

  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& cfg);
void from_json(const nlohmann::json& j, NetworkConfig& cfg);

/// A normalized cloud plus the per-layer voxel grids and neighbor lists,
/// which depend only on positions and can be reused across epochs.
struct PreparedCloud {
  std::size_t channels = 0;
  std::vector<float> positions;  // normalized to [0,1] per axis
  std::vector<float> features;
  std::vector<Index> labels;
  std::vector<std::uint8_t> loss_mask;
  std::vector<LayerGeometry> layers;

  std::size_t size() const { return positions.size() / 3; }
};

PreparedCloud prepare_cloud(const NetworkConfig& cfg, const PointCloud& cloud);

template <typename T>
Tensor<T> input_features(const PreparedCloud& cloud);

template <typename T>
struct NetworkOutput {
  std::vector<PvcLayerOutput<T>> layers;
  std::vector<Tensor<T>> layer_features;  // layer outputs as seen by later layers and the heads
  Tensor<T> global_feature;
  std::vector<Tensor<T>> head_probs;  // segmentation: one N×classes per head
  Tensor<T> final_probs;              // segmentation: mean of head_probs
  Tensor<T> class_scores;             // classification: 1×classes
  Tensor<T> class_probs;
};

template <typename T>
class Network {
 public:
  Network(NetworkConfig cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  NetworkOutput<T> forward(const PreparedCloud& cloud) const;
  NetworkOutput<T> forward(const PreparedCloud& cloud, const Tensor<T>& features) const;

  /// Sum of per-head losses (segmentation) or cross-entropy (classification,
  /// against the cloud's first label).
  Tensor<T> loss(const NetworkOutput<T>& out, const PreparedCloud& cloud) const;

  /// Per-point arg-max class (segmentation) or the single predicted class.
  std::vector<Index> predict(const NetworkOutput<T>& out) const;

  std::vector<std::pair<std::string, Tensor<T>*>> parameters();
  std::size_t parameter_count() const;

  std::vector<PvcLayerParams<T>>& layers() { return layers_; }
  HeadParams<T>& heads() { return heads_; }

 private:
  NetworkConfig cfg_;
  std::vector<PvcLayerParams<T>> layers_;
  HeadParams<T> heads_;
};

}  // namespace pvc
