#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvc/network.hpp"

namespace pvc {

struct TrainingError : Error {
  using Error::Error;
};

/// base · decay^⌊epoch / every⌋
double scheduled_lr(std::size_t epoch, double base = 1e-3, double decay = 0.5, std::size_t every = 20);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of named parameters.
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>*>> params, AdamConfig cfg = {});

  /// Applies one update at learning rate `lr` from the accumulated gradients.
  /// Throws TrainingError naming the first parameter with a non-finite gradient.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return steps_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>*>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> iou;  // NaN for classes absent from both prediction and truth
  double miou = 0.0;
  std::vector<double> head_accuracy;
  std::size_t points = 0;
};

/// Confusion-matrix metrics over unmasked entries.
Metrics compute_metrics(std::span<const Index> predicted, std::span<const Index> labels,
                        std::span<const std::uint8_t> mask, std::size_t num_classes);

/// Segmentation: point accuracy and IoU over unmasked points, pooled across
/// clouds. Classification: per-cloud overall accuracy.
template <typename T>
Metrics evaluate(const Network<T>& net, const std::vector<PreparedCloud>& data, bool per_head = false);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;  // training predictions taken during the epoch
  double miou = 0.0;
  double val_accuracy = 0.0;
  double val_miou = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double lr_decay = 0.5;
  std::size_t decay_every = 20;
  std::uint64_t seed = 7;
  // Clouds larger than this are randomly subsampled each epoch; 0 keeps all.
  std::size_t train_points = 0;
  // Called after every epoch; returning false stops training.
  std::function<bool(const EpochLog&)> on_epoch;
};

using ParamSnapshot = std::vector<std::pair<std::string, Tensor<float>>>;

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_miou = -1.0;
  ParamSnapshot best_params;
};

ParamSnapshot snapshot(Network<float>& net);
void restore(Network<float>& net, const ParamSnapshot& snap);

/// Mini-batch training with per-item gradient accumulation. The best epoch is
/// chosen by held-out mIoU, or training mIoU when `val` is empty.
TrainResult train(Network<float>& net, const std::vector<PointCloud>& train_set, const std::vector<PointCloud>& val,
                  const TrainOptions& options);

}  // namespace pvc
