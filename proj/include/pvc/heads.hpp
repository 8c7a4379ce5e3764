#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvc/ops.hpp"
#include "pvc/tensor.hpp"

namespace pvc {

enum class Task { segmentation, classification };

struct HeadsSpec {
  std::vector<std::size_t> layer_channels;  // C_l of every PVC layer
  std::size_t global_channels = 0;          // C_g
  std::size_t num_classes = 0;
  Task task = Task::segmentation;
  // Deep supervision with channel attention. Off gives the baseline head: a
  // single classifier on the global feature.
  bool cam = true;

  std::size_t concat_channels() const;
};

template <typename T>
struct AuxHeadParams {
  Tensor<T> proj_w;  // (C_l + C_g)×C_l
  Tensor<T> proj_b;
  Tensor<T> gamma;   // [1], starts at 0
  Tensor<T> cls_w;   // C_l×classes
  Tensor<T> cls_b;
};

/// Only the tensors used by the configured mode are allocated.
template <typename T>
struct HeadParams {
  Tensor<T> reduce_w;  // ΣC_l × C_g
  Tensor<T> reduce_b;
  std::vector<AuxHeadParams<T>> aux;
  Tensor<T> global_cls_w;  // C_g×classes (baseline head)
  Tensor<T> global_cls_b;
  Tensor<T> fc_w;  // ΣC_l × classes (classification)
  Tensor<T> fc_b;

  static HeadParams init(const HeadsSpec& spec, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor<T>*>> named();
};

/// Concatenated layer outputs reduced to C_g channels by a linear layer + ReLU.
template <typename T>
Tensor<T> build_global_feature(const std::vector<Tensor<T>>& layer_outputs, const HeadParams<T>& params);

/// Channel self-attention: A = row-softmax(FᵀF), out = γ·(F·Aᵀ) + F.
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& features, const Tensor<T>& gamma);

template <typename T>
Tensor<T> auxiliary_head(const Tensor<T>& layer_out, const Tensor<T>& global_feature, const AuxHeadParams<T>& params,
                         bool use_cam = true);

template <typename T>
struct SegmentationLoss {
  Tensor<T> total;                     // sum over heads
  std::vector<Tensor<T>> head_losses;  // one per head
  Tensor<T> final_probs;               // mean of head probabilities (no gradient)
};

template <typename T>
Tensor<T> mean_probabilities(const std::vector<Tensor<T>>& per_head_probs);

template <typename T>
SegmentationLoss<T> segmentation_loss(const std::vector<Tensor<T>>& per_head_probs, std::span<const Index> labels,
                                      std::span<const std::uint8_t> loss_mask);

/// Max-pool over points of the concatenated layer outputs, then a linear
/// layer: 1×classes scores.
template <typename T>
Tensor<T> classification_head(const std::vector<Tensor<T>>& layer_outputs, const HeadParams<T>& params);

}  // namespace pvc
