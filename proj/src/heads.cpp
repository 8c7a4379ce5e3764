#include "pvc/heads.hpp"

#include <cmath>
#include <numeric>

namespace pvc {

std::size_t HeadsSpec::concat_channels() const {
  return std::accumulate(layer_channels.begin(), layer_channels.end(), std::size_t{0});
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
HeadParams<T> HeadParams<T>::init(const HeadsSpec& spec, std::mt19937_64& rng) {
  if (spec.num_classes < 1) throw ConfigError("num_classes must be at least 1");
  if (spec.layer_channels.empty()) throw ConfigError("heads need at least one layer");
  HeadParams p;
  const std::size_t cat = spec.concat_channels(), cg = spec.global_channels, k = spec.num_classes;
  if (spec.task == Task::classification) {
    p.fc_w = uniform<T>({cat, k}, cat, rng);
    p.fc_b = zeros<T>(k);
    return p;
  }
  p.reduce_w = uniform<T>({cat, cg}, cat, rng);
  p.reduce_b = zeros<T>(cg);
  if (!spec.cam) {
    p.global_cls_w = uniform<T>({cg, k}, cg, rng);
    p.global_cls_b = zeros<T>(k);
    return p;
  }
  for (const std::size_t cl : spec.layer_channels) {
    AuxHeadParams<T> a;
    a.proj_w = uniform<T>({cl + cg, cl}, cl + cg, rng);
    a.proj_b = zeros<T>(cl);
    a.gamma = zeros<T>(1);
    a.cls_w = uniform<T>({cl, k}, cl, rng);
    a.cls_b = zeros<T>(k);
    p.aux.push_back(std::move(a));
  }
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> HeadParams<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  auto add_if = [&](const std::string& name, Tensor<T>& t) {
    if (t.defined()) out.emplace_back(name, &t);
  };
  add_if("heads.reduce_w", reduce_w);
  add_if("heads.reduce_b", reduce_b);
  for (std::size_t l = 0; l < aux.size(); ++l) {
    const std::string pre = "heads.aux" + std::to_string(l) + ".";
    add_if(pre + "proj_w", aux[l].proj_w);
    add_if(pre + "proj_b", aux[l].proj_b);
    add_if(pre + "gamma", aux[l].gamma);
    add_if(pre + "cls_w", aux[l].cls_w);
    add_if(pre + "cls_b", aux[l].cls_b);
  }
  add_if("heads.global_cls_w", global_cls_w);
  add_if("heads.global_cls_b", global_cls_b);
  add_if("heads.fc_w", fc_w);
  add_if("heads.fc_b", fc_b);
  return out;
}

template <typename T>
Tensor<T> build_global_feature(const std::vector<Tensor<T>>& layer_outputs, const HeadParams<T>& params) {
  return relu(linear(concat_cols(layer_outputs), params.reduce_w, params.reduce_b));
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& features, const Tensor<T>& gamma) {
  const Tensor<T> affinity = softmax_rows(matmul(transpose(features), features));
  const Tensor<T> attended = matmul(features, transpose(affinity));
  return add(mul(attended, gamma), features);
}

template <typename T>
Tensor<T> auxiliary_head(const Tensor<T>& layer_out, const Tensor<T>& global_feature, const AuxHeadParams<T>& params,
                         bool use_cam) {
  Tensor<T> x = relu(linear(concat_cols<T>({layer_out, global_feature}), params.proj_w, params.proj_b));
  if (use_cam) x = channel_attention(x, params.gamma);
  return softmax_rows(linear(x, params.cls_w, params.cls_b));
}

template <typename T>
Tensor<T> mean_probabilities(const std::vector<Tensor<T>>& per_head_probs) {
  if (per_head_probs.empty()) throw DimensionError("no head probabilities to average");
  Tensor<T> mean(per_head_probs.front().shape());
  for (const auto& p : per_head_probs) {
    if (p.shape() != mean.shape()) throw DimensionError("head probability shapes differ");
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += p[i];
  }
  const T inv = T(1) / static_cast<T>(per_head_probs.size());
  for (auto& v : mean.data()) v *= inv;
  return mean;
}

template <typename T>
SegmentationLoss<T> segmentation_loss(const std::vector<Tensor<T>>& per_head_probs, std::span<const Index> labels,
                                      std::span<const std::uint8_t> loss_mask) {
  SegmentationLoss<T> out;
  for (const auto& probs : per_head_probs) {
    out.head_losses.push_back(masked_nll(probs, labels, loss_mask));
    out.total = out.total.defined() ? add(out.total, out.head_losses.back()) : out.head_losses.back();
  }
  out.final_probs = mean_probabilities(per_head_probs);
  return out;
}

template <typename T>
Tensor<T> classification_head(const std::vector<Tensor<T>>& layer_outputs, const HeadParams<T>& params) {
  const Tensor<T> cat = concat_cols(layer_outputs);
  const Tensor<T> pooled = reshape(reduce(Reduction::max, cat, 0), {1, cat.dim(1)});
  return linear(pooled, params.fc_w, params.fc_b);
}

#define PVC_INSTANTIATE_HEADS(T)                                                                                 \
  template struct HeadParams<T>;                                                                                 \
  template Tensor<T> build_global_feature<T>(const std::vector<Tensor<T>>&, const HeadParams<T>&);               \
  template Tensor<T> channel_attention<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> auxiliary_head<T>(const Tensor<T>&, const Tensor<T>&, const AuxHeadParams<T>&, bool);       \
  template Tensor<T> mean_probabilities<T>(const std::vector<Tensor<T>>&);                                       \
  template SegmentationLoss<T> segmentation_loss<T>(const std::vector<Tensor<T>>&, std::span<const Index>,       \
                                                    std::span<const std::uint8_t>);                              \
  template Tensor<T> classification_head<T>(const std::vector<Tensor<T>>&, const HeadParams<T>&);

PVC_INSTANTIATE_HEADS(float)
PVC_INSTANTIATE_HEADS(double)

}  // namespace pvc
