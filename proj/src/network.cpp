#include "pvc/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pvc {

std::size_t NetworkConfig::scaled_channels() const {
  return static_cast<std::size_t>(std::lround(width_multiplier * static_cast<double>(base_channels)));
}

std::size_t NetworkConfig::layer_channels(std::size_t layer) const { return scaled_channels() << layer; }

std::vector<std::size_t> NetworkConfig::channels() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < num_layers; ++l) out.push_back(layer_channels(l));
  return out;
}

PvcLayerSpec NetworkConfig::layer_spec(std::size_t layer) const {
  PvcLayerSpec s;
  s.in_channels = layer == 0 ? in_channels : layer_channels(layer - 1);
  s.out_channels = layer_channels(layer);
  s.grid = grid_sizes.at(layer);
  s.neighbors = NeighborConfig{k, dilations.at(layer)};
  s.local_aggregation = switches.local_aggregation;
  s.fsm = switches.fsm;
  return s;
}

HeadsSpec NetworkConfig::heads_spec() const {
  HeadsSpec h;
  h.layer_channels = channels();
  h.global_channels = global_channels();
  h.num_classes = num_classes;
  h.task = task;
  h.cam = switches.cam;
  return h;
}

void NetworkConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be at least 1");
  if (grid_sizes.size() != num_layers) throw ConfigError("grid_sizes must list one resolution per layer");
  if (dilations.size() != num_layers) throw ConfigError("dilations must list one step per layer");
  for (const auto g : grid_sizes)
    if (g < 1) throw ConfigError("grid sizes must be positive");
  for (const auto d : dilations)
    if (d < 1) throw ConfigError("dilation steps must be positive");
  if (k < 1) throw ConfigError("K must be at least 1");
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  if (scaled_channels() < 1) throw ConfigError("width_multiplier · base_channels rounds to zero channels");
  if (in_channels < 1) throw ConfigError("in_channels must be at least 1");
  if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
}

void to_json(nlohmann::json& j, const NetworkConfig& cfg) {
  j = nlohmann::json{{"num_layers", cfg.num_layers},
                     {"grid_sizes", cfg.grid_sizes},
                     {"K", cfg.k},
                     {"dilations", cfg.dilations},
                     {"base_channels", cfg.base_channels},
                     {"width_multiplier", cfg.width_multiplier},
                     {"in_channels", cfg.in_channels},
                     {"num_classes", cfg.num_classes},
                     {"standardize_layers", cfg.standardize_layers},
                     {"task", cfg.task == Task::segmentation ? "segmentation" : "classification"},
                     {"switches",
                      {{"local_aggregation", cfg.switches.local_aggregation},
                       {"fsm", cfg.switches.fsm},
                       {"cam", cfg.switches.cam}}}};
}

void from_json(const nlohmann::json& j, NetworkConfig& cfg) {
  try {
    cfg.num_layers = j.value("num_layers", cfg.num_layers);
    cfg.grid_sizes = j.value("grid_sizes", cfg.grid_sizes);
    cfg.k = j.value("K", cfg.k);
    cfg.dilations = j.value("dilations", cfg.dilations);
    cfg.base_channels = j.value("base_channels", cfg.base_channels);
    cfg.width_multiplier = j.value("width_multiplier", cfg.width_multiplier);
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.standardize_layers = j.value("standardize_layers", cfg.standardize_layers);
    if (j.contains("task")) {
      const std::string task = j.at("task").get<std::string>();
      if (task == "segmentation") {
        cfg.task = Task::segmentation;
      } else if (task == "classification") {
        cfg.task = Task::classification;
      } else {
        throw ConfigError("unknown task '" + task + "'");
      }
    }
    if (j.contains("switches")) {
      const auto& s = j.at("switches");
      cfg.switches.local_aggregation = s.value("local_aggregation", cfg.switches.local_aggregation);
      cfg.switches.fsm = s.value("fsm", cfg.switches.fsm);
      cfg.switches.cam = s.value("cam", cfg.switches.cam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
}

PreparedCloud prepare_cloud(const NetworkConfig& cfg, const PointCloud& cloud) {
  cfg.validate();
  cloud.validate(cfg.num_classes);
  if (cloud.channels != cfg.in_channels) {
    throw DimensionError("cloud has " + std::to_string(cloud.channels) + " feature channels, network expects " +
                         std::to_string(cfg.in_channels));
  }
  auto [normalized, bounds] = normalize_cloud(cloud);
  (void)bounds;
  PreparedCloud out;
  out.channels = cloud.channels;
  out.positions = std::move(normalized.positions);
  out.features = std::move(normalized.features);
  out.labels.assign(cloud.labels.begin(), cloud.labels.end());
  out.loss_mask = cloud.loss_mask;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    out.layers.push_back(build_layer_geometry(out.positions, cfg.grid_sizes[l], NeighborConfig{cfg.k, cfg.dilations[l]},
                                              cfg.switches.local_aggregation));
  }
  return out;
}

template <typename T>
Tensor<T> input_features(const PreparedCloud& cloud) {
  return Tensor<T>({cloud.size(), cloud.channels}, std::vector<T>(cloud.features.begin(), cloud.features.end()));
}

template <typename T>
Network<T>::Network(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) layers_.push_back(PvcLayerParams<T>::init(cfg_.layer_spec(l), rng));
  heads_ = HeadParams<T>::init(cfg_.heads_spec(), rng);
}

template <typename T>
NetworkOutput<T> Network<T>::forward(const PreparedCloud& cloud) const {
  return forward(cloud, input_features<T>(cloud));
}

template <typename T>
NetworkOutput<T> Network<T>::forward(const PreparedCloud& cloud, const Tensor<T>& features) const {
  if (cloud.layers.size() != cfg_.num_layers) throw ConfigError("cloud was prepared for a different layer count");
  NetworkOutput<T> out;
  Tensor<T> x = features;
  std::vector<Tensor<T>>& layer_features = out.layer_features;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    out.layers.push_back(pvc_forward(cloud.layers[l], x, layers_[l], cfg_.layer_spec(l)));
    x = cfg_.standardize_layers ? standardize_columns(out.layers.back().features) : out.layers.back().features;
    layer_features.push_back(x);
  }
  if (cfg_.task == Task::classification) {
    out.class_scores = classification_head(layer_features, heads_);
    out.class_probs = softmax_rows(out.class_scores);
    return out;
  }
  out.global_feature = build_global_feature(layer_features, heads_);
  if (cfg_.switches.cam) {
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      out.head_probs.push_back(auxiliary_head(layer_features[l], out.global_feature, heads_.aux[l], true));
    }
  } else {
    out.head_probs.push_back(softmax_rows(linear(out.global_feature, heads_.global_cls_w, heads_.global_cls_b)));
  }
  out.final_probs = mean_probabilities(out.head_probs);
  return out;
}

template <typename T>
Tensor<T> Network<T>::loss(const NetworkOutput<T>& out, const PreparedCloud& cloud) const {
  if (cloud.labels.empty()) throw DomainError("loss needs labels");
  if (cfg_.task == Task::classification) {
    const Index label = cloud.labels.front();
    return masked_nll(out.class_probs, std::span<const Index>(&label, 1), {});
  }
  return segmentation_loss(out.head_probs, cloud.labels, cloud.loss_mask).total;
}

template <typename T>
std::vector<Index> Network<T>::predict(const NetworkOutput<T>& out) const {
  const Tensor<T>& probs = cfg_.task == Task::classification ? out.class_probs : out.final_probs;
  const std::size_t rows = probs.dim(0), classes = probs.dim(1);
  std::vector<Index> pred(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = probs.data().subspan(r * classes, classes);
    pred[r] = static_cast<Index>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return pred;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Network<T>::parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto named = layers_[l].named("layer" + std::to_string(l) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  auto heads = heads_.named();
  out.insert(out.end(), heads.begin(), heads.end());
  return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : const_cast<Network*>(this)->parameters()) total += t->numel();
  return total;
}

template Tensor<float> input_features<float>(const PreparedCloud&);
template Tensor<double> input_features<double>(const PreparedCloud&);
template class Network<float>;
template class Network<double>;

}  // namespace pvc
