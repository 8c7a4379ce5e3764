#include "pvc/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace pvc {

double scheduled_lr(std::size_t epoch, double base, double decay, std::size_t every) {
  if (every == 0) throw ConfigError("lr decay interval must be positive");
  return base * std::pow(decay, static_cast<double>(epoch / every));
}

template <typename T>
Adam<T>::Adam(std::vector<std::pair<std::string, Tensor<T>*>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t->numel(), 0.0);
    v_.emplace_back(t->numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, t] : params_) t->zero_grad();
}

template <typename T>
void Adam<T>::step(double lr) {
  for (const auto& [name, t] : params_) {
    if (!t->has_grad()) continue;
    for (const T g : t->grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + name);
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor<T>& t = *params_[p].second;
    const bool has = t.has_grad();
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[p][i] / c1;
      const double vhat = v_[p][i] / c2;
      data[i] = static_cast<T>(static_cast<double>(data[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

Metrics compute_metrics(std::span<const Index> predicted, std::span<const Index> labels,
                        std::span<const std::uint8_t> mask, std::size_t num_classes) {
  if (predicted.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  if (!mask.empty() && mask.size() != labels.size()) throw DimensionError("mask length differs from label count");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  Metrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const Index p = predicted[i], l = labels[i];
    if (p >= num_classes || l >= num_classes) throw IndexError("class id outside [0, num_classes)");
    ++m.points;
    if (p == l) {
      ++correct;
      ++tp[l];
    } else {
      ++fp[p];
      ++fn[l];
    }
  }
  m.accuracy = m.points ? static_cast<double>(correct) / static_cast<double>(m.points) : 0.0;
  m.iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    m.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    sum += m.iou[c];
    ++present;
  }
  m.miou = present ? sum / static_cast<double>(present) : 0.0;
  return m;
}

namespace {

struct Pooled {
  std::vector<Index> pred, labels;
  std::vector<std::uint8_t> mask;
  std::vector<std::vector<Index>> head_pred;

  template <typename T>
  void add(const Network<T>& net, const NetworkOutput<T>& out, const PreparedCloud& cloud, bool per_head) {
    const auto p = net.predict(out);
    pred.insert(pred.end(), p.begin(), p.end());
    if (net.config().task == Task::classification) {
      labels.push_back(cloud.labels.front());
      mask.push_back(1);
      return;
    }
    labels.insert(labels.end(), cloud.labels.begin(), cloud.labels.end());
    if (cloud.loss_mask.empty()) {
      mask.insert(mask.end(), cloud.size(), 1);
    } else {
      mask.insert(mask.end(), cloud.loss_mask.begin(), cloud.loss_mask.end());
    }
    if (!per_head) return;
    head_pred.resize(out.head_probs.size());
    for (std::size_t h = 0; h < out.head_probs.size(); ++h) {
      const auto& probs = out.head_probs[h];
      const std::size_t classes = probs.dim(1);
      for (std::size_t r = 0; r < probs.dim(0); ++r) {
        const auto row = probs.data().subspan(r * classes, classes);
        head_pred[h].push_back(static_cast<Index>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
    }
  }

  Metrics metrics(std::size_t classes) const {
    Metrics m = compute_metrics(pred, labels, mask, classes);
    for (const auto& hp : head_pred) m.head_accuracy.push_back(compute_metrics(hp, labels, mask, classes).accuracy);
    return m;
  }
};

PointCloud subsample(const PointCloud& cloud, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  PointCloud out;
  out.channels = cloud.channels;
  for (const std::size_t i : idx) {
    out.positions.insert(out.positions.end(), cloud.positions.begin() + 3 * i, cloud.positions.begin() + 3 * i + 3);
    out.features.insert(out.features.end(), cloud.features.begin() + cloud.channels * i,
                        cloud.features.begin() + cloud.channels * (i + 1));
    if (cloud.has_labels()) out.labels.push_back(cloud.labels[i]);
    if (cloud.has_mask()) out.loss_mask.push_back(cloud.loss_mask[i]);
  }
  return out;
}

}  // namespace

template <typename T>
Metrics evaluate(const Network<T>& net, const std::vector<PreparedCloud>& data, bool per_head) {
  Pooled pooled;
  for (const auto& cloud : data) {
    if (cloud.labels.empty()) throw DomainError("evaluation data must be labeled");
    pooled.add(net, net.forward(cloud), cloud, per_head);
  }
  return pooled.metrics(net.config().num_classes);
}

ParamSnapshot snapshot(Network<float>& net) {
  ParamSnapshot snap;
  for (const auto& [name, t] : net.parameters()) snap.emplace_back(name, t->detach());
  return snap;
}

void restore(Network<float>& net, const ParamSnapshot& snap) {
  auto params = net.parameters();
  if (params.size() != snap.size()) throw ConfigError("snapshot does not match network parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != snap[i].first || params[i].second->shape() != snap[i].second.shape()) {
      throw ConfigError("snapshot parameter " + snap[i].first + " does not match " + params[i].first);
    }
    std::copy(snap[i].second.data().begin(), snap[i].second.data().end(), params[i].second->data().begin());
  }
}

TrainResult train(Network<float>& net, const std::vector<PointCloud>& train_set, const std::vector<PointCloud>& val,
                  const TrainOptions& options) {
  if (train_set.empty()) throw DomainError("training set is empty");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  const NetworkConfig& cfg = net.config();
  std::mt19937_64 rng(options.seed);

  auto needs_resample = [&](const PointCloud& c) { return options.train_points > 0 && c.size() > options.train_points; };
  std::vector<PreparedCloud> cache(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (!train_set[i].has_labels()) throw DomainError("training cloud " + std::to_string(i) + " has no labels");
    if (!needs_resample(train_set[i])) cache[i] = prepare_cloud(cfg, train_set[i]);
  }
  std::vector<PreparedCloud> val_prepared;
  for (const auto& c : val) val_prepared.push_back(prepare_cloud(cfg, c));

  Adam<float> adam(net.parameters());
  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = scheduled_lr(epoch, options.base_lr, options.lr_decay, options.decay_every);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Pooled pooled;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      const Tensor<float> scale = Tensor<float>::scalar(1.0f / static_cast<float>(end - start));
      adam.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        PreparedCloud resampled;
        if (needs_resample(train_set[idx])) resampled = prepare_cloud(cfg, subsample(train_set[idx], options.train_points, rng));
        const PreparedCloud& cloud = needs_resample(train_set[idx]) ? resampled : cache[idx];
        GradTape<float> tape;
        NetworkOutput<float> out;
        Tensor<float> loss;
        try {
          out = net.forward(cloud);
          loss = net.loss(out, cloud);
        } catch (const DomainError& e) {
          throw TrainingError("epoch " + std::to_string(epoch) + " on cloud " + std::to_string(idx) + ": " + e.what());
        }
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " on cloud " + std::to_string(idx));
        }
        loss_sum += value;
        Tensor<float> scaled = mul(loss, scale);
        tape.backward(scaled);
        pooled.add(net, out, cloud, false);
      }
      adam.step(log.lr);
    }
    const Metrics train_metrics = pooled.metrics(cfg.num_classes);
    log.loss = loss_sum / static_cast<double>(order.size());
    log.accuracy = train_metrics.accuracy;
    log.miou = train_metrics.miou;
    double selection = log.miou;
    if (!val_prepared.empty()) {
      const Metrics vm = evaluate(net, val_prepared);
      log.val_accuracy = vm.accuracy;
      log.val_miou = vm.miou;
      selection = vm.miou;
    }
    result.log.push_back(log);
    if (selection > result.best_miou) {
      result.best_miou = selection;
      result.best_epoch = epoch;
      result.best_params = snapshot(net);
    }
    if (options.on_epoch && !options.on_epoch(log)) break;
  }
  return result;
}

template class Adam<float>;
template class Adam<double>;
template Metrics evaluate<float>(const Network<float>&, const std::vector<PreparedCloud>&, bool);
template Metrics evaluate<double>(const Network<double>&, const std::vector<PreparedCloud>&, bool);

}  // namespace pvc
