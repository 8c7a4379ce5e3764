#include "pvc/gradcheck_suite.hpp"

#include <random>

#include "pvc/network.hpp"
#include "pvc/ops.hpp"
#include "pvc/pvc_layer.hpp"

namespace pvc {

namespace {

template <typename T>
class Suite {
 public:
  Suite(const GradcheckOptions& options, std::uint64_t seed) : options_(options), rng_(seed) {}

  Tensor<T> random(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(u(rng_));
    return t.set_requires_grad(true);
  }

  Tensor<T> constant(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t = random(std::move(shape), lo, hi);
    return t.set_requires_grad(false);
  }

  // Σ out ⊙ R for a fixed random R of the output's shape, drawn on first use.
  std::function<Tensor<T>()> probe(std::function<Tensor<T>()> f) {
    auto weights = std::make_shared<Tensor<T>>();
    auto* self = this;
    return [f = std::move(f), weights, self] {
      Tensor<T> out = f();
      if (!weights->defined()) *weights = self->constant(out.shape());
      if (out.numel() == 1 && out.rank() <= 1 && weights->numel() == 1) return mul(out, *weights);
      return reduce(Reduction::sum, reshape(mul(out, *weights), {out.numel()}), 0);
    };
  }

  void check(const std::string& name, std::function<Tensor<T>()> f, std::vector<NamedTensor<T>> inputs) {
    entries_.push_back({name, gradcheck<T>(probe(std::move(f)), std::move(inputs), options_)});
  }

  std::vector<SuiteEntry> run();

 private:
  GradcheckOptions options_;
  std::mt19937_64 rng_;
  std::vector<SuiteEntry> entries_;
};

std::vector<float> random_positions(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> p(3 * n);
  for (auto& v : p) v = u(rng);
  return p;
}

template <typename T>
std::vector<SuiteEntry> Suite<T>::run() {
  {
    auto a = random({3, 4}), b = random({3, 4}), row = random({4}), s = random({1});
    check("add", [=] { return add(a, b); }, {{"a", a}, {"b", b}});
    check("add_broadcast", [=] { return add(a, row); }, {{"a", a}, {"row", row}});
    check("sub", [=] { return sub(a, s); }, {{"a", a}, {"s", s}});
    check("mul", [=] { return mul(a, b); }, {{"a", a}, {"b", b}});
    check("mul_broadcast", [=] { return mul(a, row); }, {{"a", a}, {"row", row}});
    check("relu", [=] { return relu(a); }, {{"a", a}});
    check("exp", [=] { return exp(a); }, {{"a", a}});
    auto pos = random({3, 4}, 0.5, 2.0);
    check("log", [=] { return log(pos); }, {{"a", pos}});
  }
  {
    auto a = random({5, 4}), b = random({4, 3}), bias = random({3});
    check("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
    check("transpose", [=] { return transpose(a); }, {{"a", a}});
    check("linear", [=] { return linear(a, b, bias); }, {{"x", a}, {"w", b}, {"bias", bias}});
  }
  {
    auto a = random({4, 3}, -2.0, 2.0), b = random({4, 3}, -2.0, 2.0);
    check("softmax_pairwise", [=] {
      auto [p, q] = softmax_pairwise(a, b);
      return concat_cols<T>({p, q});
    }, {{"a", a}, {"b", b}});
    check("softmax_rows", [=] { return softmax_rows(a); }, {{"a", a}});
  }
  {
    auto a = random({4, 5});
    check("reduce_mean", [=] { return reduce(Reduction::mean, a, 0); }, {{"a", a}});
    check("reduce_sum", [=] { return reduce(Reduction::sum, a, 1); }, {{"a", a}});
    check("reduce_max", [=] { return reduce(Reduction::max, a, 0); }, {{"a", a}});
  }
  {
    auto a = random({5, 3}), src = random({4, 3}), c = random({5, 2});
    const std::vector<Index> idx{4, 0, 4, 2};
    check("gather_rows", [=] { return gather_rows(a, idx); }, {{"a", a}});
    check("scatter_add_rows", [=] { return scatter_add_rows(a, idx, src); }, {{"target", a}, {"src", src}});
    check("concat_cols", [=] { return concat_cols<T>({a, c}); }, {{"a", a}, {"c", c}});
    check("reshape", [=] { return reshape(a, {3, 5}); }, {{"a", a}});
  }
  {
    auto volume = random({2, 4, 4, 4}), kernels = random({3, 2, 3, 3, 3}), bias = random({3});
    check("conv3d", [=] { return conv3d(volume, kernels, bias); },
          {{"volume", volume}, {"kernels", kernels}, {"bias", bias}});
  }
  {
    auto rows = random({4, 3});
    const std::vector<Index> cells{0, 5, 7, 26};
    check("rows_to_volume", [=] { return rows_to_volume(rows, cells, 3); }, {{"rows", rows}});
    auto volume = random({3, 3, 3, 3});
    const std::vector<Index> pick{5, 5, 0, 26, 13};
    check("volume_to_rows", [=] { return volume_to_rows(volume, pick); }, {{"volume", volume}});
  }
  {
    auto f = random({6, 3});
    const std::vector<Index> offsets{0, 2, 3, 6}, members{1, 4, 0, 2, 3, 5};
    check("segment_mean", [=] { return segment_mean(f, offsets, members); }, {{"features", f}});
  }
  {
    const std::size_t k = 3;
    auto f = random({6, 4}), w = random({7, 4}), bias = random({4});
    auto offsets = constant({2 * k, 3});
    const std::vector<Index> nbr{0, 3, 5, 1, 1, 2};
    check("attentive_aggregate", [=] { return attentive_aggregate(f, offsets, nbr, k, w, bias); },
          {{"features", f}, {"w", w}, {"bias", bias}});
  }
  {
    auto x = random({7, 3}, -2.0, 3.0);
    check("standardize_columns", [=] { return standardize_columns(x); }, {{"x", x}});
  }
  {
    auto logits = random({5, 3});
    const std::vector<Index> labels{0, 2, 1, 1, 0};
    const std::vector<std::uint8_t> mask{1, 0, 1, 1, 1};
    check("masked_nll", [=] { return masked_nll(softmax_rows(logits), labels, mask); }, {{"logits", logits}});
  }

  std::mt19937_64 geo_rng(rng_());
  {
    const std::size_t n = 32;
    const auto positions = random_positions(n, geo_rng);
    PvcLayerSpec spec;
    spec.in_channels = 4;
    spec.out_channels = 8;
    spec.grid = 4;
    spec.neighbors = NeighborConfig{4, 1};
    auto geo = std::make_shared<LayerGeometry>(build_layer_geometry(positions, spec.grid, spec.neighbors));
    auto params = std::make_shared<PvcLayerParams<T>>(PvcLayerParams<T>::init(spec, rng_));
    auto features = random({n, spec.in_channels});
    std::vector<NamedTensor<T>> inputs{{"features", features}};
    for (auto& [name, t] : params->named("layer.")) inputs.emplace_back(name, *t);
    check("pvc_layer", [=] { return pvc_forward(*geo, features, *params, spec).features; }, inputs);

    auto fm = random({n, 6}), gamma = random({1});
    check("channel_attention", [=] { return channel_attention(fm, gamma); }, {{"features", fm}, {"gamma", gamma}});
  }
  {
    HeadsSpec hs;
    hs.layer_channels = {4, 8};
    hs.global_channels = 8;
    hs.num_classes = 3;
    auto heads = std::make_shared<HeadParams<T>>(HeadParams<T>::init(hs, rng_));
    for (auto& a : heads->aux) a.gamma[0] = static_cast<T>(0.5);
    const std::size_t n = 16;
    auto l0 = random({n, 4}), l1 = random({n, 8});
    std::vector<Index> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<Index>(i % 3);
    std::vector<NamedTensor<T>> inputs{{"layer0", l0}, {"layer1", l1}};
    for (auto& [name, t] : heads->named()) inputs.emplace_back(name, *t);
    check("heads", [=] {
      const std::vector<Tensor<T>> layers{l0, l1};
      const Tensor<T> global = build_global_feature(layers, *heads);
      std::vector<Tensor<T>> probs;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        probs.push_back(auxiliary_head(layers[l], global, heads->aux[l], true));
      }
      return segmentation_loss(probs, labels, std::span<const std::uint8_t>{}).total;
    }, inputs);
  }
  {
    NetworkConfig cfg;
    cfg.num_layers = 2;
    cfg.grid_sizes = {4, 2};
    cfg.dilations = {1, 2};
    cfg.k = 4;
    cfg.base_channels = 4;
    cfg.in_channels = 3;
    cfg.num_classes = 3;
    auto net = std::make_shared<Network<T>>(cfg, rng_());
    for (auto& a : net->heads().aux) a.gamma[0] = static_cast<T>(0.5);
    const std::size_t n = 32;
    PointCloud cloud;
    cloud.channels = 3;
    cloud.positions = random_positions(n, geo_rng);
    cloud.features = random_positions(n, geo_rng);
    for (std::size_t i = 0; i < n; ++i) cloud.labels.push_back(static_cast<Index>(i % 3));
    auto prepared = std::make_shared<PreparedCloud>(prepare_cloud(cfg, cloud));
    auto features = input_features<T>(*prepared).set_requires_grad(true);
    std::vector<NamedTensor<T>> inputs{{"features", features}};
    for (auto& [name, t] : net->parameters()) inputs.emplace_back(name, *t);
    check("network", [=] { return net->loss(net->forward(*prepared, features), *prepared); }, inputs);
  }
  return entries_;
}

}  // namespace

template <typename T>
std::vector<SuiteEntry> run_gradcheck_suite(const GradcheckOptions& options, std::uint64_t seed) {
  return Suite<T>(options, seed).run();
}

template std::vector<SuiteEntry> run_gradcheck_suite<float>(const GradcheckOptions&, std::uint64_t);
template std::vector<SuiteEntry> run_gradcheck_suite<double>(const GradcheckOptions&, std::uint64_t);

}  // namespace pvc
