#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "pvc/data_io.hpp"
#include "pvc/train.hpp"

using namespace pvc;
using namespace testing_helpers;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.num_layers = 2;
  c.grid_sizes = {4, 2};
  c.dilations = {1, 2};
  c.k = 4;
  c.base_channels = 4;
  c.in_channels = 3;
  c.num_classes = 3;
  return c;
}

PointCloud small_scene(std::uint64_t seed, std::size_t points = 256) {
  SyntheticSceneSpec spec;
  spec.points = points;
  spec.seed = seed;
  return generate_scene(spec).cloud;
}

}  // namespace

TEST(Adam, MatchesScalarReference) {
  Tensor<double> x({1}, {0.7});
  x.set_requires_grad(true);
  Adam<double> adam({{"x", &x}});
  oracle::ScalarAdam ref{0.05};
  double rx = 0.7;
  for (int step = 0; step < 30; ++step) {
    adam.zero_grad();
    const double g = 3.0 * x[0] * x[0] - 1.0;
    x.grad()[0] = g;
    adam.step(0.05);
    rx = ref.step(rx, 3.0 * rx * rx - 1.0);
    EXPECT_NEAR(x[0], rx, 1e-14) << step;
  }
  EXPECT_EQ(adam.steps(), 30u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor<double> w({3}, {1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  Adam<double> adam({{"w", &w}});
  w.grad();
  adam.step(1e-3);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], -2.0);
  EXPECT_EQ(w[2], 0.5);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Tensor<double> w({2}, {0.0, 0.0});
  w.set_requires_grad(true);
  Adam<double> adam({{"w", &w}});
  w.grad()[0] = 4.0;
  w.grad()[1] = -0.01;
  adam.step(1e-3);
  EXPECT_NEAR(w[0], -1e-3, 1e-9);
  EXPECT_NEAR(w[1], 1e-3, 1e-9);
}

TEST(Adam, QuadraticConverges) {
  Tensor<double> x({1}, {1.0});
  x.set_requires_grad(true);
  Adam<double> adam({{"x", &x}});
  for (int i = 0; i < 100; ++i) {
    adam.zero_grad();
    GradTape<double> tape;
    auto loss = mul(x, x);
    tape.backward(loss);
    adam.step(0.1);
  }
  EXPECT_LT(std::abs(x[0]), 0.1);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor<double> a({1}, {1.0}), b({2}, {1.0, 2.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Adam<double> adam({{"alpha", &a}, {"layer0.conv_w", &b}});
  b.grad()[1] = std::numeric_limits<double>::infinity();
  try {
    adam.step(1e-3);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.conv_w"), std::string::npos);
  }
  EXPECT_EQ(b[0], 1.0);
}

TEST(Metrics, HandCountedConfusion) {
  const std::vector<Index> pred{0, 0, 0, 0}, labels{0, 0, 1, 1};
  const auto m = compute_metrics(pred, labels, {}, 2);
  EXPECT_DOUBLE_EQ(m.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(m.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(m.miou, 0.25);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
}

TEST(Metrics, PerfectPredictionAndAbsentClasses) {
  const std::vector<Index> labels{0, 2, 2, 0};
  const auto m = compute_metrics(labels, labels, {}, 3);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.miou, 1.0);
  EXPECT_TRUE(std::isnan(m.iou[1]));
}

TEST(Metrics, MaskedPointsIgnored) {
  const std::vector<Index> labels{0, 1, 1, 0}, pred{0, 1, 0, 1};
  const std::vector<std::uint8_t> mask{1, 1, 0, 0};
  const auto a = compute_metrics(pred, labels, mask, 2);
  std::vector<Index> flipped = pred;
  flipped[2] = 1;
  flipped[3] = 0;
  const auto b = compute_metrics(flipped, labels, mask, 2);
  EXPECT_EQ(a.accuracy, 1.0);
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_EQ(a.points, 2u);
}

TEST(Metrics, ErrorsOnBadInput) {
  const std::vector<Index> a{0, 1}, b{0};
  EXPECT_THROW(compute_metrics(a, b, {}, 2), DimensionError);
  const std::vector<Index> c{0, 5};
  EXPECT_THROW(compute_metrics(c, a, {}, 2), IndexError);
}

TEST(Train, SingleExampleLossDecreases) {
  Network<float> net(tiny_config(), 3);
  TrainOptions opts;
  opts.epochs = 10;
  const auto result = train(net, {small_scene(1)}, {}, opts);
  ASSERT_EQ(result.log.size(), 10u);
  int rises = 0;
  for (std::size_t e = 1; e < 10; ++e) rises += result.log[e].loss >= result.log[e - 1].loss;
  EXPECT_LE(rises, 2);
  EXPECT_LT(result.log.back().loss, result.log.front().loss);
}

TEST(Train, FixedSeedIsBitReproducible) {
  const std::vector<PointCloud> data{small_scene(1), small_scene(2), small_scene(3)};
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 2;
  opts.train_points = 200;
  Network<float> a(tiny_config(), 4), b(tiny_config(), 4);
  const auto ra = train(a, data, {}, opts), rb = train(b, data, {}, opts);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(ra.log[e].loss, rb.log[e].loss);
    EXPECT_EQ(ra.log[e].miou, rb.log[e].miou);
  }
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t p = 0; p < pa.size(); ++p)
    for (std::size_t i = 0; i < pa[p].second->numel(); ++i) ASSERT_EQ((*pa[p].second)[i], (*pb[p].second)[i]);
}

TEST(Train, LogsScheduleAndEarlyStop) {
  Network<float> net(tiny_config(), 5);
  TrainOptions opts;
  opts.epochs = 50;
  opts.decay_every = 2;
  std::size_t calls = 0;
  opts.on_epoch = [&](const EpochLog&) { return ++calls < 5; };
  const auto result = train(net, {small_scene(1, 128)}, {small_scene(9, 128)}, opts);
  ASSERT_EQ(result.log.size(), 5u);
  EXPECT_DOUBLE_EQ(result.log[4].lr, 2.5e-4);
  EXPECT_FALSE(result.best_params.empty());
  EXPECT_LE(result.best_epoch, 4u);
}

TEST(Train, SnapshotRestoreRoundTrip) {
  Network<float> net(tiny_config(), 6);
  const auto snap = snapshot(net);
  for (auto& [name, t] : net.parameters())
    for (auto& v : t->data()) v += 1.0f;
  restore(net, snap);
  const auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < snap[p].second.numel(); ++i) ASSERT_EQ((*params[p].second)[i], snap[p].second[i]);
  auto other = tiny_config();
  other.base_channels = 8;
  Network<float> mismatched(other, 6);
  EXPECT_THROW(restore(mismatched, snap), ConfigError);
}

TEST(Train, RejectsUnusableInput) {
  Network<float> net(tiny_config(), 7);
  EXPECT_THROW(train(net, {}, {}, {}), DomainError);
  auto unlabeled = small_scene(1, 64);
  unlabeled.labels.clear();
  EXPECT_THROW(train(net, {unlabeled}, {}, {}), DomainError);
  auto masked = small_scene(1, 64);
  masked.loss_mask.assign(64, 0);
  TrainOptions opts;
  opts.epochs = 1;
  EXPECT_THROW(train(net, {masked}, {}, opts), TrainingError);
}

TEST(Evaluate, PooledSegmentationMetrics) {
  const auto cfg = tiny_config();
  const Network<float> net(cfg, 8);
  const std::vector<PreparedCloud> data{prepare_cloud(cfg, small_scene(1, 100)), prepare_cloud(cfg, small_scene(2, 60))};
  const auto m = evaluate(net, data, true);
  EXPECT_EQ(m.points, 160u);
  EXPECT_EQ(m.head_accuracy.size(), 2u);
  std::vector<Index> pred, labels;
  for (const auto& c : data) {
    const auto p = net.predict(net.forward(c));
    pred.insert(pred.end(), p.begin(), p.end());
    labels.insert(labels.end(), c.labels.begin(), c.labels.end());
  }
  EXPECT_DOUBLE_EQ(m.accuracy, compute_metrics(pred, labels, {}, 3).accuracy);
}
