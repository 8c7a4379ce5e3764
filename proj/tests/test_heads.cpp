#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "pvc/gradcheck.hpp"
#include "pvc/heads.hpp"

using namespace pvc;
using namespace testing_helpers;

namespace {

HeadsSpec small_heads(bool cam = true) {
  HeadsSpec s;
  s.layer_channels = {4, 8};
  s.global_channels = 8;
  s.num_classes = 3;
  s.cam = cam;
  return s;
}

Tensor<double> random_probs(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  return softmax_rows(random_leaf({n, k}, rng, -2.0, 2.0));
}

}  // namespace

TEST(HeadParams, ModesAllocateOnlyTheirTensors) {
  std::mt19937_64 rng(1);
  const auto full = HeadParams<double>::init(small_heads(), rng);
  EXPECT_EQ(full.aux.size(), 2u);
  EXPECT_EQ(full.reduce_w.shape(), (Shape{12, 8}));
  EXPECT_EQ(full.aux[1].proj_w.shape(), (Shape{16, 8}));
  EXPECT_EQ(full.aux[0].gamma[0], 0.0);
  EXPECT_FALSE(full.global_cls_w.defined());
  const auto base = HeadParams<double>::init(small_heads(false), rng);
  EXPECT_TRUE(base.aux.empty());
  EXPECT_EQ(base.global_cls_w.shape(), (Shape{8, 3}));
  auto cls_spec = small_heads();
  cls_spec.task = Task::classification;
  auto cls = HeadParams<double>::init(cls_spec, rng);
  EXPECT_EQ(cls.fc_w.shape(), (Shape{12, 3}));
  EXPECT_EQ(cls.named().size(), 2u);
}

TEST(GlobalFeature, ZeroInputsAndSingleRow) {
  std::mt19937_64 rng(2);
  const auto params = HeadParams<double>::init(small_heads(), rng);
  const auto g = build_global_feature<double>({Tensor<double>({5, 4}), Tensor<double>({5, 8})}, params);
  EXPECT_EQ(g.shape(), (Shape{5, 8}));
  for (const double v : g.data()) EXPECT_EQ(v, 0.0);
  const auto one = build_global_feature<double>({random_leaf({1, 4}, rng), random_leaf({1, 8}, rng)}, params);
  EXPECT_EQ(one.shape(), (Shape{1, 8}));
  EXPECT_THROW(build_global_feature<double>({Tensor<double>({5, 4}), Tensor<double>({4, 8})}, params), DimensionError);
}

TEST(GlobalFeature, Gradcheck) {
  std::mt19937_64 rng(3);
  auto params = HeadParams<double>::init(small_heads(), rng);
  for (auto& v : params.reduce_b.data()) v = 0.2;
  auto a = random_leaf({6, 4}, rng), b = random_leaf({6, 8}, rng);
  const auto u = random_leaf({6, 8}, rng).set_requires_grad(false);
  GradcheckOptions opts;
  opts.tolerance = 1e-5;
  const auto r = gradcheck<double>([&] { return weighted(build_global_feature<double>({a, b}, params), u); },
                                   {{"a", a}, {"b", b}, {"reduce_w", params.reduce_w}}, opts);
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}

TEST(ChannelAttention, ZeroGammaIsBitExactIdentity) {
  std::mt19937_64 rng(4);
  const auto f = random_leaf({20, 6}, rng, -5.0, 5.0);
  const auto out = channel_attention(f, Tensor<double>({1}));
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(out[i], f[i]);
}

TEST(ChannelAttention, SingleChannelScalesByOnePlusGamma) {
  std::mt19937_64 rng(5);
  const auto f = random_leaf({9, 1}, rng);
  const auto out = channel_attention(f, Tensor<double>({1}, {0.75}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(out[i], 1.75 * f[i], 1e-15);
}

TEST(ChannelAttention, AffinityRowsSumToOneAndGradcheck) {
  std::mt19937_64 rng(6);
  auto f = random_leaf({12, 8}, rng);
  const auto a = softmax_rows(matmul(transpose(f), f));
  for (std::size_t r = 0; r < 8; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 8; ++c) s += a[r * 8 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  auto gamma = leaf({1}, {0.4});
  const auto u = random_leaf({12, 8}, rng).set_requires_grad(false);
  const auto r = gradcheck<double>([&] { return weighted(channel_attention(f, gamma), u); },
                                   {{"features", f}, {"gamma", gamma}});
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}

TEST(AuxiliaryHead, ZeroWeightsGiveUniformProbabilities) {
  std::mt19937_64 rng(7);
  auto params = HeadParams<double>::init(small_heads(), rng);
  auto& aux = params.aux[0];
  for (auto& v : aux.cls_w.data()) v = 0.0;
  const auto probs = auxiliary_head(random_leaf({7, 4}, rng), random_leaf({7, 8}, rng), aux);
  for (const double p : probs.data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(AuxiliaryHead, RowsSumToOneAndPermutationEquivariant) {
  std::mt19937_64 rng(8);
  auto params = HeadParams<double>::init(small_heads(), rng);
  params.aux[1].gamma[0] = 0.6;
  const auto layer = random_leaf({25, 8}, rng), global = random_leaf({25, 8}, rng);
  const auto probs = auxiliary_head(layer, global, params.aux[1]);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(probs[3 * i] + probs[3 * i + 1] + probs[3 * i + 2], 1.0, 1e-6);
  const auto perm = random_permutation(25, rng);
  auto rows = [](const Tensor<double>& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  const auto pp = auxiliary_head(Tensor<double>({25, 8}, permute_rows(rows(layer), perm, 8)),
                                 Tensor<double>({25, 8}, permute_rows(rows(global), perm, 8)), params.aux[1]);
  EXPECT_LE(max_abs_diff(permute_rows(rows(probs), perm, 3), pp.data()), 1e-12);
}

TEST(SegmentationLoss, UniformProbabilitiesClosedForm) {
  const std::vector<Tensor<double>> heads(4, Tensor<double>({10, 13}, 1.0 / 13.0));
  std::vector<Index> labels(10);
  for (std::size_t i = 0; i < 10; ++i) labels[i] = static_cast<Index>(i % 13);
  const auto loss = segmentation_loss<double>(heads, labels, {});
  EXPECT_NEAR(loss.total.item(), 4.0 * std::log(13.0), 1e-12);
  EXPECT_EQ(loss.head_losses.size(), 4u);
}

TEST(SegmentationLoss, OneHotTrueClassIsZero) {
  Tensor<double> p({3, 2}, {1, 0, 0, 1, 1, 0});
  const std::vector<Index> labels{0, 1, 0};
  EXPECT_EQ(segmentation_loss<double>({p, p}, labels, {}).total.item(), 0.0);
}

TEST(SegmentationLoss, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(9);
  std::vector<Tensor<double>> heads;
  std::vector<std::vector<double>> raw;
  for (int h = 0; h < 4; ++h) {
    heads.push_back(random_probs(50, 5, rng));
    raw.emplace_back(heads.back().data().begin(), heads.back().data().end());
  }
  std::vector<Index> labels(50);
  std::vector<std::uint8_t> mask(50);
  for (std::size_t i = 0; i < 50; ++i) {
    labels[i] = static_cast<Index>(rng() % 5);
    mask[i] = (i % 4) != 0;
  }
  const auto loss = segmentation_loss<double>(heads, labels, mask);
  const double expected = oracle::segmentation_loss(raw, labels, mask, 5);
  EXPECT_NEAR(loss.total.item(), expected, 1e-6);
  double parts = 0.0;
  for (const auto& l : loss.head_losses) parts += l.item();
  EXPECT_NEAR(loss.total.item(), parts, 1e-12);
  for (std::size_t i = 0; i < 250; ++i) {
    double mean = 0.0;
    for (const auto& r : raw) mean += r[i];
    EXPECT_NEAR(loss.final_probs[i], mean / 4.0, 1e-15);
  }
}

TEST(SegmentationLoss, MaskedLabelsDoNotMatter) {
  std::mt19937_64 rng(10);
  auto logits = random_leaf({20, 4}, rng);
  std::vector<Index> labels(20);
  std::vector<std::uint8_t> mask(20, 1);
  for (std::size_t i = 0; i < 20; ++i) labels[i] = static_cast<Index>(i % 4);
  for (std::size_t i = 0; i < 20; i += 3) mask[i] = 0;
  std::vector<double> grad_before;
  double before = 0.0;
  {
    GradTape<double> tape;
    auto l = segmentation_loss<double>({softmax_rows(logits)}, labels, mask).total;
    before = l.item();
    tape.backward(l);
    grad_before.assign(logits.grad().begin(), logits.grad().end());
  }
  for (std::size_t i = 0; i < 20; i += 3) labels[i] = (labels[i] + 1) % 4;
  logits.zero_grad();
  GradTape<double> tape;
  auto l = segmentation_loss<double>({softmax_rows(logits)}, labels, mask).total;
  EXPECT_EQ(l.item(), before);
  tape.backward(l);
  for (std::size_t i = 0; i < grad_before.size(); ++i) EXPECT_EQ(logits.grad()[i], grad_before[i]);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(logits.grad()[c], 0.0);
}

TEST(SegmentationLoss, AllMaskedIsDomainError) {
  const std::vector<Index> labels{0, 1};
  const std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(segmentation_loss<double>({Tensor<double>({2, 2}, 0.5)}, labels, mask), DomainError);
}

TEST(ClassificationHead, SinglePointAndDuplication) {
  std::mt19937_64 rng(11);
  auto spec = small_heads();
  spec.task = Task::classification;
  const auto params = HeadParams<double>::init(spec, rng);
  const auto a = random_leaf({1, 4}, rng), b = random_leaf({1, 8}, rng);
  const auto one = classification_head<double>({a, b}, params);
  EXPECT_EQ(one.shape(), (Shape{1, 3}));
  for (std::size_t k = 0; k < 3; ++k) {
    double s = params.fc_b[k];
    for (std::size_t c = 0; c < 4; ++c) s += a[c] * params.fc_w[c * 3 + k];
    for (std::size_t c = 0; c < 8; ++c) s += b[c] * params.fc_w[(4 + c) * 3 + k];
    EXPECT_NEAR(one[k], s, 1e-14);
  }
  const auto x = random_leaf({6, 4}, rng), y = random_leaf({6, 8}, rng);
  auto dup = [](const Tensor<double>& t) {
    std::vector<double> v(t.data().begin(), t.data().end());
    v.insert(v.end(), t.data().begin(), t.data().end());
    return Tensor<double>({2 * t.dim(0), t.dim(1)}, v);
  };
  const auto s1 = classification_head<double>({x, y}, params), s2 = classification_head<double>({dup(x), dup(y)}, params);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(s1[k], s2[k]);
}

TEST(ClassificationHead, GradcheckThroughMax) {
  std::mt19937_64 rng(12);
  auto spec = small_heads();
  spec.task = Task::classification;
  auto params = HeadParams<double>::init(spec, rng);
  auto a = random_leaf({10, 4}, rng), b = random_leaf({10, 8}, rng);
  const auto u = random_leaf({1, 3}, rng).set_requires_grad(false);
  const auto r = gradcheck<double>([&] { return weighted(classification_head<double>({a, b}, params), u); },
                                   {{"a", a}, {"b", b}, {"fc_w", params.fc_w}, {"fc_b", params.fc_b}});
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}
