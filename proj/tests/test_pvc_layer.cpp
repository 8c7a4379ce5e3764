#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "pvc/gradcheck.hpp"
#include "pvc/pvc_layer.hpp"

using namespace pvc;
using namespace testing_helpers;

namespace {

PvcLayerSpec small_spec(std::size_t ci, std::size_t co, std::size_t g, std::size_t k) {
  PvcLayerSpec s;
  s.in_channels = ci;
  s.out_channels = co;
  s.grid = g;
  s.neighbors = {k, 1};
  return s;
}

Tensor<double> random_features(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  return random_leaf({n, c}, rng);
}

}  // namespace

TEST(LayerParams, ShapesAndHiddenWidth) {
  std::mt19937_64 rng(1);
  const auto spec = small_spec(5, 16, 4, 4);
  EXPECT_EQ(spec.fsm_hidden(), 4u);
  EXPECT_EQ(small_spec(5, 3, 4, 4).fsm_hidden(), 1u);
  const auto p = PvcLayerParams<double>::init(spec, rng);
  EXPECT_EQ(p.attn_w.shape(), (Shape{8, 5}));
  EXPECT_EQ(p.conv_w.shape(), (Shape{16, 16, 3, 3, 3}));
  EXPECT_EQ(p.fsm_fc.shape(), (Shape{16, 4}));
  EXPECT_EQ(p.fsm_w2.shape(), (Shape{4, 16}));
  const double bound = std::sqrt(6.0 / 8.0);
  for (const double v : p.attn_w.data()) EXPECT_LE(std::abs(v), bound);
  for (const double v : p.point_b.data()) EXPECT_EQ(v, 0.0);
}

TEST(AggregateLocal, SingleNeighborIsAttentionTimesFeature) {
  std::mt19937_64 rng(2);
  const auto pos = unit_cube_positions(40, rng);
  const auto geo = build_layer_geometry(pos, 3, {1, 1});
  auto params = PvcLayerParams<double>::init(small_spec(3, 4, 3, 1), rng);
  const auto f = random_features(40, 3, rng);
  const auto out = aggregate_local(geo, f, params);
  ASSERT_EQ(out.shape(), (Shape{geo.grid.num_voxels(), 3}));
  for (std::size_t m = 0; m < geo.grid.num_voxels(); ++m) {
    const std::size_t p = geo.neighbors.indices[m];
    std::vector<double> in{geo.offsets[3 * m], geo.offsets[3 * m + 1], geo.offsets[3 * m + 2]};
    for (std::size_t c = 0; c < 3; ++c) in.push_back(f[p * 3 + c]);
    for (std::size_t c = 0; c < 3; ++c) {
      double pre = params.attn_b[c];
      for (std::size_t r = 0; r < 6; ++r) pre += in[r] * params.attn_w[r * 3 + c];
      EXPECT_NEAR(out[m * 3 + c], std::max(pre, 0.0) * f[p * 3 + c], 1e-14);
    }
  }
}

TEST(AggregateLocal, ConstantAttentionIsUnweightedSum) {
  std::mt19937_64 rng(3);
  const auto pos = unit_cube_positions(50, rng);
  const auto geo = build_layer_geometry(pos, 2, {6, 1});
  auto params = PvcLayerParams<double>::init(small_spec(4, 4, 2, 6), rng);
  for (auto& v : params.attn_w.data()) v = 0.0;
  for (auto& v : params.attn_b.data()) v = 1.0;
  const auto f = random_features(50, 4, rng);
  const auto out = aggregate_local(geo, f, params);
  for (std::size_t m = 0; m < geo.grid.num_voxels(); ++m)
    for (std::size_t c = 0; c < 4; ++c) {
      double sum = 0.0;
      for (const Index p : geo.neighbors.row(m)) sum += f[p * 4 + c];
      EXPECT_NEAR(out[m * 4 + c], sum, 1e-13);
    }
}

TEST(AggregateLocal, GradcheckFeaturesAndAttention) {
  std::mt19937_64 rng(4);
  const auto pos = unit_cube_positions(64, rng);
  const auto geo = build_layer_geometry(pos, 3, {8, 1});
  auto params = PvcLayerParams<double>::init(small_spec(4, 4, 3, 8), rng);
  for (auto& v : params.attn_b.data()) v = 0.3;
  auto f = random_features(64, 4, rng);
  const auto u = random_leaf({geo.grid.num_voxels(), 4}, rng).set_requires_grad(false);
  const auto r = gradcheck<double>([&] { return weighted(aggregate_local(geo, f, params), u); },
                                   {{"features", f}, {"attn_w", params.attn_w}, {"attn_b", params.attn_b}});
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
  EXPECT_GT(r.checked, 0u);
}

TEST(AggregateLocal, QueriesMustMatchGrid) {
  std::mt19937_64 rng(5);
  const auto pos = unit_cube_positions(30, rng);
  auto geo = build_layer_geometry(pos, 3, {4, 1});
  geo.neighbors.indices.resize(4);
  auto params = PvcLayerParams<double>::init(small_spec(2, 2, 3, 4), rng);
  EXPECT_THROW(aggregate_local(geo, random_features(30, 2, rng), params), DimensionError);
}

TEST(AggregateAverage, SingleMemberAndSymmetry) {
  const std::vector<float> pos{0, 0, 0, 1, 1, 1, 0.99f, 0.99f, 0.99f};
  const auto grid = voxelize(pos, 2);
  ASSERT_EQ(grid.num_voxels(), 2u);
  const Tensor<double> f({3, 2}, {5.0, -3.0, 1.5, 2.0, -1.5, -2.0});
  const auto out = aggregate_average(grid, f);
  EXPECT_EQ(out[0], 5.0);
  EXPECT_EQ(out[1], -3.0);
  EXPECT_EQ(out[2], 0.0);
  EXPECT_EQ(out[3], 0.0);
}

TEST(AggregateAverage, EqualsScatterDividedByCounts) {
  std::mt19937_64 rng(6);
  const auto pos = unit_cube_positions(200, rng);
  const auto grid = voxelize(pos, 3);
  const auto f = random_features(200, 3, rng);
  const auto out = aggregate_average(grid, f);
  const auto summed = scatter_add_rows(Tensor<double>({grid.num_voxels(), 3}), grid.point_slot, f);
  for (std::size_t m = 0; m < grid.num_voxels(); ++m) {
    const double count = static_cast<double>(grid.members_of(m).size());
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out[m * 3 + c], summed[m * 3 + c] / count, 1e-14);
  }
}

TEST(VoxelBranch, ZeroInputZeroOutput) {
  std::mt19937_64 rng(7);
  const auto pos = unit_cube_positions(40, rng);
  const auto grid = voxelize(pos, 3);
  const auto params = PvcLayerParams<double>::init(small_spec(3, 5, 3, 4), rng);
  const auto out = voxel_branch(grid, Tensor<double>({grid.num_voxels(), 3}), params);
  EXPECT_EQ(out.shape(), (Shape{40, 5}));
  for (const double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(VoxelBranch, SingleVoxelMembersShareOutput) {
  std::mt19937_64 rng(8);
  std::vector<float> pos;
  for (int i = 0; i < 6; ++i) {
    pos.push_back(0.01f * i);
    pos.push_back(0.02f);
    pos.push_back(0.0f);
  }
  const auto grid = voxelize(pos, 1);
  ASSERT_EQ(grid.num_voxels(), 1u);
  const auto params = PvcLayerParams<double>::init(small_spec(2, 4, 1, 4), rng);
  const auto out = voxel_branch(grid, random_leaf({1, 2}, rng), params);
  for (std::size_t i = 1; i < 6; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out[i * 4 + c], out[c]);
}

TEST(VoxelBranch, Gradcheck) {
  std::mt19937_64 rng(9);
  const auto pos = unit_cube_positions(30, rng);
  const auto grid = voxelize(pos, 3);
  auto params = PvcLayerParams<double>::init(small_spec(3, 4, 3, 4), rng);
  for (auto& v : params.voxel_b.data()) v = 0.2;
  for (auto& v : params.conv_b.data()) v = 0.2;
  auto vf = random_leaf({grid.num_voxels(), 3}, rng);
  const auto u = random_leaf({30, 4}, rng).set_requires_grad(false);
  const auto r = gradcheck<double>([&] { return weighted(voxel_branch(grid, vf, params), u); },
                                   {{"voxel_features", vf},
                                    {"voxel_w", params.voxel_w},
                                    {"conv_w", params.conv_w},
                                    {"conv_b", params.conv_b}});
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}

TEST(PointBranch, PointwiseAndGradcheck) {
  std::mt19937_64 rng(10);
  auto params = PvcLayerParams<double>::init(small_spec(3, 4, 2, 4), rng);
  auto f = random_features(6, 3, rng);
  for (std::size_t c = 0; c < 3; ++c) f[3 + c] = f[c];
  const auto out = point_branch(f, params);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out[4 + c], out[c]);
  const auto u = random_leaf({6, 4}, rng).set_requires_grad(false);
  GradcheckOptions opts;
  opts.tolerance = 1e-6;
  const auto r = gradcheck<double>([&] { return weighted(point_branch(f, params), u); },
                                   {{"features", f}, {"point_w", params.point_w}, {"point_b", params.point_b}}, opts);
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}

TEST(PointBranch, PermutationEquivariant) {
  std::mt19937_64 rng(11);
  const auto params = PvcLayerParams<double>::init(small_spec(3, 5, 2, 4), rng);
  const auto f = random_features(20, 3, rng);
  const auto perm = random_permutation(20, rng);
  const std::vector<double> rows(f.data().begin(), f.data().end());
  const auto out = point_branch(f, params);
  const auto pout = point_branch(Tensor<double>({20, 3}, permute_rows(rows, perm, 3)), params);
  const std::vector<double> expected = permute_rows(std::vector<double>(out.data().begin(), out.data().end()), perm, 5);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(pout[i], expected[i]);
}

TEST(Fsm, GatesSumToOneAndGradcheck) {
  std::mt19937_64 rng(12);
  auto params = PvcLayerParams<double>::init(small_spec(8, 8, 2, 4), rng);
  auto fp = random_leaf({16, 8}, rng), fv = random_leaf({16, 8}, rng);
  const auto fused = fsm_fuse(fp, fv, params);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(fused.gate_point[c] + fused.gate_voxel[c], 1.0, 1e-6);
  const auto u = random_leaf({16, 8}, rng).set_requires_grad(false);
  const auto r = gradcheck<double>([&] { return weighted(fsm_fuse(fp, fv, params).fused, u); },
                                   {{"f_p", fp},
                                    {"f_v", fv},
                                    {"fsm_fc", params.fsm_fc},
                                    {"fsm_w1", params.fsm_w1},
                                    {"fsm_w2", params.fsm_w2}});
  EXPECT_TRUE(r.passed) << r.worst_input << " " << r.max_rel_error;
}

TEST(Fsm, EqualBranchesAreFixedPoint) {
  std::mt19937_64 rng(13);
  const auto params = PvcLayerParams<double>::init(small_spec(6, 6, 2, 4), rng);
  const auto v = random_leaf({10, 6}, rng);
  const auto out = fsm_fuse(v, v, params);
  for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(out.fused[i], v[i], 1e-12);
}

TEST(Fsm, EqualGateWeightsGiveHalf) {
  std::mt19937_64 rng(14);
  auto params = PvcLayerParams<double>::init(small_spec(8, 8, 2, 4), rng);
  for (std::size_t i = 0; i < params.fsm_w1.numel(); ++i) params.fsm_w2[i] = params.fsm_w1[i];
  const auto fp = random_leaf({12, 8}, rng), fv = random_leaf({12, 8}, rng);
  const auto out = fsm_fuse(fp, fv, params);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.gate_point[c], 0.5);
  for (std::size_t i = 0; i < fp.numel(); ++i) EXPECT_NEAR(out.fused[i], 0.5 * (fp[i] + fv[i]), 1e-15);
}

TEST(Fsm, ShapeMismatchIsDimensionError) {
  std::mt19937_64 rng(15);
  const auto params = PvcLayerParams<double>::init(small_spec(4, 4, 2, 4), rng);
  EXPECT_THROW(fsm_fuse(Tensor<double>({3, 4}), Tensor<double>({2, 4}), params), DimensionError);
}

TEST(PvcForward, FsmOffIsPlainSum) {
  std::mt19937_64 rng(16);
  auto spec = small_spec(4, 8, 4, 4);
  spec.fsm = false;
  const auto pos = unit_cube_positions(60, rng);
  const auto geo = build_layer_geometry(pos, 4, spec.neighbors);
  const auto params = PvcLayerParams<double>::init(spec, rng);
  const auto out = pvc_forward(geo, random_features(60, 4, rng), params, spec);
  EXPECT_EQ(out.features.shape(), (Shape{60, 8}));
  EXPECT_FALSE(out.gate_point.defined());
  for (std::size_t i = 0; i < out.features.numel(); ++i) EXPECT_EQ(out.features[i], out.point[i] + out.voxel[i]);
}

TEST(PvcForward, AverageSwitchUsesVoxelMeans) {
  std::mt19937_64 rng(17);
  auto spec = small_spec(3, 4, 3, 4);
  spec.local_aggregation = false;
  const auto pos = unit_cube_positions(50, rng);
  const auto geo = build_layer_geometry(pos, 3, spec.neighbors, false);
  EXPECT_TRUE(geo.neighbors.indices.empty());
  const auto params = PvcLayerParams<double>::init(spec, rng);
  const auto f = random_features(50, 3, rng);
  const auto out = pvc_forward(geo, f, params, spec);
  const auto expected = voxel_branch(geo.grid, aggregate_average(geo.grid, f), params);
  for (std::size_t i = 0; i < expected.numel(); ++i) EXPECT_EQ(out.voxel[i], expected[i]);
}

TEST(PvcForward, KeepsEveryPoint) {
  std::mt19937_64 rng(18);
  const auto spec = small_spec(3, 6, 4, 8);
  for (const std::size_t n : {1, 7, 300}) {
    const auto pos = unit_cube_positions(n, rng);
    const auto geo = build_layer_geometry(pos, 4, spec.neighbors);
    const auto params = PvcLayerParams<double>::init(spec, rng);
    EXPECT_EQ(pvc_forward(geo, random_features(n, 3, rng), params, spec).features.dim(0), n);
  }
}

TEST(PvcForward, PermutationEquivariant) {
  std::mt19937_64 rng(19);
  const auto spec = small_spec(4, 8, 4, 8);
  const std::size_t n = 150;
  PointCloud c;
  c.channels = 4;
  c.positions = unit_cube_positions(n, rng);
  for (std::size_t i = 0; i < 4 * n; ++i) c.features.push_back(static_cast<float>(oracle::random_vector(1, rng)[0]));
  const auto perm = random_permutation(n, rng);
  const auto pc = permute_cloud(c, perm);
  const auto params = PvcLayerParams<double>::init(spec, rng);
  auto features = [](const PointCloud& cl) {
    return Tensor<double>({cl.size(), cl.channels}, std::vector<double>(cl.features.begin(), cl.features.end()));
  };
  const auto a = pvc_forward(build_layer_geometry(c.positions, 4, spec.neighbors), features(c), params, spec);
  const auto b = pvc_forward(build_layer_geometry(pc.positions, 4, spec.neighbors), features(pc), params, spec);
  const auto expected =
      permute_rows(std::vector<double>(a.features.data().begin(), a.features.data().end()), perm, 8);
  EXPECT_LE(max_abs_diff(expected, b.features.data()), 1e-5);
}

TEST(PvcForward, FullLayerGradcheck) {
  std::mt19937_64 rng(20);
  const auto spec = small_spec(8, 16, 4, 8);
  const auto pos = unit_cube_positions(128, rng);
  const auto geo = build_layer_geometry(pos, 4, spec.neighbors);
  auto params = PvcLayerParams<double>::init(spec, rng);
  for (auto* b : {&params.attn_b, &params.point_b, &params.voxel_b, &params.conv_b})
    for (auto& v : b->data()) v = 0.1;
  auto f = random_features(128, 8, rng);
  const auto u = random_leaf({128, 16}, rng).set_requires_grad(false);
  std::vector<NamedTensor<double>> inputs{{"features", f}};
  for (auto& [name, t] : params.named("")) inputs.emplace_back(name, *t);
  const auto r = gradcheck<double>([&] { return weighted(pvc_forward(geo, f, params, spec).features, u); }, inputs);
  EXPECT_TRUE(r.passed) << r.worst_input << "[" << r.worst_coord << "] " << r.max_rel_error;
  EXPECT_GT(r.checked, r.excluded);
}

TEST(PvcForward, WrongFeatureShapeIsDimensionError) {
  std::mt19937_64 rng(21);
  const auto spec = small_spec(3, 4, 2, 4);
  const auto pos = unit_cube_positions(10, rng);
  const auto geo = build_layer_geometry(pos, 2, spec.neighbors);
  const auto params = PvcLayerParams<double>::init(spec, rng);
  EXPECT_THROW(pvc_forward(geo, Tensor<double>({10, 2}), params, spec), DimensionError);
  EXPECT_THROW(pvc_forward(geo, Tensor<double>({9, 3}), params, spec), DimensionError);
}
