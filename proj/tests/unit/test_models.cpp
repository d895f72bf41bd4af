#include <cmath>

#include <gtest/gtest.h>

#include "gvsl/errors.hpp"
#include "gvsl/gradcheck.hpp"
#include "gvsl/graph.hpp"
#include "gvsl/models.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/trainer.hpp"
#include "test_util.hpp"

namespace gvsl::models {
namespace {

// Fresh weights with the zero-initialised head layers replaced by small noise.
ModelWeights generic_weights(std::uint64_t seed, const BackboneArch& arch = {}) {
  ModelWeights w = init_weights(seed, arch);
  Rng rng(seed + 1000);
  for (auto& [name, t] : w.params) {
    if (name.starts_with("zmatch.affine/") || name.starts_with("zmatch.deform/out") || name.ends_with(".b") ||
        name.ends_with(".beta")) {
      for (auto& v : t.data()) v = 0.05 * rng.normal();
    }
  }
  return w;
}

ParamVars constant_params(ad::Graph& g, const ModelWeights& w) {
  ParamVars p;
  for (const auto& [name, t] : w.params) p.add(name, g.constant(t));
  return p;
}

TEST(Arch, Validation) {
  BackboneArch a;
  EXPECT_NO_THROW(a.validate());
  a.base_channels = 6;
  EXPECT_THROW(a.validate(), ConfigError);
  EXPECT_THROW(BackboneArch{}.validate_grid({32, 32, 30}), ConfigError);
  EXPECT_EQ(BackboneArch::from_json(BackboneArch{}.to_json()), BackboneArch{});
}

TEST(Backbone, ShapesAtThirtyTwo) {
  ModelWeights w = init_weights(1, {});
  ad::Graph g;
  ParamVars p = register_parameters(g, w);
  ad::Var x = g.input("x", {1, 1, 32, 32, 32});
  BackboneOutputs out = backbone_forward(g, p, x, w.arch);
  EXPECT_EQ(g.shape(out.local), (Shape{1, 8, 32, 32, 32}));
  EXPECT_EQ(g.shape(out.global), (Shape{1, 16, 8, 8, 8}));
  ad::Var bad = g.input("bad", {1, 1, 30, 32, 32});
  EXPECT_THROW(backbone_forward(g, p, bad, w.arch), ConfigError);
}

TEST(Backbone, Deterministic) {
  ModelWeights w = init_weights(2, {});
  Tensor v = test::random_tensor({1, 8, 8, 8}, 3, 0.0, 1.0);
  EXPECT_EQ(local_features(w, v), local_features(w, v));
}

TEST(Backbone, ZeroWeightsGiveConstantMaps) {
  ModelWeights w = init_weights(3, {});
  Rng rng(9);
  for (auto& [name, t] : w.params) {
    const bool bias = name.ends_with(".b") || name.ends_with(".beta");
    for (auto& v : t.data()) v = bias ? rng.uniform(-1.0, 1.0) : 0.0;
  }
  Tensor f = local_features(w, test::random_tensor({1, 8, 8, 8}, 4, 0.0, 1.0));
  const std::size_t vox = 512;
  for (std::int64_t c = 0; c < f.dim(0); ++c)
    for (std::size_t i = 1; i < vox; ++i) ASSERT_EQ(f[c * vox + i], f[c * vox]);
}

TEST(Init, DeterministicAndIdentityHeads) {
  ModelWeights a = init_weights(5, {});
  EXPECT_EQ(a, init_weights(5, {}));
  EXPECT_NE(weights_hash(a), weights_hash(init_weights(6, {})));
  for (const auto& [name, t] : a.params) {
    EXPECT_NO_THROW(namespace_of(name)) << name;
    if (name.starts_with("zmatch.affine/") || name.starts_with("zmatch.deform/out") || name.ends_with(".b") ||
        name.ends_with(".beta")) {
      for (double v : t.data()) ASSERT_EQ(v, 0.0) << name;
    }
  }
  // Fan-in scaled normal: sample standard deviation of the first conv near sqrt(2/27).
  const Tensor& w0 = a.params.at("backbone/enc0.conv.w");
  double ss = 0.0;
  for (double v : w0.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / w0.numel()), std::sqrt(2.0 / 27.0), 0.1);
}

TEST(Namespaces, Mapping) {
  EXPECT_EQ(namespace_of("backbone/enc0.conv.w"), Namespace::Backbone);
  EXPECT_EQ(namespace_of("zmatch.affine/rotation.w"), Namespace::ZMatch);
  EXPECT_EQ(namespace_of("zmatch.deform/out.b"), Namespace::ZMatch);
  EXPECT_EQ(namespace_of("restore/out.w"), Namespace::Restore);
  EXPECT_THROW(namespace_of("head/x"), ConfigError);
}

TEST(AffineHead, ZeroInitGivesIdentity) {
  ModelWeights w = init_weights(1, {});
  ad::Graph g;
  ParamVars p = register_parameters(g, w);
  ad::Var a = g.input("a", {2, 16, 2, 2, 2});
  ad::Var b = g.input("b", {2, 16, 2, 2, 2});
  AffineHeadOutputs out = affine_head_forward(g, p, a, b);
  g.mark_output("params", out.params);
  g.mark_output("matrix", out.matrix);
  ad::Bindings bind{{"a", test::random_tensor({2, 16, 2, 2, 2}, 1)}, {"b", test::random_tensor({2, 16, 2, 2, 2}, 2)}};
  bind_weights(bind, w);
  auto r = g.evaluate(bind);
  for (std::size_t n = 0; n < 2; ++n) {
    auto flat = geometry::AffineParams::identity().flatten();
    for (std::size_t k = 0; k < 15; ++k) EXPECT_EQ(r.at("params")[n * 15 + k], flat[k]);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(r.at("matrix")[n * 16 + k], (k % 5 == 0) ? 1.0 : 0.0);
  }
}

TEST(AffineHead, AsymmetricAndGradientReachesInput) {
  ModelWeights w = generic_weights(2);
  Tensor ga = test::random_tensor({1, 16, 2, 2, 2}, 3);
  Tensor gb = test::random_tensor({1, 16, 2, 2, 2}, 4);
  auto params_of = [&](const Tensor& x, const Tensor& y) {
    ad::Graph g;
    ParamVars p = constant_params(g, w);
    g.mark_output("p", affine_head_forward(g, p, g.constant(x), g.constant(y)).params);
    return g.evaluate({}).at("p");
  };
  EXPECT_GT(max_abs_diff(params_of(ga, gb), params_of(gb, ga)), 1e-6);

  auto build = [&](ad::Graph& g, std::span<const ad::Var> v) {
    ParamVars p = constant_params(g, w);
    return affine_head_forward(g, p, v[0], g.constant(gb)).params;
  };
  auto r = ad::check_gradients(build, {ga}, 1e-5, 1e-4, 7);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
  ad::Graph g;
  ParamVars p = constant_params(g, w);
  ad::Var a = g.input("a", ga.shape(), true);
  ad::Var loss = ad::sum(g, affine_head_forward(g, p, a, g.constant(gb)).params);
  g.evaluate({{"a", ga}});
  auto grads = g.backpropagate(loss);
  double norm = 0.0;
  for (double v : grads.at("a").data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(DeformHead, ZeroInitAndShape) {
  ModelWeights w = init_weights(1, {});
  ad::Graph g;
  ParamVars p = register_parameters(g, w);
  ad::Var a = g.input("a", {1, 8, 8, 8, 8});
  ad::Var b = g.input("b", {1, 8, 8, 8, 8});
  ad::Var d = deformable_head_forward(g, p, a, b, w.arch);
  EXPECT_EQ(g.shape(d), (Shape{1, 3, 8, 8, 8}));
  g.mark_output("d", d);
  ad::Bindings bind{{"a", test::random_tensor({1, 8, 8, 8, 8}, 1)}, {"b", test::random_tensor({1, 8, 8, 8, 8}, 2)}};
  bind_weights(bind, w);
  for (double v : g.evaluate(bind).at("d").data()) ASSERT_EQ(v, 0.0);
  ad::Var c = g.input("c", {1, 8, 4, 8, 8});
  EXPECT_THROW(deformable_head_forward(g, p, a, c, w.arch), ShapeError);
}

TEST(DeformHead, GradientReachesAffineParameters) {
  ModelWeights w = generic_weights(3);
  const geometry::VolumeGrid grid{8, 8, 8};
  Tensor la = test::random_tensor({1, 8, 8, 8, 8}, 5);
  Tensor lb = test::random_tensor({1, 8, 8, 8, 8}, 6);
  geometry::AffineParams ap;
  ap.rotation = {0.05, -0.03, 0.04};
  ap.translation = {0.31, -0.27, 0.42};
  ap.scaling = {1.02, 0.97, 1.01};
  auto flat = ap.flatten();
  Tensor params({1, 15}, std::vector<double>(flat.begin(), flat.end()));
  auto build = [&](ad::Graph& g, std::span<const ad::Var> v) {
    ParamVars p = constant_params(g, w);
    ad::Var field = geometry::affine_field(g, geometry::affine_matrix(g, v[0]), grid);
    ad::Var aligned = geometry::warp(g, g.constant(la), field);
    return deformable_head_forward(g, p, aligned, g.constant(lb), w.arch);
  };
  auto r = ad::check_gradients(build, {params}, 1e-6, 1e-4, 11);
  EXPECT_TRUE(r.pass) << r.max_rel_err << " " << r.worst;

  ad::Graph g;
  ad::Var v = g.input("p", {1, 15}, true);
  ad::Var loss = ad::sum(g, ad::square(g, build(g, std::span<const ad::Var>(&v, 1))));
  g.evaluate({{"p", params}});
  auto grads = g.backpropagate(loss);
  double norm = 0.0;
  for (double x : grads.at("p").data()) norm += x * x;
  EXPECT_GT(norm, 0.0);
}

TEST(RestoreHead, ShapeRangeAndDeterminism) {
  ModelWeights w = generic_weights(4);
  auto run = [&] {
    ad::Graph g;
    ParamVars p = register_parameters(g, w);
    ad::Var x = g.input("x", {1, 1, 8, 8, 8});
    ad::Var r = restoration_head_forward(g, p, backbone_forward(g, p, x, w.arch).local, w.arch);
    EXPECT_EQ(g.shape(r), (Shape{1, 1, 8, 8, 8}));
    g.mark_output("r", r);
    ad::Bindings b{{"x", test::random_tensor({1, 1, 8, 8, 8}, 8, 0.0, 1.0)}};
    bind_weights(b, w);
    return g.evaluate(b).at("r");
  };
  Tensor a = run();
  for (double v : a.data()) {
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
  EXPECT_EQ(a, run());
}

TEST(ZMatch, IdentityAtInitWarpsExactly) {
  ModelWeights w = init_weights(7, {});
  phantom::PhantomConfig cfg;
  cfg.extent = 16;
  Volume a = phantom::generate_phantom(1, cfg).volume;
  Volume b = phantom::generate_phantom(2, cfg).volume;
  trainer::NetworkRegistration r = trainer::network_register(w, a, b);
  for (double v : r.fused.field.data()) ASSERT_EQ(v, 0.0);
  for (double v : r.deform.field.data()) ASSERT_EQ(v, 0.0);
  EXPECT_EQ(r.affine, geometry::AffineParams::identity());
  EXPECT_EQ(geometry::warp_trilinear(a.data, r.fused), a.data);
}

TEST(ZMatch, EveryHeadReachesBackbone) {
  ModelWeights w = generic_weights(8);
  ad::Graph g;
  ParamVars p = register_parameters(g, w);
  ad::Var xa = g.input("xa", {1, 1, 8, 8, 8});
  ad::Var xb = g.input("xb", {1, 1, 8, 8, 8});
  BackboneOutputs fa = backbone_forward(g, p, xa, w.arch);
  BackboneOutputs fb = backbone_forward(g, p, xb, w.arch);
  ZMatchOutputs z = zmatch_forward(g, p, fa, fb, {8, 8, 8}, w.arch);
  ad::Var restored = restoration_head_forward(g, p, fa.local, w.arch);
  ad::Bindings bind{{"xa", test::random_tensor({1, 1, 8, 8, 8}, 1, 0.0, 1.0)},
                    {"xb", test::random_tensor({1, 1, 8, 8, 8}, 2, 0.0, 1.0)}};
  bind_weights(bind, w);
  for (ad::Var out : {z.affine.params, z.deform, restored}) {
    ad::Var loss = ad::sum(g, ad::square(g, out));
    g.evaluate(bind);
    auto grads = g.backpropagate(loss);
    double norm = 0.0;
    for (double v : grads.at("backbone/enc0.conv.w").data()) norm += v * v;
    EXPECT_GT(norm, 0.0);
  }
}

}  // namespace
}  // namespace gvsl::models
