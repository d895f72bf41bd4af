#include <benchmark/benchmark.h>

#include <array>

#include "gvsl/geometry.hpp"
#include "gvsl/graph.hpp"
#include "gvsl/losses.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/rng.hpp"
#include "gvsl/trainer.hpp"

namespace {

using namespace gvsl;

Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Forward and backward of one 3x3x3 convolution on [1, Ci, E, E, E].
void BM_Conv3d(benchmark::State& state) {
  const std::int64_t e = state.range(0);
  const std::int64_t ci = state.range(1);
  const std::int64_t co = state.range(2);
  ad::Graph g;
  const ad::Var x = g.input("x", {1, ci, e, e, e});
  const ad::Var w = g.parameter("w", {co, ci, 3, 3, 3});
  const ad::Var b = g.parameter("b", {co});
  const ad::Var loss = ad::sum(g, ad::conv3d(g, x, w, b));
  ad::Bindings bind{{"x", random_tensor({1, ci, e, e, e}, 1)},
                    {"w", random_tensor({co, ci, 3, 3, 3}, 2, -0.1, 0.1)},
                    {"b", Tensor({co})}};
  for (auto _ : state) {
    g.evaluate(bind);
    benchmark::DoNotOptimize(g.backpropagate(loss));
  }
  state.SetItemsProcessed(state.iterations() * e * e * e * ci * co * 27 * 3);
}
BENCHMARK(BM_Conv3d)->Args({32, 8, 8})->Args({16, 16, 16})->Args({32, 16, 8})->Unit(benchmark::kMillisecond);

void BM_WarpTrilinear(benchmark::State& state) {
  const std::int64_t e = state.range(0);
  const geometry::VolumeGrid grid{e, e, e};
  const Tensor src = random_tensor({1, e, e, e}, 3, 0.0, 1.0);
  const geometry::Dvf dvf(random_tensor({3, e, e, e}, 4, -2.0, 2.0));
  for (auto _ : state) benchmark::DoNotOptimize(geometry::warp_trilinear(src, dvf));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(grid.voxels()));
}
BENCHMARK(BM_WarpTrilinear)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

// Local NCC loss forward and backward through a warp.
void BM_NccLoss(benchmark::State& state) {
  const std::int64_t e = state.range(0);
  ad::Graph g;
  const ad::Var src = g.input("src", {1, 1, e, e, e});
  const ad::Var fixed = g.input("fixed", {1, 1, e, e, e});
  const ad::Var u = g.parameter("u", {1, 3, e, e, e});
  const ad::Var loss = losses::local_ncc_loss(g, geometry::warp(g, src, u), fixed, losses::LossConfig{});
  ad::Bindings bind{{"src", random_tensor({1, 1, e, e, e}, 5, 0.0, 1.0)},
                    {"fixed", random_tensor({1, 1, e, e, e}, 6, 0.0, 1.0)},
                    {"u", random_tensor({1, 3, e, e, e}, 7, -1.0, 1.0)}};
  for (auto _ : state) {
    g.evaluate(bind);
    benchmark::DoNotOptimize(g.backpropagate(loss));
  }
}
BENCHMARK(BM_NccLoss)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_PhantomGenerate(benchmark::State& state) {
  phantom::PhantomConfig cfg;
  cfg.extent = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(phantom::generate_phantom(seed++, cfg));
}
BENCHMARK(BM_PhantomGenerate)->Arg(32)->Unit(benchmark::kMillisecond);

// One full training step (forward, backward, three Adam updates), batch 2 at 32^3.
void BM_TrainStep(benchmark::State& state) {
  trainer::TrainConfig cfg;
  cfg.batch = 2;
  phantom::PhantomConfig pc;
  std::array<phantom::Phantom, 4> ph{phantom::generate_phantom(1, pc), phantom::generate_phantom(2, pc),
                                     phantom::generate_phantom(3, pc), phantom::generate_phantom(4, pc)};
  const std::array<const Volume*, 2> a{&ph[0].volume, &ph[1].volume};
  const std::array<const Volume*, 2> b{&ph[2].volume, &ph[3].volume};
  trainer::TrainState st = trainer::init_state(cfg);
  trainer::GvslStep step(cfg, ph[0].volume.grid());
  for (auto _ : state) benchmark::DoNotOptimize(trainer::gvsl_train_step(st, step, a, b));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
