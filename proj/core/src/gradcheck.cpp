#include "gvsl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gvsl/errors.hpp"
#include "gvsl/geometry.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/rng.hpp"

namespace gvsl::ad {
namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values with |v| in [gap, 1], random sign.
Tensor away_from_zero(Rng& rng, const Shape& shape, double gap) {
  Tensor t(shape);
  for (auto& v : t.data()) {
    const double mag = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

Shape pick(const Shape& requested, Shape fallback) { return requested.empty() ? fallback : requested; }

}  // namespace

GradCheckReport check_gradients(const GraphBuilder& build, const std::vector<Tensor>& inputs, double h, double tol,
                                std::uint64_t seed, const std::function<bool(std::size_t, std::size_t)>& mask) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  Graph g;
  std::vector<Var> leaves;
  Bindings bindings;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string name = "in" + std::to_string(i);
    leaves.push_back(g.input(name, inputs[i].shape(), true));
    bindings.emplace(name, inputs[i]);
  }
  const Var out = build(g, leaves);
  Rng rng(seed ^ 0x5bd1e995u);
  const Var weights = g.constant(random_tensor(rng, g.shape(out), 0.5, 1.5));
  const Var loss = sum(g, mul(g, out, weights));

  g.evaluate(bindings);
  const TensorMap analytic = g.backpropagate(loss);

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string name = "in" + std::to_string(i);
    Tensor& x = bindings.at(name);
    const Tensor& a = analytic.at(name);
    for (std::size_t j = 0; j < x.numel(); ++j) {
      if (mask && !mask(i, j)) continue;
      const double saved = x[j];
      x[j] = saved + h;
      g.evaluate(bindings);
      const double fp = g.value(loss).item();
      x[j] = saved - h;
      g.evaluate(bindings);
      const double fm = g.value(loss).item();
      x[j] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(a[j] - numeric) / std::max({1.0, std::abs(a[j]), std::abs(numeric)});
      ++report.checked;
      if (report.worst.empty() || err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = name + "[" + std::to_string(j) + "]";
      }
    }
  }
  report.pass = report.checked > 0 && report.max_rel_err <= tol;
  return report;
}

std::vector<OpKind> differentiable_ops() {
  return {OpKind::Add,        OpKind::Sub,           OpKind::Mul,        OpKind::Div,
          OpKind::Square,     OpKind::Sqrt,          OpKind::Negate,     OpKind::Scale,
          OpKind::AddScalar,  OpKind::Sum,           OpKind::Mean,       OpKind::Concat,
          OpKind::Conv3d,     OpKind::Upsample2x,    OpKind::Linear,     OpKind::LeakyRelu,
          OpKind::Sigmoid,    OpKind::Tanh,          OpKind::GroupNorm,  OpKind::GlobalAvgPool,
          OpKind::BoxSum,     OpKind::ForwardDiff,   OpKind::SoftmaxCrossEntropy,
          OpKind::Warp,       OpKind::AffineMatrix,  OpKind::AffineField};
}

GradCheckReport finite_difference_check(OpKind kind, const OpCheckOptions& opt) {
  if (!(opt.h > 0.0 && opt.h <= 1e-2)) throw ConfigError("finite-difference step must lie in (0, 1e-2]");
  Rng rng(opt.seed);
  const double h = opt.h;
  auto run = [&](GraphBuilder build, std::vector<Tensor> inputs) {
    return check_gradients(build, inputs, h, opt.tol, opt.seed);
  };
  const Shape small = pick(opt.shape, {2, 3, 4});

  switch (kind) {
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant: return {};

    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      auto f = kind == OpKind::Add ? add : kind == OpKind::Sub ? sub : mul;
      return run([f](Graph& g, std::span<const Var> v) { return f(g, v[0], v[1]); },
                 {random_tensor(rng, small, -1, 1), random_tensor(rng, small, -1, 1)});
    }
    case OpKind::Div:
      return run([](Graph& g, std::span<const Var> v) { return div(g, v[0], v[1]); },
                 {random_tensor(rng, small, -1, 1), away_from_zero(rng, small, 0.5)});
    case OpKind::Square:
      return run([](Graph& g, std::span<const Var> v) { return square(g, v[0]); }, {random_tensor(rng, small, -1, 1)});
    case OpKind::Sqrt:
      return run([](Graph& g, std::span<const Var> v) { return sqrt(g, v[0]); }, {random_tensor(rng, small, 0.5, 2)});
    case OpKind::Negate:
      return run([](Graph& g, std::span<const Var> v) { return negate(g, v[0]); }, {random_tensor(rng, small, -1, 1)});
    case OpKind::Scale:
      return run([](Graph& g, std::span<const Var> v) { return scale(g, v[0], -1.75); },
                 {random_tensor(rng, small, -1, 1)});
    case OpKind::AddScalar:
      return run([](Graph& g, std::span<const Var> v) { return add_scalar(g, v[0], 0.3); },
                 {random_tensor(rng, small, -1, 1)});
    case OpKind::Sum:
      return run([](Graph& g, std::span<const Var> v) { return sum(g, v[0]); }, {random_tensor(rng, small, -1, 1)});
    case OpKind::Mean:
      return run([](Graph& g, std::span<const Var> v) { return mean(g, v[0]); }, {random_tensor(rng, small, -1, 1)});
    case OpKind::Concat: {
      const Shape a = pick(opt.shape, {1, 2, 3, 3, 3});
      Shape b = a;
      b[1] = 3;
      return run([](Graph& g, std::span<const Var> v) { return concat(g, {v[0], v[1]}, 1); },
                 {random_tensor(rng, a, -1, 1), random_tensor(rng, b, -1, 1)});
    }
    case OpKind::Conv3d: {
      const Shape x = pick(opt.shape, {1, 2, 5, 4, 5});
      const std::int64_t co = 3;
      const int stride = (opt.seed % 2 == 0) ? 1 : 2;
      return run([stride](Graph& g, std::span<const Var> v) { return conv3d(g, v[0], v[1], v[2], stride); },
                 {random_tensor(rng, x, -1, 1), random_tensor(rng, {co, x[1], 3, 3, 3}, -0.5, 0.5),
                  random_tensor(rng, {co}, -0.5, 0.5)});
    }
    case OpKind::Upsample2x:
      return run([](Graph& g, std::span<const Var> v) { return upsample2x(g, v[0]); },
                 {random_tensor(rng, pick(opt.shape, {1, 2, 3, 2, 3}), -1, 1)});
    case OpKind::Linear: {
      const Shape x = pick(opt.shape, {2, 5});
      return run([](Graph& g, std::span<const Var> v) { return linear(g, v[0], v[1], v[2]); },
                 {random_tensor(rng, x, -1, 1), random_tensor(rng, {4, x[1]}, -1, 1), random_tensor(rng, {4}, -1, 1)});
    }
    case OpKind::LeakyRelu:
      // |x| > 2h keeps every perturbed point on one side of the kink.
      return run([](Graph& g, std::span<const Var> v) { return leaky_relu(g, v[0]); },
                 {away_from_zero(rng, small, std::max(0.05, 4 * h))});
    case OpKind::Sigmoid:
      return run([](Graph& g, std::span<const Var> v) { return sigmoid(g, v[0]); }, {random_tensor(rng, small, -3, 3)});
    case OpKind::Tanh:
      return run([](Graph& g, std::span<const Var> v) { return tanh(g, v[0]); }, {random_tensor(rng, small, -2, 2)});
    case OpKind::GroupNorm: {
      const Shape x = pick(opt.shape, {1, 8, 4, 4, 4});
      return run([](Graph& g, std::span<const Var> v) { return group_norm(g, v[0], v[1], v[2], 4); },
                 {random_tensor(rng, x, -1, 1), random_tensor(rng, {x[1]}, 0.5, 1.5),
                  random_tensor(rng, {x[1]}, -0.5, 0.5)});
    }
    case OpKind::GlobalAvgPool:
      return run([](Graph& g, std::span<const Var> v) { return global_avg_pool(g, v[0]); },
                 {random_tensor(rng, pick(opt.shape, {2, 3, 3, 2, 4}), -1, 1)});
    case OpKind::BoxSum:
      return run([](Graph& g, std::span<const Var> v) { return box_sum(g, v[0], 3); },
                 {random_tensor(rng, pick(opt.shape, {1, 1, 5, 4, 6}), -1, 1)});
    case OpKind::ForwardDiff: {
      const std::size_t axis = 2 + opt.seed % 3;
      return run([axis](Graph& g, std::span<const Var> v) { return forward_diff(g, v[0], axis); },
                 {random_tensor(rng, pick(opt.shape, {1, 3, 4, 3, 5}), -1, 1)});
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Shape x = pick(opt.shape, {1, 4, 3, 3, 3});
      Tensor labels({x[0], x[2], x[3], x[4]});
      for (auto& l : labels.data()) l = static_cast<double>(rng.uniform_int(0, x[1] - 1));
      return run([labels](Graph& g, std::span<const Var> v) { return softmax_cross_entropy(g, v[0], labels); },
                 {random_tensor(rng, x, -2, 2)});
    }
    case OpKind::Warp: {
      const Shape src = pick(opt.shape, {1, 2, 4, 5, 4});
      const Shape disp{src[0], 3, src[2], src[3], src[4]};
      // Integer part in {-1, 0, 1}; fractional part kept clear of 0 and 1.
      const double margin = std::max(0.1, 4 * h);
      Tensor u(disp);
      for (auto& v : u.data()) v = static_cast<double>(rng.uniform_int(-1, 1)) + rng.uniform(margin, 1.0 - margin);
      return run([](Graph& g, std::span<const Var> v) { return geometry::warp(g, v[0], v[1]); },
                 {random_tensor(rng, src, -1, 1), std::move(u)});
    }
    case OpKind::AffineMatrix: {
      Tensor p({2, 15});
      for (std::int64_t n = 0; n < 2; ++n) {
        for (int i = 0; i < 15; ++i) {
          const double r = rng.uniform(-0.3, 0.3);
          p[static_cast<std::size_t>(n * 15 + i)] = (i >= 6 && i < 9) ? 1.0 + r : r;
        }
      }
      return run([](Graph& g, std::span<const Var> v) { return geometry::affine_matrix(g, v[0]); }, {std::move(p)});
    }
    case OpKind::AffineField: {
      const geometry::VolumeGrid grid{3, 4, 5};
      Tensor m = random_tensor(rng, {1, 4, 4}, -1, 1);
      return run([grid](Graph& g, std::span<const Var> v) { return geometry::affine_field(g, v[0], grid); },
                 {std::move(m)});
    }
  }
  return {};
}

}  // namespace gvsl::ad
