#include "gvsl/classical.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/optim.hpp"

namespace gvsl::trainer {
namespace {

using geometry::Dvf;

Tensor batched_field(const Dvf& d) {
  Shape s{1};
  s.insert(s.end(), d.field.shape().begin(), d.field.shape().end());
  return d.field.reshaped(s);
}

Dvf unbatched_field(const Tensor& t) { return Dvf(t.reshaped({t.dim(1), t.dim(2), t.dim(3), t.dim(4)})); }

double ncc_under(const Volume& moving, const Volume& fixed, const Dvf& field, const losses::LossConfig& cfg) {
  return losses::local_ncc(geometry::warp_trilinear(moving.data, field), fixed.data, cfg);
}

// Centroid (x, y, z) of the voxels brighter than the mean, weighted by the excess.
std::array<double, 3> foreground_centroid(const Volume& v) {
  const geometry::VolumeGrid g = v.grid();
  const std::size_t nv = g.voxels();
  const double* d = v.data.data().data();
  double mean = 0.0;
  for (std::size_t i = 0; i < nv; ++i) mean += d[i];
  mean /= static_cast<double>(nv);
  std::array<double, 4> acc{};
  std::size_t i = 0;
  for (std::int64_t z = 0; z < g.z; ++z) {
    for (std::int64_t y = 0; y < g.y; ++y) {
      for (std::int64_t x = 0; x < g.x; ++x, ++i) {
        const double w = std::max(d[i] - mean, 0.0);
        acc[0] += w * static_cast<double>(x);
        acc[1] += w * static_cast<double>(y);
        acc[2] += w * static_cast<double>(z);
        acc[3] += w;
      }
    }
  }
  if (!(acc[3] > 0.0)) return {0.0, 0.0, 0.0};
  return {acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]};
}

}  // namespace

void ClassicalConfig::validate() const {
  if (affine_iters < 0 || deform_iters < 0) throw ConfigError("iteration counts must be >= 0");
  for (double v : {lr, translation_unit, linear_unit, deform_lr, coarse_blur}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("classical step sizes must be finite and >= 0");
  }
}

nlohmann::json ClassicalConfig::to_json() const {
  return {{"affine_iters", affine_iters},
          {"deform_iters", deform_iters},
          {"lr", lr},
          {"translation_unit", translation_unit},
          {"linear_unit", linear_unit},
          {"deform_lr", deform_lr},
          {"centroid_init", centroid_init},
          {"coarse_blur", coarse_blur},
          {"smooth_on_fused", smooth_on_fused},
          {"affine_ncc_window", affine_loss.ncc_window},
          {"ncc_window", deform_loss.ncc_window},
          {"ncc_eps", deform_loss.ncc_eps},
          {"smooth_weight", deform_loss.smooth_weight}};
}

ClassicalConfig ClassicalConfig::from_json(const nlohmann::json& j) {
  ClassicalConfig c;
  c.affine_iters = j.value("affine_iters", c.affine_iters);
  c.deform_iters = j.value("deform_iters", c.deform_iters);
  c.lr = j.value("lr", c.lr);
  c.translation_unit = j.value("translation_unit", c.translation_unit);
  c.linear_unit = j.value("linear_unit", c.linear_unit);
  c.deform_lr = j.value("deform_lr", c.deform_lr);
  c.centroid_init = j.value("centroid_init", c.centroid_init);
  c.coarse_blur = j.value("coarse_blur", c.coarse_blur);
  c.smooth_on_fused = j.value("smooth_on_fused", c.smooth_on_fused);
  c.affine_loss.ncc_window = j.value("affine_ncc_window", c.affine_loss.ncc_window);
  c.deform_loss.ncc_window = j.value("ncc_window", c.deform_loss.ncc_window);
  c.deform_loss.ncc_eps = j.value("ncc_eps", c.deform_loss.ncc_eps);
  c.affine_loss.ncc_eps = c.deform_loss.ncc_eps;
  c.deform_loss.smooth_weight = j.value("smooth_weight", c.deform_loss.smooth_weight);
  return c;
}

ClassicalResult classical_register(const Volume& moving, const Volume& fixed, const ClassicalConfig& cfg) {
  cfg.validate();
  if (!(moving.grid() == fixed.grid()) || moving.channels() != fixed.channels()) {
    throw ShapeError("moving and fixed volumes must share one grid");
  }
  const geometry::VolumeGrid grid = moving.grid();
  const Tensor xm = moving.batched();
  const Tensor xf = fixed.batched();
  cfg.affine_loss.validate(xm.shape());
  cfg.deform_loss.validate(xm.shape());

  ClassicalResult res;
  res.initial_ncc = losses::local_ncc(moving.data, fixed.data, cfg.deform_loss);

  // Stage 1: params = identity + unit * raw, one Adam state on raw.
  Tensor unit({1, 15});
  Tensor offset({1, 15});
  for (std::size_t i = 0; i < 15; ++i) {
    unit[i] = (i >= 3 && i < 6) ? cfg.translation_unit : cfg.linear_unit;
    offset[i] = (i >= 6 && i < 9) ? 1.0 : 0.0;
  }
  Tensor raw0({1, 15});
  if (cfg.centroid_init && cfg.translation_unit > 0.0) {
    // Pull warp: fixed(p) = moving(p + t), so t = c_moving - c_fixed.
    const auto cm = foreground_centroid(moving);
    const auto cf = foreground_centroid(fixed);
    for (std::size_t i = 0; i < 3; ++i) raw0[3 + i] = (cm[i] - cf[i]) / cfg.translation_unit;
  }
  // Runs Adam from `start`; returns the best iterate, or the last one when
  // `keep_best` is false (the coarse level only seeds the fine level).
  auto affine_level = [&](const Tensor& mov, const Tensor& fix, const Tensor& start, int iters, bool keep_best) {
    ad::Graph g;
    const ad::Var vm = g.input("moving", mov.shape());
    const ad::Var vf = g.input("fixed", fix.shape());
    const ad::Var raw = g.parameter("raw", {1, 15});
    const ad::Var params = ad::add(g, ad::mul(g, raw, g.constant(unit)), g.constant(offset));
    const ad::Var field = geometry::affine_field(g, geometry::affine_matrix(g, params), grid);
    const ad::Var loss = losses::local_ncc_loss(g, geometry::warp(g, vm, field), vf, cfg.affine_loss);

    ad::Bindings b{{"moving", mov}, {"fixed", fix}, {"raw", start}};
    ad::AdamState st = ad::AdamState::zeros_like(start);
    Tensor best_raw = start;
    double best = std::numeric_limits<double>::infinity();
    for (int it = 0; it <= iters; ++it) {
      g.evaluate(b);
      const double v = g.value(loss).item();
      res.affine_trace.push_back(v);
      if (!std::isfinite(v)) throw NumericalError("non-finite affine loss at iteration " + std::to_string(it));
      if (!keep_best || v < best) {
        best = v;
        best_raw = b.at("raw");
      }
      if (it == iters) break;
      const ad::TensorMap grads = g.backpropagate(loss);
      ad::adam_update(b.at("raw"), grads.at("raw"), st, cfg.lr);
    }
    return best_raw;
  };
  Tensor best_raw = raw0;
  const int coarse_iters = cfg.coarse_blur > 0.0 ? cfg.affine_iters / 2 : 0;
  if (coarse_iters > 0) {
    best_raw = affine_level(gaussian_blur(moving, cfg.coarse_blur).batched(),
                            gaussian_blur(fixed, cfg.coarse_blur).batched(), best_raw, coarse_iters, false);
  }
  best_raw = affine_level(xm, xf, best_raw, cfg.affine_iters - coarse_iters, true);
  std::array<double, 15> flat{};
  for (std::size_t i = 0; i < 15; ++i) flat[i] = offset[i] + unit[i] * best_raw[i];
  res.affine = geometry::AffineParams::from_flat(flat);
  Dvf affine_dvf = geometry::affine_to_dvf(geometry::affine_matrix_from_params(res.affine), grid);
  if (ncc_under(moving, fixed, affine_dvf, cfg.deform_loss) > res.initial_ncc) {
    res.affine = geometry::AffineParams::identity();
    affine_dvf = Dvf(grid);
  }

  // Stage 2: free field composed with the frozen affine displacement.
  res.deform = Dvf(grid);
  res.fused = affine_dvf;
  res.final_ncc = ncc_under(moving, fixed, affine_dvf, cfg.deform_loss);
  {
    ad::Graph g;
    const ad::Var vm = g.input("moving", xm.shape());
    const ad::Var vf = g.input("fixed", xf.shape());
    const ad::Var deform = g.parameter("deform", {1, 3, grid.z, grid.y, grid.x});
    const ad::Var fused = geometry::compose(g, g.constant(batched_field(affine_dvf)), deform);
    const ad::Var ncc = losses::local_ncc_loss(g, geometry::warp(g, vm, fused), vf, cfg.deform_loss);
    const ad::Var smooth = losses::smoothness_loss(g, cfg.smooth_on_fused ? fused : deform);
    const ad::Var total = losses::gvsl_total(g, ncc, smooth, cfg.deform_loss);

    ad::Bindings b{{"moving", xm}, {"fixed", xf}, {"deform", Tensor({1, 3, grid.z, grid.y, grid.x})}};
    ad::AdamState st = ad::AdamState::zeros_like(b.at("deform"));
    double best = std::numeric_limits<double>::infinity();
    for (int it = 0; it <= cfg.deform_iters; ++it) {
      g.evaluate(b);
      const double t = g.value(total).item();
      const double n = g.value(ncc).item();
      res.deform_trace.push_back(t);
      if (t < best && n <= res.initial_ncc) {
        best = t;
        res.deform = unbatched_field(b.at("deform"));
        res.fused = unbatched_field(g.value(fused));
        res.final_ncc = n;
      }
      if (it == cfg.deform_iters) break;
      const ad::TensorMap grads = g.backpropagate(total);
      ad::adam_update(b.at("deform"), grads.at("deform"), st, cfg.deform_lr);
    }
  }
  return res;
}

}  // namespace gvsl::trainer
