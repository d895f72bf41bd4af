#include "gvsl/losses.hpp"

#include <algorithm>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"

namespace gvsl::losses {

using namespace gvsl::ad;

void LossConfig::validate(const Shape& s) const {
  if (s.size() != 5) throw ShapeError("loss inputs must be [N,C,Z,Y,X], got " + to_string(s));
  const auto min_extent = std::min({s[2], s[3], s[4]});
  if (ncc_window % 2 == 0 || ncc_window < 3 || ncc_window > min_extent) {
    throw ConfigError("ncc window " + std::to_string(ncc_window) + " must be odd and within [3, " +
                      std::to_string(min_extent) + "]");
  }
  if (!(ncc_eps > 0.0)) throw ConfigError("ncc epsilon must be positive");
  if (!(smooth_weight >= 0.0)) throw ConfigError("smooth weight must be non-negative");
}

namespace {

// 1 / (number of in-volume voxels in the window centred at each voxel).
Tensor inverse_window_counts(const Shape& s, int window) {
  const int r = window / 2;
  auto clipped = [r](std::int64_t i, std::int64_t n) {
    return std::min<std::int64_t>(n - 1, i + r) - std::max<std::int64_t>(0, i - r) + 1;
  };
  Tensor out(s);
  const std::int64_t Z = s[2], Y = s[3], X = s[4];
  const std::size_t vox = static_cast<std::size_t>(Z * Y * X);
  for (std::int64_t bc = 0; bc < s[0] * s[1]; ++bc) {
    std::size_t i = static_cast<std::size_t>(bc) * vox;
    for (std::int64_t z = 0; z < Z; ++z) {
      for (std::int64_t y = 0; y < Y; ++y) {
        for (std::int64_t x = 0; x < X; ++x, ++i) {
          out[i] = 1.0 / static_cast<double>(clipped(z, Z) * clipped(y, Y) * clipped(x, X));
        }
      }
    }
  }
  return out;
}

Tensor as5d(const Tensor& t) {
  if (t.rank() == 5) return t;
  if (t.rank() == 4) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2), t.dim(3)});
  throw ShapeError("expected [C,Z,Y,X] or [N,C,Z,Y,X], got " + to_string(t.shape()));
}

}  // namespace

Var local_ncc_loss(Graph& g, Var warped, Var fixed, const LossConfig& cfg) {
  const Shape s = g.shape(warped);
  if (s != g.shape(fixed)) {
    throw ShapeError("local_ncc_loss: " + to_string(s) + " vs " + to_string(g.shape(fixed)));
  }
  cfg.validate(s);
  const int n = cfg.ncc_window;
  const Var inv_count = g.constant(inverse_window_counts(s, n));

  const Var i_sum = box_sum(g, warped, n);
  const Var j_sum = box_sum(g, fixed, n);
  const Var i2_sum = box_sum(g, mul(g, warped, warped), n);
  const Var j2_sum = box_sum(g, mul(g, fixed, fixed), n);
  const Var ij_sum = box_sum(g, mul(g, warped, fixed), n);

  const Var cross = sub(g, ij_sum, mul(g, mul(g, i_sum, j_sum), inv_count));
  const Var i_var = sub(g, i2_sum, mul(g, mul(g, i_sum, i_sum), inv_count));
  const Var j_var = sub(g, j2_sum, mul(g, mul(g, j_sum, j_sum), inv_count));

  const Var cc = div(g, mul(g, cross, cross), add_scalar(g, mul(g, i_var, j_var), cfg.ncc_eps));
  return negate(g, mean(g, cc));
}

Var smoothness_loss(Graph& g, Var displacement) {
  const Shape s = g.shape(displacement);
  if (s.size() != 5 || s[1] != 3) throw ShapeError("smoothness_loss expects [N,3,Z,Y,X], got " + to_string(s));
  if (s[2] < 2 || s[3] < 2 || s[4] < 2) throw ShapeError("smoothness_loss needs extents >= 2");
  Var total = sum(g, square(g, forward_diff(g, displacement, 2)));
  total = add(g, total, sum(g, square(g, forward_diff(g, displacement, 3))));
  total = add(g, total, sum(g, square(g, forward_diff(g, displacement, 4))));
  return scale(g, total, 1.0 / static_cast<double>(s[0] * s[2] * s[3] * s[4]));
}

Var restoration_mse(Graph& g, Var restored, Var original) {
  if (g.shape(restored) != g.shape(original)) {
    throw ShapeError("restoration_mse: " + to_string(g.shape(restored)) + " vs " + to_string(g.shape(original)));
  }
  return mean(g, square(g, sub(g, restored, original)));
}

Var gvsl_total(Graph& g, Var ncc, Var smooth, const LossConfig& cfg) {
  if (numel(g.shape(ncc)) != 1 || numel(g.shape(smooth)) != 1) throw ShapeError("gvsl_total expects scalar nodes");
  return add(g, ncc, scale(g, smooth, cfg.smooth_weight));
}

double local_ncc(const Tensor& warped, const Tensor& fixed, const LossConfig& cfg) {
  const Tensor a = as5d(warped), b = as5d(fixed);
  Graph g;
  const Var va = g.input("a", a.shape());
  const Var vb = g.input("b", b.shape());
  g.mark_output("loss", local_ncc_loss(g, va, vb, cfg));
  return g.evaluate({{"a", a}, {"b", b}}).at("loss").item();
}

double smoothness(const geometry::Dvf& dvf) {
  const Tensor f = as5d(dvf.field);
  Graph g;
  const Var v = g.input("u", f.shape());
  g.mark_output("loss", smoothness_loss(g, v));
  return g.evaluate({{"u", f}}).at("loss").item();
}

double mse(const Tensor& restored, const Tensor& original) {
  Graph g;
  const Var a = g.input("a", restored.shape());
  const Var b = g.input("b", original.shape());
  g.mark_output("loss", restoration_mse(g, a, b));
  return g.evaluate({{"a", restored}, {"b", original}}).at("loss").item();
}

}  // namespace gvsl::losses
