#include <Eigen/Core>
#include <algorithm>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"

namespace gvsl::ad {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;

// Upper bound on im2col buffer elements per chunk (1 MB of doubles, cache sized).
constexpr std::size_t kMaxColumnElements = std::size_t{1} << 17;

struct ConvGeometry {
  std::int64_t n, ci, zi, yi, xi;
  std::int64_t co, k, stride, pad;
  std::int64_t zo, yo, xo;

  std::int64_t rows() const { return ci * k * k * k; }
  std::int64_t plane() const { return yo * xo; }
  std::int64_t out_voxels() const { return zo * yo * xo; }
  std::int64_t in_voxels() const { return zi * yi * xi; }

  /// Output z-slices per im2col chunk.
  std::int64_t chunk_slices() const {
    const auto per_slice = static_cast<std::size_t>(rows() * plane());
    return std::clamp<std::int64_t>(static_cast<std::int64_t>(kMaxColumnElements / std::max<std::size_t>(per_slice, 1)),
                                    1, zo);
  }
};

ConvGeometry geometry_of(const Shape& x, const Shape& w, int stride) {
  if (x.size() != 5) throw ShapeError("conv3d input must be [N,C,Z,Y,X], got " + to_string(x));
  if (w.size() != 5 || w[2] != w[3] || w[3] != w[4] || w[2] % 2 == 0) {
    throw ShapeError("conv3d weight must be [Co,Ci,k,k,k] with odd k, got " + to_string(w));
  }
  if (w[1] != x[1]) {
    throw ShapeError("conv3d: weight expects " + std::to_string(w[1]) + " input channels, input has " +
                     std::to_string(x[1]));
  }
  if (stride != 1 && stride != 2) throw ConfigError("conv3d stride must be 1 or 2");
  ConvGeometry g{};
  g.n = x[0];
  g.ci = x[1];
  g.zi = x[2];
  g.yi = x[3];
  g.xi = x[4];
  g.co = w[0];
  g.k = w[2];
  g.stride = stride;
  g.pad = g.k / 2;
  auto out_extent = [&](std::int64_t in) { return (in + 2 * g.pad - g.k) / g.stride + 1; };
  g.zo = out_extent(g.zi);
  g.yo = out_extent(g.yi);
  g.xo = out_extent(g.xi);
  return g;
}

// Range of output x whose input column ox * stride - pad + kx lies in [0, xi).
struct XRange {
  std::int64_t lo, hi;
};
XRange valid_x(const ConvGeometry& g, std::int64_t kx) {
  const std::int64_t off = kx - g.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = (g.xi - 1 - off) >= 0 ? (g.xi - 1 - off) / g.stride + 1 : 0;
  hi = std::min(hi, g.xo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// Column buffer layout: row r = (c, kz, ky, kx), column = output voxel within
// the chunk [z0, z0 + nz).
void im2col(const ConvGeometry& g, const double* in, std::int64_t z0, std::int64_t nz, double* col) {
  const std::int64_t cols = nz * g.plane();
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < g.ci; ++c) {
    const double* src = in + c * g.in_voxels();
    for (std::int64_t kz = 0; kz < g.k; ++kz) {
      for (std::int64_t ky = 0; ky < g.k; ++ky) {
        for (std::int64_t kx = 0; kx < g.k; ++kx, ++r) {
          double* dst = col + r * cols;
          const XRange xr = valid_x(g, kx);
          const std::int64_t off = kx - g.pad;
          for (std::int64_t oz = 0; oz < nz; ++oz) {
            const std::int64_t iz = (z0 + oz) * g.stride - g.pad + kz;
            for (std::int64_t oy = 0; oy < g.yo; ++oy) {
              double* d = dst + (oz * g.yo + oy) * g.xo;
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iz < 0 || iz >= g.zi || iy < 0 || iy >= g.yi) {
                std::fill_n(d, g.xo, 0.0);
                continue;
              }
              const double* s = src + (iz * g.yi + iy) * g.xi + off;
              std::fill(d, d + xr.lo, 0.0);
              if (g.stride == 1) {
                std::copy(s + xr.lo, s + xr.hi, d + xr.lo);
              } else {
                for (std::int64_t ox = xr.lo; ox < xr.hi; ++ox) d[ox] = s[ox * g.stride];
              }
              std::fill(d + xr.hi, d + g.xo, 0.0);
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, std::int64_t z0, std::int64_t nz, double* grad_in) {
  const std::int64_t cols = nz * g.plane();
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < g.ci; ++c) {
    double* dst = grad_in + c * g.in_voxels();
    for (std::int64_t kz = 0; kz < g.k; ++kz) {
      for (std::int64_t ky = 0; ky < g.k; ++ky) {
        for (std::int64_t kx = 0; kx < g.k; ++kx, ++r) {
          const double* src = col + r * cols;
          const XRange xr = valid_x(g, kx);
          const std::int64_t off = kx - g.pad;
          for (std::int64_t oz = 0; oz < nz; ++oz) {
            const std::int64_t iz = (z0 + oz) * g.stride - g.pad + kz;
            if (iz < 0 || iz >= g.zi) continue;
            for (std::int64_t oy = 0; oy < g.yo; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.yi) continue;
              const double* s = src + (oz * g.yo + oy) * g.xo;
              double* d = dst + (iz * g.yi + iy) * g.xi + off;
              if (g.stride == 1) {
                for (std::int64_t ox = xr.lo; ox < xr.hi; ++ox) d[ox] += s[ox];
              } else {
                for (std::int64_t ox = xr.lo; ox < xr.hi; ++ox) d[ox * g.stride] += s[ox];
              }
            }
          }
        }
      }
    }
  }
}

class Conv3dOp final : public Op {
 public:
  explicit Conv3dOp(int stride) : stride_(stride) {}
  OpKind kind() const override { return OpKind::Conv3d; }

  Shape output_shape(std::span<const Shape> in) const override {
    const ConvGeometry g = geometry_of(in[0], in[1], stride_);
    if (in[2] != Shape{g.co}) throw ShapeError("conv3d bias must be [Co], got " + to_string(in[2]));
    return {g.n, g.co, g.zo, g.yo, g.xo};
  }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor &x = *in[0], &w = *in[1], &b = *in[2];
    const ConvGeometry g = geometry_of(x.shape(), w.shape(), stride_);
    Tensor out({g.n, g.co, g.zo, g.yo, g.xo});
    const std::int64_t chunk = g.chunk_slices();
    std::vector<double> col(static_cast<std::size_t>(g.rows() * chunk * g.plane()));
    Eigen::Map<const RowMatrix> W(w.data().data(), g.co, g.rows());
    for (std::int64_t s = 0; s < g.n; ++s) {
      const double* xin = x.data().data() + s * g.ci * g.in_voxels();
      double* yout = out.data().data() + s * g.co * g.out_voxels();
      for (std::int64_t z0 = 0; z0 < g.zo; z0 += chunk) {
        const std::int64_t nz = std::min(chunk, g.zo - z0);
        const std::int64_t cols = nz * g.plane();
        im2col(g, xin, z0, nz, col.data());
        Eigen::Map<const RowMatrix> C(col.data(), g.rows(), cols);
        Eigen::Map<RowMatrix, 0, Strided> O(yout + z0 * g.plane(), g.co, cols, Strided(g.out_voxels()));
        O.noalias() = W * C;
      }
      for (std::int64_t c = 0; c < g.co; ++c) {
        double* row = yout + c * g.out_voxels();
        for (std::int64_t v = 0; v < g.out_voxels(); ++v) row[v] += b[static_cast<std::size_t>(c)];
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out,
                std::span<Tensor* const> grads) const override {
    const Tensor &x = *in[0], &w = *in[1];
    const ConvGeometry g = geometry_of(x.shape(), w.shape(), stride_);
    const std::int64_t chunk = g.chunk_slices();
    std::vector<double> col(static_cast<std::size_t>(g.rows() * chunk * g.plane()));
    Eigen::Map<const RowMatrix> W(w.data().data(), g.co, g.rows());
    for (std::int64_t s = 0; s < g.n; ++s) {
      const double* xin = x.data().data() + s * g.ci * g.in_voxels();
      const double* gout = grad_out.data().data() + s * g.co * g.out_voxels();
      if (grads[2]) {
        for (std::int64_t c = 0; c < g.co; ++c) {
          double acc = 0.0;
          const double* row = gout + c * g.out_voxels();
          for (std::int64_t v = 0; v < g.out_voxels(); ++v) acc += row[v];
          (*grads[2])[static_cast<std::size_t>(c)] += acc;
        }
      }
      for (std::int64_t z0 = 0; z0 < g.zo; z0 += chunk) {
        const std::int64_t nz = std::min(chunk, g.zo - z0);
        const std::int64_t cols = nz * g.plane();
        Eigen::Map<const RowMatrix, 0, Strided> G(gout + z0 * g.plane(), g.co, cols, Strided(g.out_voxels()));
        if (grads[1]) {
          im2col(g, xin, z0, nz, col.data());
          Eigen::Map<const RowMatrix> C(col.data(), g.rows(), cols);
          Eigen::Map<RowMatrix> dW(grads[1]->data().data(), g.co, g.rows());
          dW.noalias() += G * C.transpose();
        }
        if (grads[0]) {
          Eigen::Map<RowMatrix> dC(col.data(), g.rows(), cols);
          dC.noalias() = W.transpose() * G;
          col2im(g, col.data(), z0, nz, grads[0]->data().data() + s * g.ci * g.in_voxels());
        }
      }
    }
  }

 private:
  int stride_;
};

}  // namespace

Var conv3d(Graph& g, Var x, Var weight, Var bias, int stride) {
  return g.apply(std::make_unique<Conv3dOp>(stride), {x, weight, bias});
}

}  // namespace gvsl::ad
