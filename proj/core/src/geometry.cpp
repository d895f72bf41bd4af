#include "gvsl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"

namespace gvsl::geometry {

void VolumeGrid::validate() const {
  if (z < 2 || y < 2 || x < 2) {
    throw ShapeError("grid extents must be >= 2 per axis, got " + std::to_string(z) + "x" + std::to_string(y) +
                     "x" + std::to_string(x));
  }
}

// ---------------------------------------------------------------------------
// Affine parameters and matrices.

std::array<double, 15> AffineParams::flatten() const {
  std::array<double, 15> out{};
  std::copy(rotation.begin(), rotation.end(), out.begin());
  std::copy(translation.begin(), translation.end(), out.begin() + 3);
  std::copy(scaling.begin(), scaling.end(), out.begin() + 6);
  std::copy(shearing.begin(), shearing.end(), out.begin() + 9);
  return out;
}

AffineParams AffineParams::from_flat(std::span<const double> v) {
  if (v.size() != 15) throw ShapeError("affine parameters need 15 values, got " + std::to_string(v.size()));
  AffineParams p;
  std::copy(v.begin(), v.begin() + 3, p.rotation.begin());
  std::copy(v.begin() + 3, v.begin() + 6, p.translation.begin());
  std::copy(v.begin() + 6, v.begin() + 9, p.scaling.begin());
  std::copy(v.begin() + 9, v.end(), p.shearing.begin());
  return p;
}

void AffineParams::validate() const {
  for (double v : flatten()) {
    if (!std::isfinite(v)) throw NumericalError("affine parameters must be finite");
  }
  for (double s : scaling) {
    if (s <= 0.0) throw NumericalError("affine scale must be positive, got " + std::to_string(s));
  }
}

AffineMatrix AffineMatrix::identity() {
  AffineMatrix m;
  for (int i = 0; i < 4; ++i) m(i, i) = 1.0;
  return m;
}

AffineMatrix AffineMatrix::translation(double tx, double ty, double tz) {
  AffineMatrix m = identity();
  m(0, 3) = tx;
  m(1, 3) = ty;
  m(2, 3) = tz;
  return m;
}

AffineMatrix AffineMatrix::operator*(const AffineMatrix& rhs) const {
  AffineMatrix out;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += (*this)(r, k) * rhs(k, c);
      out(r, c) = s;
    }
  }
  return out;
}

std::array<double, 3> AffineMatrix::apply(const std::array<double, 3>& p) const {
  std::array<double, 3> out{};
  for (int r = 0; r < 3; ++r) {
    out[static_cast<std::size_t>(r)] =
        (*this)(r, 0) * p[0] + (*this)(r, 1) * p[1] + (*this)(r, 2) * p[2] + (*this)(r, 3);
  }
  return out;
}

double AffineMatrix::linear_determinant() const {
  const auto& a = *this;
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

AffineMatrix AffineMatrix::inverse() const {
  validate();
  const auto& a = *this;
  const double det = linear_determinant();
  AffineMatrix inv = identity();
  inv(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / det;
  inv(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / det;
  inv(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / det;
  inv(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / det;
  inv(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / det;
  inv(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / det;
  inv(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / det;
  inv(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / det;
  inv(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / det;
  for (int r = 0; r < 3; ++r) {
    inv(r, 3) = -(inv(r, 0) * a(0, 3) + inv(r, 1) * a(1, 3) + inv(r, 2) * a(2, 3));
  }
  return inv;
}

void AffineMatrix::validate() const {
  if ((*this)(3, 0) != 0.0 || (*this)(3, 1) != 0.0 || (*this)(3, 2) != 0.0 || (*this)(3, 3) != 1.0) {
    throw NumericalError("affine matrix last row must be [0,0,0,1]");
  }
  for (double v : m_) {
    if (!std::isfinite(v)) throw NumericalError("affine matrix has non-finite entries");
  }
  if (linear_determinant() == 0.0) throw NumericalError("affine matrix is singular");
}

namespace {

AffineMatrix rot_x(double t, bool derivative = false) {
  AffineMatrix m = derivative ? AffineMatrix{} : AffineMatrix::identity();
  const double c = std::cos(t), s = std::sin(t);
  if (derivative) {
    m(1, 1) = -s;
    m(1, 2) = -c;
    m(2, 1) = c;
    m(2, 2) = -s;
  } else {
    m(1, 1) = c;
    m(1, 2) = -s;
    m(2, 1) = s;
    m(2, 2) = c;
  }
  return m;
}

AffineMatrix rot_y(double t, bool derivative = false) {
  AffineMatrix m = derivative ? AffineMatrix{} : AffineMatrix::identity();
  const double c = std::cos(t), s = std::sin(t);
  if (derivative) {
    m(0, 0) = -s;
    m(0, 2) = c;
    m(2, 0) = -c;
    m(2, 2) = -s;
  } else {
    m(0, 0) = c;
    m(0, 2) = s;
    m(2, 0) = -s;
    m(2, 2) = c;
  }
  return m;
}

AffineMatrix rot_z(double t, bool derivative = false) {
  AffineMatrix m = derivative ? AffineMatrix{} : AffineMatrix::identity();
  const double c = std::cos(t), s = std::sin(t);
  if (derivative) {
    m(0, 0) = -s;
    m(0, 1) = -c;
    m(1, 0) = c;
    m(1, 1) = -s;
  } else {
    m(0, 0) = c;
    m(0, 1) = -s;
    m(1, 0) = s;
    m(1, 1) = c;
  }
  return m;
}

AffineMatrix scaling_matrix(const std::array<double, 3>& s) {
  AffineMatrix m = AffineMatrix::identity();
  m(0, 0) = s[0];
  m(1, 1) = s[1];
  m(2, 2) = s[2];
  return m;
}

// Shear entries (row, col) for sh_xy, sh_xz, sh_yx, sh_yz, sh_zx, sh_zy.
constexpr std::array<std::pair<int, int>, 6> kShearSlots{{{1, 0}, {2, 0}, {0, 1}, {2, 1}, {0, 2}, {1, 2}}};

AffineMatrix shearing_matrix(const std::array<double, 6>& sh) {
  AffineMatrix m = AffineMatrix::identity();
  for (std::size_t i = 0; i < 6; ++i) m(kShearSlots[i].first, kShearSlots[i].second) = sh[i];
  return m;
}

}  // namespace

AffineMatrix rotation_matrix(double theta_x, double theta_y, double theta_z) {
  return rot_z(theta_z) * rot_y(theta_y) * rot_x(theta_x);
}

AffineMatrix affine_matrix_from_params(const AffineParams& p) {
  p.validate();
  return rotation_matrix(p.rotation[0], p.rotation[1], p.rotation[2]) * scaling_matrix(p.scaling) *
         shearing_matrix(p.shearing) * AffineMatrix::translation(p.translation[0], p.translation[1], p.translation[2]);
}

AffineJacobian affine_matrix_jacobian(std::span<const double> flat) {
  const AffineParams p = AffineParams::from_flat(flat);
  p.validate();
  const auto& th = p.rotation;
  const AffineMatrix rx = rot_x(th[0]), ry = rot_y(th[1]), rz = rot_z(th[2]);
  const AffineMatrix r = rz * ry * rx;
  const AffineMatrix s = scaling_matrix(p.scaling);
  const AffineMatrix sh = shearing_matrix(p.shearing);
  const AffineMatrix t = AffineMatrix::translation(p.translation[0], p.translation[1], p.translation[2]);
  const AffineMatrix tail = s * sh * t;

  AffineJacobian out;
  out.matrix = r * tail;
  out.d[0] = rz * ry * rot_x(th[0], true) * tail;
  out.d[1] = rz * rot_y(th[1], true) * rx * tail;
  out.d[2] = rot_z(th[2], true) * ry * rx * tail;
  const AffineMatrix rs_sh = r * s * sh;
  for (int i = 0; i < 3; ++i) {
    AffineMatrix dt;
    dt(i, 3) = 1.0;
    out.d[static_cast<std::size_t>(3 + i)] = rs_sh * dt;
  }
  const AffineMatrix sh_t = sh * t;
  for (int i = 0; i < 3; ++i) {
    AffineMatrix ds;
    ds(i, i) = 1.0;
    out.d[static_cast<std::size_t>(6 + i)] = r * ds * sh_t;
  }
  const AffineMatrix r_s = r * s;
  for (std::size_t i = 0; i < 6; ++i) {
    AffineMatrix dsh;
    dsh(kShearSlots[i].first, kShearSlots[i].second) = 1.0;
    out.d[9 + i] = r_s * dsh * t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Displacement fields.

Dvf::Dvf(const VolumeGrid& grid) : field({3, grid.z, grid.y, grid.x}) {}

Dvf::Dvf(Tensor values, std::array<double, 3> sp) : field(std::move(values)), spacing(sp) {
  if (field.rank() != 4 || field.dim(0) != 3) {
    throw ShapeError("displacement field must be [3,Z,Y,X], got " + to_string(field.shape()));
  }
}

VolumeGrid Dvf::grid() const { return {field.dim(1), field.dim(2), field.dim(3)}; }

std::array<double, 3> Dvf::at(std::int64_t x, std::int64_t y, std::int64_t z) const {
  const VolumeGrid gr = grid();
  const auto n = gr.voxels();
  const auto i = static_cast<std::size_t>((z * gr.y + y) * gr.x + x);
  return {field[i], field[n + i], field[2 * n + i]};
}

namespace {

void fill_affine_displacement(const AffineMatrix& m, const VolumeGrid& grid, double* out) {
  const auto c = grid.center();
  const std::size_t n = grid.voxels();
  std::size_t i = 0;
  for (std::int64_t z = 0; z < grid.z; ++z) {
    for (std::int64_t y = 0; y < grid.y; ++y) {
      for (std::int64_t x = 0; x < grid.x; ++x, ++i) {
        const double q[3] = {static_cast<double>(x) - c[0], static_cast<double>(y) - c[1],
                             static_cast<double>(z) - c[2]};
        for (int r = 0; r < 3; ++r) {
          const double mapped = m(r, 0) * q[0] + m(r, 1) * q[1] + m(r, 2) * q[2] + m(r, 3);
          out[static_cast<std::size_t>(r) * n + i] = mapped - q[r];
        }
      }
    }
  }
}

}  // namespace

Dvf affine_to_dvf(const AffineMatrix& matrix, const VolumeGrid& grid) {
  grid.validate();
  Dvf d(grid);
  fill_affine_displacement(matrix, grid, d.field.data().data());
  return d;
}

// ---------------------------------------------------------------------------
// Trilinear sampling.

namespace {

struct Corners {
  std::int64_t x0, y0, z0;
  double fx, fy, fz;
};

inline Corners locate(double sx, double sy, double sz) {
  const double fx0 = std::floor(sx), fy0 = std::floor(sy), fz0 = std::floor(sz);
  return {static_cast<std::int64_t>(fx0), static_cast<std::int64_t>(fy0), static_cast<std::int64_t>(fz0), sx - fx0,
          sy - fy0, sz - fz0};
}

void check_warp_shapes(const Shape& src, const Shape& disp) {
  if (src.size() != 5 || disp.size() != 5 || disp[1] != 3 || src[0] != disp[0] || src[2] != disp[2] ||
      src[3] != disp[3] || src[4] != disp[4]) {
    throw ShapeError("warp: source " + to_string(src) + " vs displacement " + to_string(disp));
  }
}

}  // namespace

Tensor warp_forward(const Tensor& source, const Tensor& displacement) {
  check_warp_shapes(source.shape(), displacement.shape());
  const auto& s = source.shape();
  const std::int64_t nb = s[0], nc = s[1], Z = s[2], Y = s[3], X = s[4];
  const std::size_t vox = static_cast<std::size_t>(Z * Y * X);
  Tensor out(s);
  for (std::int64_t b = 0; b < nb; ++b) {
    const double* u = displacement.data().data() + static_cast<std::size_t>(b) * 3 * vox;
    const double* src = source.data().data() + static_cast<std::size_t>(b * nc) * vox;
    double* dst = out.data().data() + static_cast<std::size_t>(b * nc) * vox;
    std::size_t i = 0;
    for (std::int64_t z = 0; z < Z; ++z) {
      for (std::int64_t y = 0; y < Y; ++y) {
        for (std::int64_t x = 0; x < X; ++x, ++i) {
          const Corners k = locate(static_cast<double>(x) + u[i], static_cast<double>(y) + u[vox + i],
                                   static_cast<double>(z) + u[2 * vox + i]);
          for (int dz = 0; dz < 2; ++dz) {
            const std::int64_t zz = k.z0 + dz;
            if (zz < 0 || zz >= Z) continue;
            const double wz = dz ? k.fz : 1.0 - k.fz;
            for (int dy = 0; dy < 2; ++dy) {
              const std::int64_t yy = k.y0 + dy;
              if (yy < 0 || yy >= Y) continue;
              const double wy = dy ? k.fy : 1.0 - k.fy;
              for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t xx = k.x0 + dx;
                if (xx < 0 || xx >= X) continue;
                const double w = wz * wy * (dx ? k.fx : 1.0 - k.fx);
                const std::size_t q = static_cast<std::size_t>((zz * Y + yy) * X + xx);
                for (std::int64_t c = 0; c < nc; ++c) {
                  dst[static_cast<std::size_t>(c) * vox + i] += w * src[static_cast<std::size_t>(c) * vox + q];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

void warp_backward(const Tensor& source, const Tensor& displacement, const Tensor& grad_out, Tensor* grad_source,
                   Tensor* grad_displacement) {
  const auto& s = source.shape();
  const std::int64_t nb = s[0], nc = s[1], Z = s[2], Y = s[3], X = s[4];
  const std::size_t vox = static_cast<std::size_t>(Z * Y * X);
  for (std::int64_t b = 0; b < nb; ++b) {
    const double* u = displacement.data().data() + static_cast<std::size_t>(b) * 3 * vox;
    const double* src = source.data().data() + static_cast<std::size_t>(b * nc) * vox;
    const double* g = grad_out.data().data() + static_cast<std::size_t>(b * nc) * vox;
    double* gs = grad_source ? grad_source->data().data() + static_cast<std::size_t>(b * nc) * vox : nullptr;
    double* gu = grad_displacement ? grad_displacement->data().data() + static_cast<std::size_t>(b) * 3 * vox : nullptr;
    std::size_t i = 0;
    for (std::int64_t z = 0; z < Z; ++z) {
      for (std::int64_t y = 0; y < Y; ++y) {
        for (std::int64_t x = 0; x < X; ++x, ++i) {
          const Corners k = locate(static_cast<double>(x) + u[i], static_cast<double>(y) + u[vox + i],
                                   static_cast<double>(z) + u[2 * vox + i]);
          double dux = 0.0, duy = 0.0, duz = 0.0;
          for (int dz = 0; dz < 2; ++dz) {
            const std::int64_t zz = k.z0 + dz;
            if (zz < 0 || zz >= Z) continue;
            const double wz = dz ? k.fz : 1.0 - k.fz;
            const double sz = dz ? 1.0 : -1.0;
            for (int dy = 0; dy < 2; ++dy) {
              const std::int64_t yy = k.y0 + dy;
              if (yy < 0 || yy >= Y) continue;
              const double wy = dy ? k.fy : 1.0 - k.fy;
              const double sy = dy ? 1.0 : -1.0;
              for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t xx = k.x0 + dx;
                if (xx < 0 || xx >= X) continue;
                const double wx = dx ? k.fx : 1.0 - k.fx;
                const double sx = dx ? 1.0 : -1.0;
                const std::size_t q = static_cast<std::size_t>((zz * Y + yy) * X + xx);
                double gv = 0.0;
                for (std::int64_t c = 0; c < nc; ++c) {
                  const double gc = g[static_cast<std::size_t>(c) * vox + i];
                  if (gs) gs[static_cast<std::size_t>(c) * vox + q] += wz * wy * wx * gc;
                  gv += gc * src[static_cast<std::size_t>(c) * vox + q];
                }
                dux += gv * sx * wy * wz;
                duy += gv * wx * sy * wz;
                duz += gv * wx * wy * sz;
              }
            }
          }
          if (gu) {
            gu[i] += dux;
            gu[vox + i] += duy;
            gu[2 * vox + i] += duz;
          }
        }
      }
    }
  }
}

Tensor warp_trilinear(const Tensor& source, const Dvf& dvf) {
  if (source.rank() != 4) throw ShapeError("warp_trilinear source must be [C,Z,Y,X], got " + to_string(source.shape()));
  const Shape s = source.shape();
  Tensor out = warp_forward(source.reshaped({1, s[0], s[1], s[2], s[3]}),
                            dvf.field.reshaped({1, 3, dvf.field.dim(1), dvf.field.dim(2), dvf.field.dim(3)}));
  return std::move(out).reshaped(s);
}

std::vector<std::int32_t> warp_labels_nearest(std::span<const std::int32_t> labels, const VolumeGrid& grid,
                                              const Dvf& dvf, std::int32_t fill) {
  if (labels.size() != grid.voxels() || !(dvf.grid() == grid)) throw ShapeError("warp_labels_nearest: grid mismatch");
  std::vector<std::int32_t> out(labels.size(), fill);
  std::size_t i = 0;
  for (std::int64_t z = 0; z < grid.z; ++z) {
    for (std::int64_t y = 0; y < grid.y; ++y) {
      for (std::int64_t x = 0; x < grid.x; ++x, ++i) {
        const auto u = dvf.at(x, y, z);
        const auto sx = static_cast<std::int64_t>(std::lround(static_cast<double>(x) + u[0]));
        const auto sy = static_cast<std::int64_t>(std::lround(static_cast<double>(y) + u[1]));
        const auto sz = static_cast<std::int64_t>(std::lround(static_cast<double>(z) + u[2]));
        if (sx < 0 || sx >= grid.x || sy < 0 || sy >= grid.y || sz < 0 || sz >= grid.z) continue;
        out[i] = labels[static_cast<std::size_t>((sz * grid.y + sy) * grid.x + sx)];
      }
    }
  }
  return out;
}

Dvf compose_dvf(const AffineMatrix& affine, const Dvf& deform) {
  const VolumeGrid grid = deform.grid();
  const Dvf a = affine_to_dvf(affine, grid);
  const Shape s5{1, 3, grid.z, grid.y, grid.x};
  Tensor sampled = warp_forward(deform.field.reshaped(s5), a.field.reshaped(s5));
  Dvf out(std::move(sampled).reshaped({3, grid.z, grid.y, grid.x}), deform.spacing);
  for (std::size_t i = 0; i < out.field.numel(); ++i) out.field[i] += a.field[i];
  return out;
}

Tensor jacobian_determinant(const Dvf& dvf) {
  const VolumeGrid g = dvf.grid();
  g.validate();
  const std::size_t n = g.voxels();
  const std::int64_t strides[3] = {1, g.x, g.x * g.y};
  const std::int64_t extents[3] = {g.x, g.y, g.z};
  Tensor det({g.z, g.y, g.x});
  std::size_t i = 0;
  for (std::int64_t z = 0; z < g.z; ++z) {
    for (std::int64_t y = 0; y < g.y; ++y) {
      for (std::int64_t x = 0; x < g.x; ++x, ++i) {
        const std::int64_t pos[3] = {x, y, z};
        double j[3][3];
        for (int c = 0; c < 3; ++c) {
          for (int a = 0; a < 3; ++a) {
            double d = 0.0;
            if (pos[a] + 1 < extents[a]) {
              const double* f = dvf.field.data().data() + static_cast<std::size_t>(c) * n;
              d = f[i + static_cast<std::size_t>(strides[a])] - f[i];
            }
            j[c][a] = d + (c == a ? 1.0 : 0.0);
          }
        }
        det[i] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                 j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
      }
    }
  }
  return det;
}

// ---------------------------------------------------------------------------
// Graph ops.

namespace {

class WarpOp final : public ad::Op {
 public:
  ad::OpKind kind() const override { return ad::OpKind::Warp; }
  Shape output_shape(std::span<const Shape> in) const override {
    check_warp_shapes(in[0], in[1]);
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) const override { return warp_forward(*in[0], *in[1]); }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    warp_backward(*in[0], *in[1], g, grads[0], grads[1]);
  }
};

class AffineMatrixOp final : public ad::Op {
 public:
  ad::OpKind kind() const override { return ad::OpKind::AffineMatrix; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 2 || in[0][1] != 15) throw ShapeError("affine_matrix expects [N,15], got " + to_string(in[0]));
    return {in[0][0], 4, 4};
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& p = *in[0];
    const std::int64_t n = p.dim(0);
    Tensor out({n, 4, 4});
    for (std::int64_t b = 0; b < n; ++b) {
      const auto m = affine_matrix_jacobian(p.data().subspan(static_cast<std::size_t>(b) * 15, 15)).matrix;
      std::copy(m.values().begin(), m.values().end(), out.data().begin() + b * 16);
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& p = *in[0];
    for (std::int64_t b = 0; b < p.dim(0); ++b) {
      const auto jac = affine_matrix_jacobian(p.data().subspan(static_cast<std::size_t>(b) * 15, 15));
      for (std::size_t k = 0; k < 15; ++k) {
        double s = 0.0;
        for (std::size_t e = 0; e < 16; ++e) s += g[static_cast<std::size_t>(b) * 16 + e] * jac.d[k].values()[e];
        (*grads[0])[static_cast<std::size_t>(b) * 15 + k] += s;
      }
    }
  }
};

class AffineFieldOp final : public ad::Op {
 public:
  explicit AffineFieldOp(VolumeGrid grid) : grid_(grid) {}
  ad::OpKind kind() const override { return ad::OpKind::AffineField; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 3 || in[0][1] != 4 || in[0][2] != 4) {
      throw ShapeError("affine_field expects [N,4,4], got " + to_string(in[0]));
    }
    grid_.validate();
    return {in[0][0], 3, grid_.z, grid_.y, grid_.x};
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& m = *in[0];
    const std::int64_t n = m.dim(0);
    Tensor out({n, 3, grid_.z, grid_.y, grid_.x});
    for (std::int64_t b = 0; b < n; ++b) {
      std::array<double, 16> vals{};
      std::copy_n(m.data().begin() + b * 16, 16, vals.begin());
      fill_affine_displacement(AffineMatrix(vals), grid_, out.data().data() + static_cast<std::size_t>(b) * 3 * grid_.voxels());
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const std::int64_t n = in[0]->dim(0);
    const auto c = grid_.center();
    const std::size_t vox = grid_.voxels();
    for (std::int64_t b = 0; b < n; ++b) {
      const double* gb = g.data().data() + static_cast<std::size_t>(b) * 3 * vox;
      double acc[3][4] = {};
      std::size_t i = 0;
      for (std::int64_t z = 0; z < grid_.z; ++z) {
        for (std::int64_t y = 0; y < grid_.y; ++y) {
          for (std::int64_t x = 0; x < grid_.x; ++x, ++i) {
            const double q[4] = {static_cast<double>(x) - c[0], static_cast<double>(y) - c[1],
                                 static_cast<double>(z) - c[2], 1.0};
            for (int r = 0; r < 3; ++r) {
              const double gv = gb[static_cast<std::size_t>(r) * vox + i];
              for (int k = 0; k < 4; ++k) acc[r][k] += gv * q[k];
            }
          }
        }
      }
      for (int r = 0; r < 3; ++r) {
        for (int k = 0; k < 4; ++k) (*grads[0])[static_cast<std::size_t>(b * 16 + r * 4 + k)] += acc[r][k];
      }
    }
  }

 private:
  VolumeGrid grid_;
};

}  // namespace

ad::Var warp(ad::Graph& g, ad::Var source, ad::Var displacement) {
  return g.apply(std::make_unique<WarpOp>(), {source, displacement});
}

ad::Var affine_matrix(ad::Graph& g, ad::Var params) { return g.apply(std::make_unique<AffineMatrixOp>(), {params}); }

ad::Var affine_field(ad::Graph& g, ad::Var matrix, const VolumeGrid& grid) {
  return g.apply(std::make_unique<AffineFieldOp>(grid), {matrix});
}

ad::Var compose(ad::Graph& g, ad::Var affine_displacement, ad::Var deform) {
  return ad::add(g, warp(g, deform, affine_displacement), affine_displacement);
}

}  // namespace gvsl::geometry
