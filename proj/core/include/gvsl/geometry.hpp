#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "gvsl/graph.hpp"
#include "gvsl/tensor.hpp"

namespace gvsl::geometry {

/// Voxel grid. Positions are integer voxel centres (x, y, z) with the origin
/// at index (0, 0, 0); x varies fastest in memory.
struct VolumeGrid {
  std::int64_t z = 0, y = 0, x = 0;

  std::size_t voxels() const { return static_cast<std::size_t>(z * y * x); }
  /// Rotation/scaling centre in (x, y, z) order.
  std::array<double, 3> center() const {
    return {(static_cast<double>(x) - 1.0) / 2.0, (static_cast<double>(y) - 1.0) / 2.0,
            (static_cast<double>(z) - 1.0) / 2.0};
  }
  void validate() const;
  friend bool operator==(const VolumeGrid&, const VolumeGrid&) = default;
};

/// The fifteen affine scalars. Shear order: xy, xz, yx, yz, zx, zy.
struct AffineParams {
  std::array<double, 3> rotation{0.0, 0.0, 0.0};     // radians about x, y, z
  std::array<double, 3> translation{0.0, 0.0, 0.0};  // voxels
  std::array<double, 3> scaling{1.0, 1.0, 1.0};
  std::array<double, 6> shearing{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};

  static AffineParams identity() { return {}; }
  /// rotation, translation, scaling, shearing concatenated.
  std::array<double, 15> flatten() const;
  static AffineParams from_flat(std::span<const double> values);
  /// Throws NumericalError for non-finite values or non-positive scales.
  void validate() const;
  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// 4x4 homogeneous matrix, row-major, acting on (x, y, z, 1).
class AffineMatrix {
 public:
  AffineMatrix() : m_{} {}
  explicit AffineMatrix(const std::array<double, 16>& values) : m_(values) {}
  static AffineMatrix identity();
  static AffineMatrix translation(double tx, double ty, double tz);

  double operator()(int r, int c) const { return m_[static_cast<std::size_t>(4 * r + c)]; }
  double& operator()(int r, int c) { return m_[static_cast<std::size_t>(4 * r + c)]; }
  const std::array<double, 16>& values() const { return m_; }

  AffineMatrix operator*(const AffineMatrix& rhs) const;
  std::array<double, 3> apply(const std::array<double, 3>& p) const;
  double linear_determinant() const;
  AffineMatrix inverse() const;
  /// Last row must be [0,0,0,1] and the linear part invertible.
  void validate() const;

 private:
  std::array<double, 16> m_;
};

/// Dense displacement field [3, Z, Y, X], channels (u_x, u_y, u_z) in voxels.
struct Dvf {
  Tensor field;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  Dvf() = default;
  explicit Dvf(const VolumeGrid& grid);
  explicit Dvf(Tensor values, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

  VolumeGrid grid() const;
  /// Displacement at voxel (x, y, z) in (u_x, u_y, u_z).
  std::array<double, 3> at(std::int64_t x, std::int64_t y, std::int64_t z) const;
};

/// Rotation * Scaling * Shearing * Translation.
AffineMatrix affine_matrix_from_params(const AffineParams& params);

/// Rotation about x, y and z composed as Rz * Ry * Rx.
AffineMatrix rotation_matrix(double theta_x, double theta_y, double theta_z);

/// Matrix and its derivative with respect to each of the fifteen flattened
/// parameters.
struct AffineJacobian {
  AffineMatrix matrix;
  std::array<AffineMatrix, 15> d;
};
AffineJacobian affine_matrix_jacobian(std::span<const double> flat_params);

/// Displacement p_hat - p with p_hat = c + M (p - c), c the grid centre.
Dvf affine_to_dvf(const AffineMatrix& matrix, const VolumeGrid& grid);

/// Pull-warp: out(p) = trilinear sample of source at p + u(p); samples
/// outside the volume read zero. source is [C, Z, Y, X].
Tensor warp_trilinear(const Tensor& source, const Dvf& dvf);

/// Nearest-neighbour pull-warp for integer label grids of the given extents.
std::vector<std::int32_t> warp_labels_nearest(std::span<const std::int32_t> labels, const VolumeGrid& grid,
                                              const Dvf& dvf, std::int32_t fill = 0);

/// psi(p) = deform(p_hat) + p_hat - p, with deform sampled trilinearly.
Dvf compose_dvf(const AffineMatrix& affine, const Dvf& deform);

/// det(I + grad u) by forward differences (zero derivative in the last slice).
Tensor jacobian_determinant(const Dvf& dvf);

/// Raw kernels shared by the value functions and the graph ops. Tensors are
/// [N, C, Z, Y, X] and [N, 3, Z, Y, X].
Tensor warp_forward(const Tensor& source, const Tensor& displacement);
void warp_backward(const Tensor& source, const Tensor& displacement, const Tensor& grad_out, Tensor* grad_source,
                   Tensor* grad_displacement);

// Graph builders -------------------------------------------------------------

/// source [N, C, Z, Y, X] warped by displacement [N, 3, Z, Y, X].
ad::Var warp(ad::Graph& g, ad::Var source, ad::Var displacement);

/// [N, 15] flattened parameters (actual scales, not offsets) -> [N, 4, 4].
ad::Var affine_matrix(ad::Graph& g, ad::Var params);

/// [N, 4, 4] -> [N, 3, Z, Y, X] displacement about the grid centre.
ad::Var affine_field(ad::Graph& g, ad::Var matrix, const VolumeGrid& grid);

/// Fusion of an affine displacement field with a deformable field sampled at
/// the affinely mapped positions: warp(deform, affine) + affine.
ad::Var compose(ad::Graph& g, ad::Var affine_displacement, ad::Var deform);

}  // namespace gvsl::geometry
