#pragma once

#include "gvsl/geometry.hpp"
#include "gvsl/graph.hpp"

namespace gvsl::losses {

struct LossConfig {
  int ncc_window = 5;      // odd, in voxels
  double ncc_eps = 1e-5;   // added to the variance product only
  double smooth_weight = 1.0;

  /// Throws ConfigError unless the window is odd and fits every spatial extent.
  void validate(const Shape& volume_shape) const;
};

/// Negated mean of the squared local correlation over every voxel. Windows
/// are clipped at the volume border and their means use the clipped voxel
/// count. Inputs are [N, C, Z, Y, X]; result lies in [-1, 0].
ad::Var local_ncc_loss(ad::Graph& g, ad::Var warped, ad::Var fixed, const LossConfig& cfg);

/// Mean over voxels of the squared Frobenius norm of the forward-difference
/// Jacobian of a displacement field [N, 3, Z, Y, X].
ad::Var smoothness_loss(ad::Graph& g, ad::Var displacement);

/// Mean squared difference.
ad::Var restoration_mse(ad::Graph& g, ad::Var restored, ad::Var original);

/// ncc + smooth_weight * smooth.
ad::Var gvsl_total(ad::Graph& g, ad::Var ncc, ad::Var smooth, const LossConfig& cfg);

// Value helpers over plain tensors ([C, Z, Y, X] or [N, C, Z, Y, X]).
double local_ncc(const Tensor& warped, const Tensor& fixed, const LossConfig& cfg);
double smoothness(const geometry::Dvf& dvf);
double mse(const Tensor& restored, const Tensor& original);

}  // namespace gvsl::losses
