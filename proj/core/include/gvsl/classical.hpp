#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/geometry.hpp"
#include "gvsl/losses.hpp"
#include "gvsl/volume.hpp"

namespace gvsl::trainer {

/// Network-free registration: Adam on the fifteen affine scalars, then on a
/// free displacement field with the affine part frozen.
struct ClassicalConfig {
  int affine_iters = 150;
  int deform_iters = 100;
  /// Adam step on the affine stage's preconditioned parameters.
  double lr = 0.05;
  /// Voxels of translation per preconditioned unit.
  double translation_unit = 1.0;
  /// Radians / scale / shear per preconditioned unit.
  double linear_unit = 0.02;
  /// Adam step on the free field, voxels.
  double deform_lr = 0.05;
  /// Start the translation at the shift between foreground centroids.
  bool centroid_init = true;
  /// Gaussian sigma (voxels) of the coarse affine level, which takes the
  /// first half of affine_iters; 0 disables it. Blur suppresses the
  /// interpolation ripple that noise puts into NCC.
  double coarse_blur = 1.0;
  /// Smoothness on the fused field instead of the free field. Off by
  /// default: with the affine part frozen, a large weight should leave the
  /// affine-only solution, which only the free-field penalty guarantees.
  bool smooth_on_fused = false;
  /// The affine stage uses a wider window for a larger capture range.
  losses::LossConfig affine_loss{9, 1e-5, 0.0};
  losses::LossConfig deform_loss{5, 1e-5, 1.0};

  void validate() const;
  nlohmann::json to_json() const;
  static ClassicalConfig from_json(const nlohmann::json& j);
};

struct ClassicalResult {
  geometry::AffineParams affine;
  geometry::Dvf deform;  // local field before fusion
  geometry::Dvf fused;   // deform composed with the affine field
  /// Affine-stage NCC per iterate, starting point included, coarse level
  /// first: affine_iters + 1 entries per level.
  std::vector<double> affine_trace;
  /// Deform-stage NCC + weighted smoothness of the free field per iterate,
  /// starting point included: deform_iters + 1 entries.
  std::vector<double> deform_trace;
  double initial_ncc = 0.0;  // NCC (deform_loss window) at identity
  double final_ncc = 0.0;    // NCC (deform_loss window) of the returned field
};

/// Returns the best iterate of each stage. The result never has a higher NCC
/// than the identity: the affine stage falls back to identity, and the
/// deform stage only accepts iterates that do not exceed the initial NCC.
ClassicalResult classical_register(const Volume& moving, const Volume& fixed, const ClassicalConfig& cfg = {});

}  // namespace gvsl::trainer
