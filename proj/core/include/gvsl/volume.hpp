#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "gvsl/geometry.hpp"
#include "gvsl/tensor.hpp"

namespace gvsl {

/// Scalar or multi-channel image, data laid out [C, Z, Y, X].
struct Volume {
  Tensor data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  Volume() = default;
  explicit Volume(Tensor values, std::array<double, 3> sp = {1.0, 1.0, 1.0});
  static Volume zeros(const geometry::VolumeGrid& grid, std::int64_t channels = 1);

  geometry::VolumeGrid grid() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
  std::int64_t channels() const { return data.dim(0); }
  /// [1, C, Z, Y, X] view for graph inputs.
  Tensor batched() const;
};

/// In-place separable Gaussian blur of one [Z, Y, X] block, clamped edges.
void gaussian_blur_block(double* data, const geometry::VolumeGrid& grid, double sigma);
/// Per-channel Gaussian blur; sigma <= 0 returns a copy.
Volume gaussian_blur(const Volume& v, double sigma);

/// Integer label grid (0 = background).
struct LabelGrid {
  geometry::VolumeGrid grid;
  std::vector<std::int32_t> labels;

  std::int32_t at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return labels[static_cast<std::size_t>((z * grid.y + y) * grid.x + x)];
  }
  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

}  // namespace gvsl
