#include "gvsl/volume.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "gvsl/errors.hpp"

namespace gvsl {

void gaussian_blur_block(double* data, const geometry::VolumeGrid& grid, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    norm += w;
  }
  for (auto& w : kernel) w /= norm;

  const std::array<std::int64_t, 3> ext{grid.z, grid.y, grid.x};
  const std::array<std::int64_t, 3> stride{grid.y * grid.x, grid.x, 1};
  std::vector<double> line;
  std::vector<double> out;
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = ext[static_cast<std::size_t>(axis)];
    const std::int64_t s = stride[static_cast<std::size_t>(axis)];
    line.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));
    const auto total = static_cast<std::int64_t>(grid.voxels());
    for (std::int64_t start = 0; start < total; ++start) {
      // Visit each line once, from the element whose coordinate on `axis` is 0.
      if ((start / s) % n != 0) continue;
      for (std::int64_t i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = data[start + i * s];
      for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const std::int64_t j = std::clamp<std::int64_t>(i + k, 0, n - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * line[static_cast<std::size_t>(j)];
        }
        out[static_cast<std::size_t>(i)] = acc;
      }
      for (std::int64_t i = 0; i < n; ++i) data[start + i * s] = out[static_cast<std::size_t>(i)];
    }
  }
}

Volume::Volume(Tensor values, std::array<double, 3> sp) : data(std::move(values)), spacing(sp) {
  if (data.rank() != 4) throw ShapeError("volume data must be [C,Z,Y,X], got " + to_string(data.shape()));
}

Volume Volume::zeros(const geometry::VolumeGrid& grid, std::int64_t channels) {
  return Volume(Tensor({channels, grid.z, grid.y, grid.x}));
}

Tensor Volume::batched() const {
  return data.reshaped({1, data.dim(0), data.dim(1), data.dim(2), data.dim(3)});
}

Volume gaussian_blur(const Volume& v, double sigma) {
  Volume out = v;
  const geometry::VolumeGrid grid = v.grid();
  for (std::int64_t c = 0; c < v.channels(); ++c) {
    gaussian_blur_block(out.data.data().data() + static_cast<std::size_t>(c) * grid.voxels(), grid, sigma);
  }
  return out;
}

}  // namespace gvsl
