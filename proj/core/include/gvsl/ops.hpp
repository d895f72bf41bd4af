#pragma once

#include <span>

#include "gvsl/graph.hpp"

namespace gvsl::ad {

// Elementwise arithmetic. Operands must have identical shapes, except that a
// single-element operand broadcasts against the other.
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var div(Graph& g, Var a, Var b);

Var square(Graph& g, Var x);
Var sqrt(Graph& g, Var x);
Var negate(Graph& g, Var x);
Var scale(Graph& g, Var x, double factor);
Var add_scalar(Graph& g, Var x, double offset);

Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);

Var concat(Graph& g, std::span<const Var> parts, std::size_t axis);
inline Var concat(Graph& g, std::initializer_list<Var> parts, std::size_t axis) {
  return concat(g, std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// 3D convolution over [N, Ci, Z, Y, X] with weights [Co, Ci, k, k, k] and bias
/// [Co]. Zero padding k/2 on every side; stride 1 keeps extents, stride 2
/// halves them (rounding up).
Var conv3d(Graph& g, Var x, Var weight, Var bias, int stride = 1);

/// Trilinear upsampling by two along z, y, x (half-voxel aligned, edge clamp).
Var upsample2x(Graph& g, Var x);

/// y = x W^T + b with x [N, in], W [out, in], b [out].
Var linear(Graph& g, Var x, Var weight, Var bias);

Var leaky_relu(Graph& g, Var x, double slope = 0.01);
Var sigmoid(Graph& g, Var x);
Var tanh(Graph& g, Var x);

/// Group normalisation over [N, C, ...] with per-channel affine gamma/beta [C].
Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, double eps = 1e-5);

/// [N, C, Z, Y, X] -> [N, C].
Var global_avg_pool(Graph& g, Var x);

/// Sum over a cubic window of odd width centred on each voxel, restricted to
/// voxels inside the volume.
Var box_sum(Graph& g, Var x, int window);

/// x(p + e_axis) - x(p) along a spatial axis of [N, C, Z, Y, X]
/// (axis 2, 3 or 4); zero in the last slice.
Var forward_diff(Graph& g, Var x, std::size_t axis);

/// Mean cross entropy of softmax(logits) over all voxels. logits is
/// [N, K, Z, Y, X]; labels holds class ids as doubles with shape [N, Z, Y, X].
Var softmax_cross_entropy(Graph& g, Var logits, Tensor labels);

}  // namespace gvsl::ad
