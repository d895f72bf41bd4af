#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gvsl/graph.hpp"

namespace gvsl::ad {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;   // number of scalar entries compared
  std::string worst;         // "<input>[<flat index>]" of the largest error
  bool pass = false;
};

/// Builds a graph over the given leaves and returns the node to check. The
/// node may be any shape; it is reduced against fixed random weights.
using GraphBuilder = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `build` with central differences at
/// `inputs`. rel_err = |a - n| / max(1, |a|, |n|) per entry.
/// `mask`, when given, selects which entries of each input are compared.
GradCheckReport check_gradients(const GraphBuilder& build, const std::vector<Tensor>& inputs, double h, double tol,
                                std::uint64_t seed = 0,
                                const std::function<bool(std::size_t input, std::size_t index)>& mask = {});

struct OpCheckOptions {
  std::uint64_t seed = 0;
  double h = 1e-4;
  double tol = 1e-4;
  /// Primary input shape; empty selects a small canonical shape for the op.
  Shape shape;
};

/// Canonical finite-difference check for one differentiable op kind. Inputs
/// are drawn from `seed` and kept clear of non-differentiable points by more
/// than 2h (zero for leaky_relu, integer sample coordinates for warp).
/// Non-differentiable kinds (Input, Parameter, Constant) report pass = false.
GradCheckReport finite_difference_check(OpKind kind, const OpCheckOptions& options = {});

/// Op kinds with a backward pass.
std::vector<OpKind> differentiable_ops();

}  // namespace gvsl::ad
