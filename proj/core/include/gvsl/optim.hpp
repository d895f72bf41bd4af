#pragma once

#include <cstdint>

#include "gvsl/tensor.hpp"

namespace gvsl::ad {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter Adam moments.
struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const Tensor& param) { return {Tensor(param.shape()), Tensor(param.shape()), 0}; }
};

/// One bias-corrected Adam step, in place. Increments state.t by one.
void adam_update(Tensor& param, const Tensor& grad, AdamState& state, double lr, const AdamHyper& hyper = {});

}  // namespace gvsl::ad
