#include "gvsl/optim.hpp"

#include <cmath>

#include "gvsl/errors.hpp"

namespace gvsl::ad {

void adam_update(Tensor& param, const Tensor& grad, AdamState& state, double lr, const AdamHyper& hyper) {
  if (grad.shape() != param.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ShapeError("adam_update: parameter " + to_string(param.shape()) + ", gradient " +
                     to_string(grad.shape()) + ", moments " + to_string(state.m.shape()));
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

}  // namespace gvsl::ad
