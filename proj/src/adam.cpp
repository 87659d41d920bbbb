#include "moemeta/adam.hpp"

#include <cmath>

#include "moemeta/error.hpp"

namespace moemeta {

AdamState AdamState::for_params(const ParamSet& params, AdamOptions options) {
  AdamState state;
  state.options = options;
  for (const auto& g : params.groups()) {
    state.first_moment.push_back(Tensor::with_shape(g.value.shape()));
    state.second_moment.push_back(Tensor::with_shape(g.value.shape()));
  }
  return state;
}

void adam_step(ParamSet& params, AdamState& state) {
  if (state.first_moment.size() != params.size()) {
    fail(ErrorKind::kDimension, "Adam state does not match parameter set");
  }
  for (const auto& g : params.groups()) {
    if (g.trainable && !g.grad.all_finite()) {
      fail(ErrorKind::kNumeric, "non-finite gradient in parameter group " + g.name);
    }
  }
  ++state.step;
  const auto& opt = state.options;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(opt.beta1, t);
  const double correction2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t gi = 0; gi < params.size(); ++gi) {
    ParamGroup& g = params[gi];
    if (!g.trainable) continue;
    auto value = g.value.data();
    auto grad = g.grad.data();
    auto m = state.first_moment[gi].data();
    auto v = state.second_moment[gi].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      value[i] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
    }
  }
}

void gradient_step(std::span<double> value, std::span<const double> grad, double learning_rate) {
  for (std::size_t i = 0; i < value.size(); ++i) value[i] -= learning_rate * grad[i];
}

}  // namespace moemeta
