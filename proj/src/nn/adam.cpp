#include "pfnf/nn/adam.hpp"

#include <cmath>

namespace pfnf::nn {

template <typename T>
AdamState<T> make_adam_state(std::span<const Tensor<T>> params, AdamConfig config) {
  AdamState<T> state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.shape());
    state.second_moment.emplace_back(p.shape());
  }
  return state;
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape()) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                       shape_string(params[i].shape()) + " vs gradient " + shape_string(grads[i].shape()));
    }
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].ptr();
    const T* g = grads[i].ptr();
    T* m = state.first_moment[i].ptr();
    T* v = state.second_moment[i].ptr();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double gj = g[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
}

template <typename T>
double clip_global_norm(std::span<Tensor<T>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (T& v : g.data()) v = static_cast<T>(v * s);
    }
  }
  return norm;
}

double warmup_lr(double lr, std::uint64_t step, std::uint64_t warmup_steps) {
  if (warmup_steps == 0 || step >= warmup_steps) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

template AdamState<float> make_adam_state(std::span<const Tensor<float>>, AdamConfig);
template AdamState<double> make_adam_state(std::span<const Tensor<double>>, AdamConfig);
template void adam_step(std::span<Tensor<float>>, std::span<const Tensor<float>>, AdamState<float>&,
                        double);
template void adam_step(std::span<Tensor<double>>, std::span<const Tensor<double>>, AdamState<double>&,
                        double);
template double clip_global_norm(std::span<Tensor<float>>, double);
template double clip_global_norm(std::span<Tensor<double>>, double);

}  // namespace pfnf::nn
