#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfnf/nn/tensor.hpp"

namespace pfnf::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;
};

// Zeroed moments shaped like `params`.
template <typename T>
AdamState<T> make_adam_state(std::span<const Tensor<T>> params, AdamConfig config = {});

// One bias-corrected Adam update in place. `lr` overrides config.lr for
// schedules such as warmup.
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state,
               double lr);

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state) {
  adam_step(params, grads, state, state.config.lr);
}

// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
// norm before clipping.
template <typename T>
double clip_global_norm(std::span<Tensor<T>> grads, double max_norm);

// Linear warmup from lr/warmup_steps to lr over the first warmup_steps steps
// (1-based step index), constant afterwards.
double warmup_lr(double lr, std::uint64_t step, std::uint64_t warmup_steps);

}  // namespace pfnf::nn
