#ifndef VITAE_OPTIM_HPP_
#define VITAE_OPTIM_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/params.hpp"

namespace vitae {

// AdamW moments, aligned with the trainable entries of the ParamStore they
// were built from.
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::vector<std::string> names;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;

  static OptimizerState init(const ParamStore<T>& params, double weight_decay);
};

// True for tensors that receive decoupled weight decay: matmul/conv weights
// only; norm affines, biases and the class token are excluded.
bool decay_eligible(const std::string& name);

// One AdamW step: theta -= lr*wd*theta (decay first, decoupled), then the
// bias-corrected Adam update. Every trainable parameter must carry a
// gradient.
template <typename T>
void adamw_step(ParamStore<T>& params, OptimizerState<T>& state, double lr);

// Linear warmup 0 -> base_lr over warmup_steps, then cosine decay to min_lr
// at total_steps.
double cosine_lr(int64_t step, int64_t total_steps, double base_lr,
                 double min_lr, int64_t warmup_steps);

}  // namespace vitae

#endif
