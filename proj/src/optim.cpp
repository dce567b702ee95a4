#include "vitae/optim.hpp"

#include <cmath>

#include "vitae/error.hpp"

namespace vitae {

bool decay_eligible(const std::string& name) {
  auto pos = name.rfind('.');
  std::string last = pos == std::string::npos ? name : name.substr(pos + 1);
  return last == "weight" || last == "wq" || last == "wk" || last == "wv" ||
         last == "wo" || last == "w1" || last == "w2";
}

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const ParamStore<T>& params,
                                          double weight_decay) {
  OptimizerState<T> s;
  s.weight_decay = weight_decay;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    s.names.push_back(e.name);
    s.m.push_back(Tensor<T>(e.tensor.shape()));
    s.v.push_back(Tensor<T>(e.tensor.shape()));
  }
  return s;
}

template <typename T>
void adamw_step(ParamStore<T>& params, OptimizerState<T>& state, double lr) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  size_t slot = 0;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    if (!e.tensor.has_grad())
      throw UsageError("adamw_step: parameter " + e.name + " has no gradient");
    T* theta = e.tensor.data();
    const T* grad = e.tensor.grad().data();
    T* mv = state.m[slot].data();
    T* vv = state.v[slot].data();
    bool decay = state.weight_decay != 0.0 && decay_eligible(e.name);
    for (int64_t i = 0; i < e.tensor.numel(); ++i) {
      if (decay) theta[i] -= T(lr * state.weight_decay) * theta[i];
      double gi = double(grad[i]);
      double m = state.beta1 * double(mv[i]) + (1.0 - state.beta1) * gi;
      double v = state.beta2 * double(vv[i]) + (1.0 - state.beta2) * gi * gi;
      mv[i] = T(m);
      vv[i] = T(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      theta[i] -= T(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
    ++slot;
  }
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr,
                 double min_lr, int64_t warmup_steps) {
  if (step < 0 || total_steps < 1 || warmup_steps >= total_steps)
    throw ConfigError("cosine_lr: need 0 <= step and warmup < total_steps");
  if (step < warmup_steps)
    return base_lr * double(step) / double(warmup_steps);
  if (step >= total_steps) return min_lr;
  double progress =
      double(step - warmup_steps) / double(total_steps - warmup_steps);
  return min_lr +
         (base_lr - min_lr) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step<float>(ParamStore<float>&, OptimizerState<float>&,
                                double);
template void adamw_step<double>(ParamStore<double>&, OptimizerState<double>&,
                                 double);

}  // namespace vitae
