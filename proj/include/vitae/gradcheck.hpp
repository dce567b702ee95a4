#ifndef VITAE_GRADCHECK_HPP_
#define VITAE_GRADCHECK_HPP_

#include <functional>
#include <string>
#include <vector>

#include "vitae/params.hpp"

namespace vitae {

struct GradCheckRow {
  std::string param;
  double max_rel_err = 0.0;
  bool nan_detected = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double worst = 0.0;
  bool nan_detected = false;

  bool passed(double threshold) const {
    return !nan_detected && worst < threshold;
  }
};

// Compares the analytic gradients of loss_fn against central finite
// differences, element by element, over every trainable parameter. loss_fn
// must rebuild its forward pass on the supplied graph each call; the values
// it reads from `params` are perturbed in place between evaluations.
// Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
// A NaN loss is reported in the result instead of raised.
//
// grad_fault, when nonzero, is added to the first analytic gradient value
// after backward; it exists so verification tooling can prove the check
// catches a broken gradient.
template <typename T>
GradCheckReport finite_diff_check(
    const std::function<Tensor<T>(Graph<T>&)>& loss_fn, ParamStore<T>& params,
    T eps, T grad_fault = T(0));

}  // namespace vitae

#endif
