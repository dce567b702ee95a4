#include "vitae/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vitae/error.hpp"

namespace vitae {

template <typename T>
GradCheckReport finite_diff_check(
    const std::function<Tensor<T>(Graph<T>&)>& loss_fn, ParamStore<T>& params,
    T eps, T grad_fault) {
  if (!(eps >= T(1e-7) && eps <= T(1e-3)))
    throw ConfigError("finite_diff_check: eps must lie in [1e-7, 1e-3]");

  GradCheckReport report;

  // Analytic pass.
  std::vector<std::vector<T>> analytic;
  {
    Graph<T> g;
    Tensor<T> loss = loss_fn(g);
    if (std::isnan(double(loss.value()))) {
      report.nan_detected = true;
      report.rows.push_back({"<loss>", 0.0, true});
      return report;
    }
    params.zero_grads();
    g.backward(loss);
    bool first = true;
    for (auto& e : params.entries()) {
      if (!e.trainable) continue;
      std::vector<T> gr = e.tensor.has_grad()
                              ? e.tensor.grad()
                              : std::vector<T>(size_t(e.tensor.numel()), T(0));
      if (first && grad_fault != T(0) && !gr.empty()) gr[0] += grad_fault;
      first = false;
      analytic.push_back(std::move(gr));
    }
  }

  auto eval = [&](Graph<T>& g) -> double {
    typename Graph<T>::NoGrad guard(g);
    return double(loss_fn(g).value());
  };

  Graph<T> g;
  size_t slot = 0;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const std::vector<T>& a = analytic[slot++];
    GradCheckRow row{e.name, 0.0, false};
    T* v = e.tensor.data();
    for (int64_t i = 0; i < e.tensor.numel(); ++i) {
      T saved = v[i];
      v[i] = saved + eps;
      double fp = eval(g);
      v[i] = saved - eps;
      double fm = eval(g);
      v[i] = saved;
      if (std::isnan(fp) || std::isnan(fm)) {
        row.nan_detected = true;
        report.nan_detected = true;
        continue;
      }
      double numeric = (fp - fm) / (2.0 * double(eps));
      double ana = double(a[size_t(i)]);
      double denom = std::max({std::fabs(ana), std::fabs(numeric), 1e-12});
      row.max_rel_err = std::max(row.max_rel_err,
                                 std::fabs(ana - numeric) / denom);
    }
    report.worst = std::max(report.worst, row.max_rel_err);
    report.rows.push_back(std::move(row));
  }
  return report;
}

template GradCheckReport finite_diff_check<float>(
    const std::function<Tensor<float>(Graph<float>&)>&, ParamStore<float>&,
    float, float);
template GradCheckReport finite_diff_check<double>(
    const std::function<Tensor<double>(Graph<double>&)>&, ParamStore<double>&,
    double, double);

}  // namespace vitae
