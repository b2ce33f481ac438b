#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tqn/tensor.hpp"

namespace tqn {

struct GradCheckResult {
  double max_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares the recorded gradient of a scalar function against central
// differences, coordinate by coordinate. Error per coordinate is
// |analytic - numeric| / max(1, |numeric|); the maximum is reported.
// `f` must be deterministic in the parameter values.
inline GradCheckResult finite_diff_grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                              double eps = 1e-6) {
  for (auto& p : params) p.zero_grad();
  {
    ComputationRecord record;
    Recording guard(&record);
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad check: non-finite objective");
    record.backward(loss);
  }
  auto eval = [&] {
    NoRecording guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad check: non-finite objective");
    return v;
  };
  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.size(), 0.0);
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = eval();
      values[i] = saved - eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_error) {
        result.max_error = err;
        result.worst_tensor = t;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace tqn
