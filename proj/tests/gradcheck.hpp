#pragma once

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "exms/tensor.hpp"

// Shared finite-difference harness: compares reverse-mode gradients against
// the central-difference oracle with the standard rel-err metric.
namespace testutil {

inline double rel_err(double g, double fd) {
  return std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
}

inline void gradcheck(const std::function<exms::Tensor(const std::vector<exms::Tensor>&)>& loss_fn,
                      const std::vector<exms::Tensor>& params, double tol = 1e-5,
                      double h = 1e-6) {
  exms::Tensor loss = loss_fn(params);
  std::vector<exms::Tensor> analytic = exms::grad(loss, params);
  std::vector<exms::Tensor> numeric = exms::finite_diff_grad(
      [&](const std::vector<exms::Tensor>& ps) { return loss_fn(ps).item(); }, params, h);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (int64_t i = 0; i < params[p].numel(); ++i) {
      worst = std::max(worst, rel_err(analytic[p].data()[i], numeric[p].data()[i]));
    }
  }
  CHECK(worst <= tol);
}

}  // namespace testutil
