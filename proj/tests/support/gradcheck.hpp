#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tpamtl/diff/rng.hpp"
#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::testing {

using diff::Tensor;

struct GradcheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;
};

// Compares reverse-mode gradients of a scalar-valued `loss` against central
// differences for every entry of every input. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradcheckReport gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          double step = 1e-5, double floor = 1e-5);

Tensor random_tensor(diff::RngStream& rng, std::size_t rows, std::size_t cols, double lo = -1,
                     double hi = 1, bool requires_grad = true);

}  // namespace tpamtl::testing
