#pragma once

#include <functional>
#include <span>
#include <string>

#include "hcvc/nn.hpp"
#include "hcvc/tensor.hpp"

namespace hcvc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences. `loss_fn` must rebuild the computation from the current
/// parameter values on every call (the verifier perturbs them in place and
/// restores them). Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|); the report carries the max over
/// all sampled coordinates. Non-finite gradients raise std::runtime_error
/// naming the parameter and coordinate.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           std::span<const ParamStore::Item> params,
                           int samples_per_tensor, uint64_t seed, double step = 1e-5);

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParamStore& store,
                           int samples_per_tensor, uint64_t seed, double step = 1e-5);

}  // namespace hcvc
