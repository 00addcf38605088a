#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "srclab/tensor.hpp"

namespace srclab {

/// Scalar-valued function of tensors it captures; builds its value on `tape`.
using ScalarFn = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Central-difference check of tape gradients. The relative error of a
/// coordinate is |tape - fd| / max(|tape|, |fd|, abs_floor); the floor keeps
/// coordinates whose true derivative is ~0 from dividing round-off by zero.
/// Throws NumericError if f or any gradient is non-finite.
GradCheckReport grad_check(const ScalarFn& f, Tensor<double>& x, double h, double tol, double abs_floor = 1e-5);

/// Same, over `samples` coordinates drawn uniformly from the union of `wrt`.
GradCheckReport grad_check_sampled(const ScalarFn& f, std::vector<Tensor<double>> wrt, std::size_t samples,
                                   std::uint64_t seed, double h, double tol, double abs_floor = 1e-5);

}  // namespace srclab
