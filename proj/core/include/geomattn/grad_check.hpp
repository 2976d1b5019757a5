#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "geomattn/tensor.hpp"

namespace geomattn {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates checked per parameter tensor; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Coordinates with |analytic - numeric| at or below this are left out of
  /// `max_rel_error_resolved`. Central differences cannot resolve a gradient smaller than about
  /// ulp(loss) / (2h), which is what the relative error measures at such coordinates.
  double abs_tolerance = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Largest |analytic - numeric|. Near-zero gradients make the relative error meaningless: the
  /// numeric estimate there is round-off of the loss divided by 2h.
  double max_abs_error = 0.0;
  /// max_rel_error over the coordinates whose absolute disagreement exceeds abs_tolerance.
  double max_rel_error_resolved = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose perturbation flipped a relu/max/hinge branch; finite differences are
  /// meaningless across a kink, so these are excluded from the maximum.
  std::size_t skipped_at_kinks = 0;
};

/// |a - b| / max(1e-8, |a| + |b|).
double relative_error(double analytic, double numeric);

/// Compares the analytic gradient of `loss` against central differences at the current values of
/// `params`. `loss` must rebuild its graph on every call. Parameter values are restored on return.
GradCheckReport grad_check(const std::function<Tensor()>& loss, std::vector<NamedTensor> params,
                           GradCheckOptions options = {});

}  // namespace geomattn
