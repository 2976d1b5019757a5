#include "geomattn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "geomattn/error.hpp"

namespace geomattn {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const std::function<Tensor()>& loss) {
  NoGradGuard no_grad;
  BranchTrace trace;
  const double v = loss().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite at a perturbed point");
  return {v, trace.signature()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss, std::vector<NamedTensor> params,
                           GradCheckOptions options) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  std::uint64_t base_signature = 0;
  {
    BranchTrace trace;
    Tensor root = loss();
    if (!std::isfinite(root.item())) throw NumericError("grad_check: loss is not finite");
    base_signature = trace.signature();
    root.backward();
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  const double h = options.step;
  for (auto& p : params) {
    const std::vector<double> analytic = [&] {
      auto g = p.tensor.grad_data();
      return g.empty() ? std::vector<double>(p.tensor.numel(), 0.0)
                       : std::vector<double>(g.begin(), g.end());
    }();
    std::vector<std::size_t> coords(p.tensor.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_tensor != 0 && coords.size() > options.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = p.tensor.mutable_data();
    for (std::size_t idx : coords) {
      const double original = values[idx];
      values[idx] = original + h;
      const Evaluation plus = evaluate(loss);
      values[idx] = original - h;
      const Evaluation minus = evaluate(loss);
      values[idx] = original;
      if (plus.signature != base_signature || minus.signature != base_signature) {
        ++report.skipped_at_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * h);
      const double err = relative_error(analytic[idx], numeric);
      ++report.checked;
      const double abs_err = std::abs(analytic[idx] - numeric);
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (abs_err > options.abs_tolerance) report.max_rel_error_resolved = std::max(report.max_rel_error_resolved, err);
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = p.name;
        report.worst_index = idx;
        report.worst_analytic = analytic[idx];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace geomattn
