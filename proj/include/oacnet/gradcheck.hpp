#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "oacnet/tensor.hpp"

namespace oacnet {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_index = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Denominator floor so entries whose true gradient is ~0 are judged on
  /// absolute error instead of amplifying round-off.
  double scale_floor = 1e-6;
  /// 0 checks every entry; otherwise a strided subset of this size.
  std::size_t max_entries = 0;
};

/// Compares an analytic gradient of a scalar function against central finite
/// differences. relative error = |a - n| / max(|a|, |n|, scale_floor).
inline GradCheckReport grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  const Tensor& analytic, const GradCheckOptions& opts = {}) {
  x.require_same_shape(analytic, "grad_check");
  GradCheckReport report;
  Tensor probe = x;
  const std::size_t n = x.size();
  const std::size_t stride = (opts.max_entries == 0 || opts.max_entries >= n) ? 1 : n / opts.max_entries;
  for (std::size_t i = 0; i < n; i += stride) {
    const double orig = probe[i];
    probe[i] = orig + opts.step;
    const double fp = f(probe);
    probe[i] = orig - opts.step;
    const double fm = f(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * opts.step);
    const double a = analytic[i];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.scale_floor});
    if (!std::isfinite(rel)) {
      report.max_relative_error = std::numeric_limits<double>::infinity();
      report.worst_index = i;
    } else if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = i;
    }
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    ++report.entries_checked;
  }
  report.passed = report.max_relative_error <= opts.tolerance;
  return report;
}

/// Weighted-sum probe: turns a tensor-valued op into the scalar sum(op(x) * w)
/// whose gradient is the op's backward applied to w.
inline double weighted_sum(const Tensor& y, const Tensor& weights) {
  y.require_same_shape(weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
  return s;
}

}  // namespace oacnet
