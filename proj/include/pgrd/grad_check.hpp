// Finite-difference gradient checking (64-bit graphs only).
//
// Central differences with step 1e-5, compared against the analytic backward
// pass. Relative error uses max(|analytic|, |numeric|, floor) as denominator
// so exact zeros don't divide by zero. Graphs evaluated at a relu kink are
// flagged as non-differentiable instead of failed.
#pragma once

#include "pgrd/graph.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace pgrd {

struct GradCheckOptions {
  double step = 1e-5;
  double denom_floor = 1e-6;
  // |relu input| below this marks the evaluation point non-differentiable.
  double kink_tolerance = 1e-4;
  // 0 = check every element of every leaf.
  std::int64_t max_elements_per_leaf = 0;
};

struct LeafCheck {
  int node_id = -1;
  std::int64_t elements_checked = 0;
  double max_rel_error = 0.0;
  std::int64_t worst_element = -1;
  bool passed = true;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<LeafCheck> leaves;
  bool non_differentiable_point = false;
  bool passed = true;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& l : leaves) m = std::max(m, l.max_rel_error);
    return m;
  }

  std::string summary() const {
    std::ostringstream os;
    if (non_differentiable_point) {
      os << "non-differentiable point (relu kink); check skipped\n";
      return os.str();
    }
    for (const auto& l : leaves) {
      os << "  leaf " << l.node_id << ": " << l.elements_checked
         << " elements, max rel err " << std::scientific << std::setprecision(3)
         << l.max_rel_error << (l.passed ? "  ok" : "  FAIL") << "\n";
    }
    os << (passed ? "PASS" : "FAIL") << " at tolerance " << std::scientific
       << std::setprecision(1) << tolerance << "\n";
    return os.str();
  }
};

inline GradCheckReport grad_check(Graph<double>& g, int loss, double tolerance,
                                  GradCheckOptions opts = {}) {
  GradCheckReport report;
  report.tolerance = tolerance;

  if (g.min_abs_relu_input() < opts.kink_tolerance) {
    report.non_differentiable_point = true;
    return report;
  }

  const auto grads = g.backward(loss);
  for (int leaf : g.leaf_ids(/*grad_only=*/true)) {
    LeafCheck check;
    check.node_id = leaf;
    auto it = grads.find(leaf);
    Tensor<double>& value = g.mutable_input_value(leaf);
    const std::int64_t n = value.size();
    std::int64_t stride = 1;
    if (opts.max_elements_per_leaf > 0 && n > opts.max_elements_per_leaf) {
      stride = (n + opts.max_elements_per_leaf - 1) / opts.max_elements_per_leaf;
    }
    for (std::int64_t i = 0; i < n; i += stride) {
      const double saved = value[i];
      value[i] = saved + opts.step;
      g.recompute(leaf);
      const double f_plus = g.value(loss)[0];
      value[i] = saved - opts.step;
      g.recompute(leaf);
      const double f_minus = g.value(loss)[0];
      value[i] = saved;

      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double analytic = it == grads.end() ? 0.0 : (*it).second[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), opts.denom_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++check.elements_checked;
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_element = i;
      }
    }
    g.recompute(leaf);
    check.passed = check.max_rel_error <= tolerance;
    report.passed = report.passed && check.passed;
    report.leaves.push_back(check);
  }
  return report;
}

}  // namespace pgrd
