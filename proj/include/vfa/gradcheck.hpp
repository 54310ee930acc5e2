#pragma once

// Finite-difference verification of analytic gradients in double
// precision. Each check builds a scalar from a random projection of an op's
// output and compares d(scalar)/d(input) element by element against the
// central difference (f(x + h) - f(x - h)) / 2h. The error of one element
// is |a - n| / max(|a|, |n|, floor).

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vfa/model.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

struct GradcheckOptions {
  std::int64_t size = 12;  // square 2-D instance extent
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;
  std::uint64_t seed = 0;
  std::string inject_sign_bug;  // check name whose analytic gradient is negated
  bool include_model = true;
  std::vector<std::int64_t> model_channels{4, 8};
};

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool all_passed() const;
  std::vector<std::string> failures() const;
};

struct FdResult {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
};

// Checks every element of every leaf against central differences. The loss
// closure must rebuild its graph from the current leaf values.
FdResult finite_difference_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> leaves,
                                 double step, double floor, bool negate_analytic = false);

std::vector<std::string> gradcheck_names(bool include_model = true);
GradcheckReport run_gradchecks(const GradcheckOptions& opts);

// The full registration loss (t1-atlas recipe) of a fresh 2-D model on a
// random size x size pair, checked against every parameter.
GradcheckEntry model_gradcheck(const ModelConfig& cfg, std::int64_t size, const GradcheckOptions& opts);

}  // namespace vfa
