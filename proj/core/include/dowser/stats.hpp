#pragma once

#include <cstdint>
#include <vector>

namespace dowser {

double mean(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);

struct welch_result {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;       // two-tailed
  bool degenerate = false;  // both samples have zero variance
};

// Welch two-tailed t-test. Zero variance on both sides short-circuits to an
// exact-equality comparison: p = 1 for equal means, p = 0 (degenerate) for a
// deterministic difference.
welch_result welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Two-tailed p for a Student-t statistic.
double students_t_two_tailed_p(double t, double df);

// Chi-square goodness-of-fit p-value of observed counts against the uniform
// distribution over the cells (df = cells - 1).
double chi_square_uniform_p(const std::vector<std::int64_t>& counts);

}  // namespace dowser
