#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dowser {

// Arithmetic and harmonic means of upstream and downstream accuracy.
// h = 2ab/(a+b), with h = 0 when a + b = 0. Rejects negative inputs.
struct avg_h {
  double avg = 0.0;
  double h = 0.0;
};
avg_h avg_and_hscore(double a_up, double a_down);

// Continual-learning summary over a lower-triangular accuracy matrix:
// acc[t][i] = accuracy on task i after finishing task t, for i <= t.
struct cl_summary {
  double mft = 0.0;  // mean of acc[i][i]
  double mfn = 0.0;  // mean of the last row
  double maa = 0.0;  // mean over t of the running row means
  double bwt = 0.0;  // mean of acc[T-1][i] - acc[i][i] over i < T-1
};
cl_summary cl_metrics(const std::vector<std::vector<double>>& acc);

struct run_metrics {
  double a_up = 0.0;
  double a_down = 0.0;
  double avg = 0.0;
  double h_score = 0.0;

  bool has_cl = false;
  std::vector<std::vector<double>> acc_matrix;
  cl_summary cl;

  std::vector<std::uint64_t> seeds;
  double wall_clock_sec = 0.0;

  // Range checks plus the AM/HM inequality h <= avg.
  void validate() const;
  std::string to_json() const;
  static run_metrics from_json(const std::string& text);
};

}  // namespace dowser
