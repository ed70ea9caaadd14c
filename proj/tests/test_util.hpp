#pragma once

// Shared oracles: central finite differences, straight-line model
// evaluation, and perturbation probes. Everything here is independent of the
// graph machinery it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "dowser/model.hpp"

namespace testutil {

// Central finite difference d(f)/d(x_i) for a scalar-valued functional.
inline double central_diff(const std::function<double(double)>& f_of_xi, double xi,
                           double step = 1e-5) {
  return (f_of_xi(xi + step) - f_of_xi(xi - step)) / (2.0 * step);
}

// Plain-loop evaluation of an MLP from its parameter tensors; no graph, no
// tape. Applies the hidden activation between layers, identity at the end.
inline std::vector<double> straight_line_mlp(const dowser::model& m,
                                             const std::vector<double>& x) {
  const auto& dims = m.spec().dims;
  std::vector<double> h = x;
  const int n = static_cast<int>(dims.size()) - 1;
  for (int layer = 0; layer < n; ++layer) {
    const dowser::tensor& w = m.state().param("layer" + std::to_string(layer) + ".weight");
    const dowser::tensor& b = m.state().param("layer" + std::to_string(layer) + ".bias");
    std::vector<double> z(static_cast<std::size_t>(w.shape[0]), 0.0);
    for (std::int64_t i = 0; i < w.shape[0]; ++i) {
      double acc = b.at(i);
      for (std::int64_t j = 0; j < w.shape[1]; ++j) acc += w.at(i, j) * h[static_cast<std::size_t>(j)];
      z[static_cast<std::size_t>(i)] = acc;
    }
    if (layer + 1 < n) {
      for (double& v : z) {
        if (m.spec().activation == "gelu") {
          v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        } else if (m.spec().activation == "silu") {
          v = v / (1.0 + std::exp(-v));
        }
      }
    }
    h = std::move(z);
  }
  return h;
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l2_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// ||f(theta + dtheta) - f(theta)||_2 measured with two forward passes.
inline double measured_shift(dowser::model& m, const dowser::probe_input& in,
                             const std::string& param, std::int64_t index, double delta) {
  const dowser::tensor base_out = m.forward(in);
  dowser::tensor& theta = m.state().param(param);
  const double original = theta.data[static_cast<std::size_t>(index)];
  theta.data[static_cast<std::size_t>(index)] = original + delta;
  const dowser::tensor shifted_out = m.forward(in);
  theta.data[static_cast<std::size_t>(index)] = original;
  return l2_diff(base_out.data, shifted_out.data);
}

}  // namespace testutil
