#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dowser/errors.hpp"

namespace dowser {

// Dense row-major f64 value array with a lazily allocated gradient buffer.
// 1-D and 2-D shapes cover everything the model zoo needs.
struct tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it

  tensor() = default;

  static tensor zeros(std::vector<std::int64_t> shape) {
    tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<std::size_t>(numel_of(t.shape)), 0.0);
    return t;
  }

  static tensor from(std::vector<std::int64_t> shape, std::vector<double> values) {
    if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
      throw config_error("tensor::from: shape does not match value count");
    }
    tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
  }

  static tensor identity(std::int64_t n) {
    tensor t = zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i * n + i)] = 1.0;
    return t;
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           [](std::int64_t a, std::int64_t b) { return a * b; });
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape.size()); }

  // Row/column view of 2-D tensors; 1-D tensors count as a single row.
  std::int64_t rows() const { return ndim() == 2 ? shape[0] : 1; }
  std::int64_t cols() const { return ndim() == 2 ? shape[1] : (ndim() == 1 ? shape[0] : 1); }

  double& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols() + c)]; }

  bool same_shape(const tensor& other) const { return shape == other.shape; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void check_finite(const std::string& where) const {
    if (!all_finite()) throw numerical_error("non-finite value produced by " + where);
  }
};

inline std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace dowser
