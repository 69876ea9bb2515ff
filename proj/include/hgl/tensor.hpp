#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hgl/errors.hpp"

namespace hgl {

// Dense row-major matrix of doubles. Everything the tape touches is 2-D:
// scalars are {1,1}, row vectors {1,n}.
struct Tensor {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols)
      : n_rows(rows), n_cols(cols), data(rows * cols, 0.0) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols); }

  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    Tensor t(rows, cols);
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  static Tensor row(const std::vector<double>& v) {
    Tensor t(1, v.size());
    t.data = v;
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return n_rows; }
  std::size_t cols() const { return n_cols; }
  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& at(std::size_t r, std::size_t c) { return data[r * n_cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * n_cols + c]; }

  double* row_ptr(std::size_t r) { return data.data() + r * n_cols; }
  const double* row_ptr(std::size_t r) const { return data.data() + r * n_cols; }

  bool same_shape(const Tensor& o) const {
    return n_rows == o.n_rows && n_cols == o.n_cols;
  }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool bit_equal(const Tensor& o) const {
    if (!same_shape(o)) return false;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data[i] != o.data[i]) return false;
    return true;
  }

  std::string shape_str() const {
    return "{" + std::to_string(n_rows) + "," + std::to_string(n_cols) + "}";
  }
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double sq_dist(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double l2_norm(const double* a, std::size_t n) {
  return std::sqrt(dot(a, a, n));
}

}  // namespace hgl
