#pragma once

// Dense row-major matrices, the handful of kernels the transformer needs,
// and the row-wise statistics used by the divergence metrics.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "dtm/errors.hpp"

namespace dtm {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const noexcept;
  void fill(double v) noexcept;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Quantile level in [0, 1].
class Quantile {
 public:
  explicit Quantile(double q);
  double value() const noexcept { return q_; }

 private:
  double q_;
};

// ---- row statistics ----

std::vector<double> softmax(std::span<const double> row);
std::vector<double> log_softmax(std::span<const double> row);
std::vector<double> softmax_row(const Matrix& m, std::size_t i);

// Index of the maximum entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> row);
std::size_t argmax_row(const Matrix& m, std::size_t i);

// Lower-interpolation empirical quantile: sorted[floor(q * (n - 1))].
double quantile(std::span<const double> values, Quantile q);

double mean(std::span<const double> values);
double stddev(std::span<const double> values);  // sample (n - 1) estimator

// ---- kernels ----
//
// All products accumulate over the shared dimension in ascending order, one
// output row at a time, so a single-row call reproduces the matching row of a
// multi-row call bit for bit.

// out += a * b      (a: m x k, b: k x n, out: m x n)
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out);
Matrix matmul(const Matrix& a, const Matrix& b);

// a * b^T           (a: m x k, b: n x k)
Matrix matmul_bt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

// out += a^T * b    (a: m x k, b: m x n, out: k x n)
void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out);

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace dtm
