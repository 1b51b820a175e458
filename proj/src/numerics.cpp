#include "dtm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace dtm {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ArgumentError("matrix data length " + std::to_string(data_.size()) + " != " +
                        std::to_string(rows) + " x " + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ArgumentError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Quantile::Quantile(double q) : q_(q) {
  if (!(q >= 0.0 && q <= 1.0)) throw ArgumentError("quantile level must lie in [0, 1]");
}

// ---- row statistics ----

namespace {

void require_finite(std::span<const double> row) {
  for (double v : row) {
    if (!std::isfinite(v)) throw DomainError("non-finite logit");
  }
}

}  // namespace

std::vector<double> softmax(std::span<const double> row) {
  if (row.empty()) throw DomainError("softmax of empty row");
  require_finite(row);
  const double hi = *std::max_element(row.begin(), row.end());
  std::vector<double> out(row.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    out[j] = std::exp(row[j] - hi);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> log_softmax(std::span<const double> row) {
  if (row.empty()) throw DomainError("log_softmax of empty row");
  require_finite(row);
  const double hi = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - hi);
  const double log_z = hi + std::log(sum);
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - log_z;
  return out;
}

std::vector<double> softmax_row(const Matrix& m, std::size_t i) {
  if (i >= m.rows()) throw ArgumentError("row index out of range");
  return softmax(m.row(i));
}

std::size_t argmax(std::span<const double> row) {
  if (row.empty()) throw DomainError("argmax of empty row");
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

std::size_t argmax_row(const Matrix& m, std::size_t i) {
  if (i >= m.rows()) throw ArgumentError("row index out of range");
  return argmax(m.row(i));
}

double quantile(std::span<const double> values, Quantile q) {
  if (values.empty()) throw DomainError("quantile of empty list");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto idx = static_cast<std::size_t>(std::floor(q.value() * static_cast<double>(sorted.size() - 1)));
  return sorted[std::min(idx, sorted.size() - 1)];
}

double mean(std::span<const double> values) {
  if (values.empty()) throw DomainError("mean of empty list");
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double mu = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

// ---- kernels ----

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  double* __restrict yp = y.data();
  const double* __restrict xp = x.data();
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) yp[i] += alpha * xp[i];
}

namespace {

using Lane = double __attribute__((vector_size(64)));  // 8 doubles
constexpr std::size_t kLane = 8;
constexpr std::size_t kRowBlock = 4;

// out[0..R)[0..8V) += sum_k a(r, k) * b(k, c), k ascending. Every output
// element sees the same sequence of multiply-adds whatever the block shape,
// so a one-row call reproduces the rows of a many-row call bit for bit.
template <std::size_t R, std::size_t V>
inline void block_acc(const double* __restrict a, std::size_t lda, std::size_t a_step, const double* __restrict b,
                      std::size_t ldb, double* __restrict out, std::size_t ldo, std::size_t k_dim) {
  Lane acc[R][V];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < V; ++v) std::memcpy(&acc[r][v], out + r * ldo + kLane * v, sizeof(Lane));
  }
  for (std::size_t k = 0; k < k_dim; ++k) {
    Lane bv[V];
    for (std::size_t v = 0; v < V; ++v) std::memcpy(&bv[v], b + k * ldb + kLane * v, sizeof(Lane));
    for (std::size_t r = 0; r < R; ++r) {
      const double s = a[r * lda + k * a_step];
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += s * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < V; ++v) std::memcpy(out + r * ldo + kLane * v, &acc[r][v], sizeof(Lane));
  }
}

template <std::size_t R>
void row_block(const double* a, std::size_t lda, std::size_t a_step, std::size_t k_dim, const double* b,
               std::size_t cols, double* out) {
  std::size_t j = 0;
  for (; j + 2 * kLane <= cols; j += 2 * kLane) block_acc<R, 2>(a, lda, a_step, b + j, cols, out + j, cols, k_dim);
  for (; j + kLane <= cols; j += kLane) block_acc<R, 1>(a, lda, a_step, b + j, cols, out + j, cols, k_dim);
  if (j == cols) return;
  for (std::size_t r = 0; r < R; ++r) {
    double* dst = out + r * cols;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double s = a[r * lda + k * a_step];
      const double* brow = b + k * cols;
      for (std::size_t c = j; c < cols; ++c) dst[c] += s * brow[c];
    }
  }
}

// Element (i, k) of the left operand lives at a[i * lda + k * a_step].
void blocked_acc(const double* a, std::size_t lda, std::size_t a_step, std::size_t rows, std::size_t k_dim,
                 const double* b, std::size_t cols, double* out) {
  std::size_t i = 0;
  for (; i + kRowBlock <= rows; i += kRowBlock) {
    row_block<kRowBlock>(a + i * lda, lda, a_step, k_dim, b, cols, out + i * cols);
  }
  for (; i < rows; ++i) row_block<1>(a + i * lda, lda, a_step, k_dim, b, cols, out + i * cols);
}

}  // namespace

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) {
    throw ArgumentError("matmul shape mismatch");
  }
  blocked_acc(a.values().data(), a.cols(), 1, a.rows(), a.cols(), b.values().data(), b.cols(), out.values().data());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  }
  return t;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ArgumentError("matmul_bt shape mismatch");
  return matmul(a, transpose(b));
}

void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ArgumentError("matmul_at shape mismatch");
  }
  blocked_acc(a.values().data(), 1, a.cols(), a.cols(), a.rows(), b.values().data(), b.cols(), out.values().data());
}


}  // namespace dtm
