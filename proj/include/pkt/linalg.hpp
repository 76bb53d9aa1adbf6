// SPDX-License-Identifier: Apache-2.0
//
// Dense matrix primitives: SVD (one-sided Jacobi), rank-r factor
// construction, 2-D prefix sums and exact fixed-size max-sum window search.
// All reductions accumulate in double.
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace pkt::linalg {

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  bool all_finite() const noexcept;
  DenseMatrix transpose() const;
  void fill(double v);

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b);
double frobenius_norm(const DenseMatrix& m);
double sum(const DenseMatrix& m);

struct SvdFactors {
  DenseMatrix u;              // n x p, p = min(n, m)
  std::vector<double> sigma;  // length p, descending, nonnegative
  DenseMatrix vt;             // p x m
};

// Full thin SVD. For every triplet the largest-magnitude entry of the left
// singular vector is nonnegative (ties: lowest row index).
SvdFactors svd(const DenseMatrix& m);

// U[:, :r] diag(sigma[:r]) and Vt[:r, :].
struct LowRankFactors {
  DenseMatrix b;  // n x r
  DenseMatrix a;  // r x m
};
LowRankFactors truncated_factors(const SvdFactors& f, std::size_t rank);

DenseMatrix reconstruct(const SvdFactors& f);

// (rows+1) x (cols+1) cumulative sums; entry (i, j) = sum over [0,i) x [0,j).
class PrefixTable {
 public:
  PrefixTable() = default;
  explicit PrefixTable(const DenseMatrix& source);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double at(std::size_t i, std::size_t j) const { return table_[i * (cols_ + 1) + j]; }
  double rect_sum(std::size_t top, std::size_t left, std::size_t height,
                  std::size_t width) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> table_;
};

PrefixTable prefix_sum_2d(const DenseMatrix& m);

struct WindowSelection {
  std::size_t top_row = 0;
  std::size_t left_col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  double score = 0.0;
};

// Exact argmax over all contiguous height x width windows of a nonnegative
// matrix. Ties go to the smallest (top_row, left_col).
WindowSelection max_sum_window(const DenseMatrix& s, std::size_t height, std::size_t width);

// Sum of the covered entries, accumulated directly in row-major order.
double window_sum(const DenseMatrix& s, std::size_t top, std::size_t left,
                  std::size_t height, std::size_t width);

}  // namespace pkt::linalg
