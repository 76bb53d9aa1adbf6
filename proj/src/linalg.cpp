// SPDX-License-Identifier: Apache-2.0
#include "pkt/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pkt/error.hpp"

namespace pkt::linalg {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {
  require(rows > 0 && cols > 0, ErrorKind::kShape, "matrix dimensions must be positive");
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  require(rows > 0 && cols > 0, ErrorKind::kShape, "matrix dimensions must be positive");
  require(values_.size() == rows * cols, ErrorKind::kShape,
          "value count " + std::to_string(values_.size()) + " does not match " +
              std::to_string(rows) + "x" + std::to_string(cols));
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  require(rows.size() > 0 && rows.begin()->size() > 0, ErrorKind::kShape,
          "matrix dimensions must be positive");
  rows_ = rows.size();
  cols_ = rows.begin()->size();
  values_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, ErrorKind::kShape, "ragged matrix literal");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool DenseMatrix::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix DenseMatrix::transpose() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

void DenseMatrix::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.cols() == b.rows(), ErrorKind::kShape, "matmul inner dimensions disagree");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShape,
          "matrix shapes disagree");
}

}  // namespace

DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b);
  DenseMatrix c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] += bv[i];
  return c;
}

DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b);
  DenseMatrix c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] -= bv[i];
  return c;
}

double frobenius_norm(const DenseMatrix& m) {
  double acc = 0.0;
  for (double v : m.values()) acc += v * v;
  return std::sqrt(acc);
}

double sum(const DenseMatrix& m) {
  double acc = 0.0;
  for (double v : m.values()) acc += v;
  return acc;
}

// ---------------------------------------------------------------------------
// SVD

namespace {

using Column = std::vector<double>;

double dot(const Column& x, const Column& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

struct TallSvd {
  std::vector<Column> u;  // p columns of length n
  std::vector<double> sigma;
  std::vector<Column> v;  // p columns of length m
};

// One-sided (Hestenes) Jacobi for n >= m: orthogonalize the columns of A by
// plane rotations accumulated into V; then A V = U diag(sigma).
TallSvd jacobi_tall(const DenseMatrix& a) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  std::vector<Column> cols(m, Column(n));
  std::vector<Column> v(m, Column(m, 0.0));
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) cols[j][i] = a(i, j);
    v[j][j] = 1.0;
  }

  constexpr double kTol = 1e-15;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        const double alpha = dot(cols[p], cols[p]);
        const double beta = dot(cols[q], cols[q]);
        const double gamma = dot(cols[p], cols[q]);
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = cols[p][i];
          const double xq = cols[q][i];
          cols[p][i] = c * xp - s * xq;
          cols[q][i] = s * xp + c * xq;
        }
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = v[p][i];
          const double xq = v[q][i];
          v[p][i] = c * xp - s * xq;
          v[q][i] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(m);
  for (std::size_t j = 0; j < m; ++j) norms[j] = std::sqrt(dot(cols[j], cols[j]));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  TallSvd out;
  out.u.resize(m);
  out.sigma.resize(m);
  out.v.resize(m);
  const double sigma_max = norms[order[0]];
  const double null_threshold =
      sigma_max * static_cast<double>(std::max(n, m)) * std::numeric_limits<double>::epsilon();

  std::vector<std::size_t> null_slots;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t j = order[k];
    out.v[k] = std::move(v[j]);
    if (norms[j] > null_threshold && norms[j] > 0.0) {
      out.sigma[k] = norms[j];
      out.u[k] = std::move(cols[j]);
      for (double& x : out.u[k]) x /= norms[j];
    } else {
      out.sigma[k] = 0.0;
      null_slots.push_back(k);
    }
  }

  // Complete U for numerically null directions: pick the standard basis
  // vector with the largest residual against the accepted columns.
  std::vector<std::size_t> accepted;
  for (std::size_t k = 0; k < m; ++k)
    if (out.sigma[k] > 0.0) accepted.push_back(k);
  for (std::size_t slot : null_slots) {
    Column best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < n; ++e) {
      Column cand(n, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k : accepted) {
          const double proj = dot(cand, out.u[k]);
          for (std::size_t i = 0; i < n; ++i) cand[i] -= proj * out.u[k][i];
        }
      }
      const double nrm = std::sqrt(dot(cand, cand));
      if (nrm > best_norm + 1e-12) {
        best_norm = nrm;
        best = std::move(cand);
      }
    }
    for (double& x : best) x /= best_norm;
    out.u[slot] = std::move(best);
    accepted.push_back(slot);
  }
  return out;
}

}  // namespace

SvdFactors svd(const DenseMatrix& m) {
  require(!m.empty(), ErrorKind::kInvalidInput, "svd of an empty matrix");
  require(m.all_finite(), ErrorKind::kInvalidInput, "svd input contains non-finite entries");
  const std::size_t n = m.rows();
  const std::size_t cols = m.cols();
  const std::size_t p = std::min(n, cols);

  SvdFactors f{DenseMatrix(n, p), {}, DenseMatrix(p, cols)};
  if (n >= cols) {
    TallSvd t = jacobi_tall(m);
    f.sigma = t.sigma;
    for (std::size_t k = 0; k < p; ++k) {
      for (std::size_t i = 0; i < n; ++i) f.u(i, k) = t.u[k][i];
      for (std::size_t j = 0; j < cols; ++j) f.vt(k, j) = t.v[k][j];
    }
  } else {
    // M^T = U' S V'^T  =>  M = V' S U'^T.
    TallSvd t = jacobi_tall(m.transpose());
    f.sigma = t.sigma;
    for (std::size_t k = 0; k < p; ++k) {
      for (std::size_t i = 0; i < n; ++i) f.u(i, k) = t.v[k][i];
      for (std::size_t j = 0; j < cols; ++j) f.vt(k, j) = t.u[k][j];
    }
  }

  for (std::size_t k = 0; k < p; ++k) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mag = std::abs(f.u(i, k));
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    if (f.u(arg, k) < 0.0) {
      for (std::size_t i = 0; i < n; ++i) f.u(i, k) = -f.u(i, k);
      for (std::size_t j = 0; j < cols; ++j) f.vt(k, j) = -f.vt(k, j);
    }
  }
  return f;
}

LowRankFactors truncated_factors(const SvdFactors& f, std::size_t rank) {
  const std::size_t n = f.u.rows();
  const std::size_t m = f.vt.cols();
  const std::size_t p = f.sigma.size();
  require(rank >= 1 && rank <= p, ErrorKind::kRank,
          "rank " + std::to_string(rank) + " outside [1, " + std::to_string(p) + "]");
  LowRankFactors out{DenseMatrix(n, rank), DenseMatrix(rank, m)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < rank; ++k) out.b(i, k) = f.u(i, k) * f.sigma[k];
  for (std::size_t k = 0; k < rank; ++k)
    for (std::size_t j = 0; j < m; ++j) out.a(k, j) = f.vt(k, j);
  return out;
}

DenseMatrix reconstruct(const SvdFactors& f) {
  auto lr = truncated_factors(f, f.sigma.size());
  return matmul(lr.b, lr.a);
}

// ---------------------------------------------------------------------------
// Prefix sums and window search

PrefixTable::PrefixTable(const DenseMatrix& source)
    : rows_(source.rows()), cols_(source.cols()), table_((rows_ + 1) * (cols_ + 1), 0.0) {
  require(source.all_finite(), ErrorKind::kInvalidInput, "prefix sum input contains non-finite entries");
  const std::size_t w = cols_ + 1;
  for (std::size_t i = 0; i < rows_; ++i) {
    double row_acc = 0.0;
    for (std::size_t j = 0; j < cols_; ++j) {
      row_acc += source(i, j);
      table_[(i + 1) * w + (j + 1)] = table_[i * w + (j + 1)] + row_acc;
    }
  }
}

double PrefixTable::rect_sum(std::size_t top, std::size_t left, std::size_t height,
                             std::size_t width) const {
  require(top + height <= rows_ && left + width <= cols_, ErrorKind::kShape,
          "rectangle exceeds prefix table bounds");
  const std::size_t b = top + height;
  const std::size_t r = left + width;
  return at(b, r) - at(top, r) - at(b, left) + at(top, left);
}

PrefixTable prefix_sum_2d(const DenseMatrix& m) { return PrefixTable(m); }

double window_sum(const DenseMatrix& s, std::size_t top, std::size_t left, std::size_t height,
                  std::size_t width) {
  double acc = 0.0;
  for (std::size_t i = top; i < top + height; ++i)
    for (std::size_t j = left; j < left + width; ++j) acc += s(i, j);
  return acc;
}

WindowSelection max_sum_window(const DenseMatrix& s, std::size_t height, std::size_t width) {
  require(height >= 1 && width >= 1 && height <= s.rows() && width <= s.cols(),
          ErrorKind::kShape,
          "window " + std::to_string(height) + "x" + std::to_string(width) +
              " does not fit in " + std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
  for (double v : s.values())
    require(v >= 0.0, ErrorKind::kInvalidInput, "max_sum_window requires nonnegative entries");
  const PrefixTable table(s);
  WindowSelection best{0, 0, height, width, -1.0};
  for (std::size_t top = 0; top + height <= s.rows(); ++top) {
    for (std::size_t left = 0; left + width <= s.cols(); ++left) {
      const double score = table.rect_sum(top, left, height, width);
      if (score > best.score) {
        best.top_row = top;
        best.left_col = left;
        best.score = score;
      }
    }
  }
  best.score = window_sum(s, best.top_row, best.left_col, height, width);
  return best;
}

}  // namespace pkt::linalg
