#include "kqn/linalg.hpp"

#include <cblas.h>
#include <lapacke.h>

#include <cmath>
#include <string>

namespace kqn {

namespace {

std::string shape_str(const Matrix& a) {
  return std::to_string(a.rows) + "x" + std::to_string(a.cols);
}

void check_square(const Matrix& a, const char* who) {
  if (a.rows != a.cols) {
    throw DimensionError(std::string(who) + ": matrix must be square, got " + shape_str(a));
  }
}

void check_symmetric(const Matrix& a, const char* who) {
  const double tol = 1e-10 * std::max(1.0, max_abs(a));
  for (int i = 0; i < a.rows; ++i) {
    for (int j = i + 1; j < a.cols; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > tol) {
        throw NotSymmetricError(std::string(who) + ": matrix is not symmetric at (" +
                                std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }
}

// Copies the upper triangle (inclusive of the diagonal) onto the lower one.
void mirror_upper(Matrix& a) {
  for (int i = 0; i < a.rows; ++i) {
    for (int j = i + 1; j < a.cols; ++j) {
      a(j, i) = a(i, j);
    }
  }
}

}  // namespace

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix gemm(const Matrix& a, const Matrix& b, bool transpose_a, bool transpose_b) {
  const int m = transpose_a ? a.cols : a.rows;
  const int k = transpose_a ? a.rows : a.cols;
  const int kb = transpose_b ? b.cols : b.rows;
  const int n = transpose_b ? b.rows : b.cols;
  if (k != kb) {
    throw DimensionError("gemm: inner dimensions differ, " + shape_str(a) +
                         (transpose_a ? "^T" : "") + " * " + shape_str(b) +
                         (transpose_b ? "^T" : ""));
  }
  Matrix c(m, n);
  if (m == 0 || n == 0) return c;
  if (k == 0) return c;  // conventionally zero
  cblas_dgemm(CblasRowMajor, transpose_a ? CblasTrans : CblasNoTrans,
              transpose_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a.data.data(),
              a.cols, b.data.data(), b.cols, 0.0, c.data.data(), c.cols);
  return c;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols != int(x.size())) {
    throw DimensionError("matvec: " + shape_str(a) + " * vector of length " +
                         std::to_string(x.size()));
  }
  Vector y(a.rows, 0.0);
  if (a.rows == 0 || a.cols == 0) return y;
  cblas_dgemv(CblasRowMajor, CblasNoTrans, a.rows, a.cols, 1.0, a.data.data(), a.cols,
              x.data(), 1, 0.0, y.data(), 1);
  return y;
}

Matrix batch_outer_mean(const std::vector<Vector>& batch) {
  if (batch.empty()) {
    throw EmptyBatchError("batch_outer_mean: batch has no samples");
  }
  const int d = int(batch[0].size());
  const int m = int(batch.size());
  Matrix s(m, d);
  for (int i = 0; i < m; ++i) {
    if (int(batch[i].size()) != d) {
      throw DimensionError("batch_outer_mean: sample " + std::to_string(i) +
                           " has length " + std::to_string(batch[i].size()) +
                           ", expected " + std::to_string(d));
    }
    std::copy(batch[i].begin(), batch[i].end(), s.data.begin() + size_t(i) * d);
  }
  Matrix out(d, d);
  if (d == 0) return out;
  // out = (1/m) S^T S, upper triangle, then mirrored for exact symmetry.
  cblas_dsyrk(CblasRowMajor, CblasUpper, CblasTrans, d, m, 1.0 / m, s.data.data(), d,
              0.0, out.data.data(), d);
  mirror_upper(out);
  return out;
}

Matrix outer_mean_cols(const Matrix& x) {
  if (x.cols == 0) {
    throw EmptyBatchError("outer_mean_cols: no columns");
  }
  Matrix out(x.rows, x.rows);
  if (x.rows == 0) return out;
  cblas_dsyrk(CblasRowMajor, CblasUpper, CblasNoTrans, x.rows, x.cols, 1.0 / x.cols,
              x.data.data(), x.cols, 0.0, out.data.data(), out.cols);
  mirror_upper(out);
  return out;
}

Matrix spd_inverse(const Matrix& a) {
  check_square(a, "spd_inverse");
  if (!all_finite(a)) {
    throw NotPositiveDefiniteError("spd_inverse: matrix has non-finite entries");
  }
  check_symmetric(a, "spd_inverse");
  Matrix f = a;
  const int n = a.rows;
  int info = LAPACKE_dpotrf(LAPACK_ROW_MAJOR, 'U', n, f.data.data(), n);
  if (info != 0) {
    throw NotPositiveDefiniteError("spd_inverse: factorization failed at pivot " +
                                   std::to_string(info));
  }
  for (int i = 0; i < n; ++i) {
    const double pivot = f(i, i) * f(i, i);
    if (!std::isfinite(pivot) || pivot <= 1e-300) {
      throw NotPositiveDefiniteError("spd_inverse: pivot " + std::to_string(i) +
                                     " below threshold");
    }
  }
  info = LAPACKE_dpotri(LAPACK_ROW_MAJOR, 'U', n, f.data.data(), n);
  if (info != 0) {
    throw NotPositiveDefiniteError("spd_inverse: inversion failed at pivot " +
                                   std::to_string(info));
  }
  mirror_upper(f);
  return f;
}

Matrix kron_sandwich(const Matrix& hg, const Matrix& v, const Matrix& ha) {
  check_square(hg, "kron_sandwich");
  check_square(ha, "kron_sandwich");
  if (hg.cols != v.rows || v.cols != ha.rows) {
    throw DimensionError("kron_sandwich: shapes " + shape_str(hg) + " * " + shape_str(v) +
                         " * " + shape_str(ha) + " do not chain");
  }
  return gemm(gemm(hg, v), ha);
}

double extreme_eigenvalue_estimate(const Matrix& a, EigenExtreme which) {
  check_square(a, "extreme_eigenvalue_estimate");
  check_symmetric(a, "extreme_eigenvalue_estimate");
  const int n = a.rows;
  if (n == 0) {
    throw DimensionError("extreme_eigenvalue_estimate: empty matrix");
  }
  Matrix work = a;
  Vector w(n, 0.0);
  int info = LAPACKE_dsyev(LAPACK_ROW_MAJOR, 'N', 'U', n, work.data.data(), n, w.data());
  if (info != 0) {
    throw std::runtime_error("extreme_eigenvalue_estimate: eigensolve failed, info = " +
                             std::to_string(info));
  }
  return which == EigenExtreme::min ? w.front() : w.back();
}

double dot(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) {
    throw DimensionError("dot: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(y.size()));
  }
  return cblas_ddot(int(x.size()), x.data(), 1, y.data(), 1);
}

Matrix outer(const Vector& u, const Vector& v) {
  Matrix m(int(u.size()), int(v.size()));
  for (int i = 0; i < m.rows; ++i) {
    for (int j = 0; j < m.cols; ++j) {
      m(i, j) = u[i] * v[j];
    }
  }
  return m;
}

void axpy(double c, const Matrix& x, Matrix& y) {
  if (!x.same_shape(y)) {
    throw DimensionError("axpy: shapes " + shape_str(x) + " and " + shape_str(y));
  }
  cblas_daxpy(int(x.data.size()), c, x.data.data(), 1, y.data.data(), 1);
}

void scale_in_place(Matrix& a, double c) {
  cblas_dscal(int(a.data.size()), c, a.data.data(), 1);
}

void add_scaled_identity(Matrix& a, double c) {
  check_square(a, "add_scaled_identity");
  for (int i = 0; i < a.rows; ++i) a(i, i) += c;
}

void symmetrize(Matrix& a) {
  check_square(a, "symmetrize");
  for (int i = 0; i < a.rows; ++i) {
    for (int j = i + 1; j < a.cols; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
  }
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::abs(v));
  return m;
}

double max_abs(const Vector& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

bool all_finite(const Matrix& a) {
  for (double v : a.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool all_finite(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace kqn
