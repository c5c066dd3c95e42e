#pragma once

#include <vector>

#include "kqn/errors.hpp"

namespace kqn {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {}

  double& operator()(int r, int c) { return data[size_t(r) * cols + c]; }
  double operator()(int r, int c) const { return data[size_t(r) * cols + c]; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  static Matrix identity(int n);
};

// C = op(A) op(B) with optional logical transposes.
Matrix gemm(const Matrix& a, const Matrix& b, bool transpose_a = false,
            bool transpose_b = false);

Vector matvec(const Matrix& a, const Vector& x);

// Mean of v v^T over the batch. Result is symmetric to the last bit
// (upper triangle computed once, mirrored).
Matrix batch_outer_mean(const std::vector<Vector>& batch);

// Same statistic for samples stored as the columns of x: (1/cols) x x^T.
Matrix outer_mean_cols(const Matrix& x);

// Inverse of a symmetric positive definite matrix via Cholesky factorization.
// Symmetry is checked to 1e-10 (relative); a non-finite or <= 1e-300 pivot
// raises NotPositiveDefiniteError.
Matrix spd_inverse(const Matrix& a);

// Hg * V * Ha: the Kronecker-factored preconditioner applied to a gradient
// block. Equals unvec((Ha x Hg) vec(V)) for symmetric Ha under column-stacking.
Matrix kron_sandwich(const Matrix& hg, const Matrix& v, const Matrix& ha);

enum class EigenExtreme { min, max };

// Smallest or largest eigenvalue of a symmetric matrix (full dense eigensolve).
double extreme_eigenvalue_estimate(const Matrix& a, EigenExtreme which);

// --- small helpers shared across modules ---

double dot(const Vector& x, const Vector& y);
Matrix outer(const Vector& u, const Vector& v);

// y += c * x (shapes must match).
void axpy(double c, const Matrix& x, Matrix& y);
void scale_in_place(Matrix& a, double c);
void add_scaled_identity(Matrix& a, double c);
void symmetrize(Matrix& a);

double max_abs(const Matrix& a);
double max_abs(const Vector& v);
bool all_finite(const Matrix& a);
bool all_finite(const Vector& v);

}  // namespace kqn
