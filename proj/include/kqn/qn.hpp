#pragma once

#include <vector>

#include "kqn/linalg.hpp"

namespace kqn {

// --- dense inverse quasi-Newton updates ------------------------------------

// BFGS update of an inverse approximation:
//   H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T,  rho = 1/(s^T y).
// Requires s^T y > 0; the result is explicitly symmetrized.
Matrix bfgs_inverse_update(const Matrix& h, const Vector& s, const Vector& y);

// Restricted Broyden family on the inverse:
//   H+ = H - sigma H y y^T H + rho s s^T + phi (y^T H y) w w^T,
//   w = rho s - sigma H y,  rho = 1/(s^T y),  sigma = 1/(y^T H y).
// phi = 1 recovers BFGS, phi = 0 DFP.
Matrix broyden_update(const Matrix& h, const Vector& s, const Vector& y, double phi);

// (H^{-1} + c a a^T)^{-1} computed on H directly:
//   H+ = H - H a (1/c + a^T H a)^{-1} a^T H.
// a = 0 returns H unchanged.
Matrix sherman_morrison_rank1_inverse(const Matrix& h, const Vector& a, double c);

// --- damping ----------------------------------------------------------------

struct DampResult {
  Vector vec;
  double theta = 1.0;
};

// Stage 1, Powell damping against H: returns stilde with
// stilde^T y >= mu1 y^T H y (equality when damping activates).
DampResult powell_damp_H(const Vector& s, const Vector& y, const Matrix& h, double mu1);
// Operator form for callers whose H is never materialized (L-BFGS): the
// caller supplies hy = H y and yhy = y^T H y.
DampResult powell_damp_H(const Vector& s, const Vector& y, const Vector& hy, double yhy,
                         double mu1);

// Stage 2, Powell damping with B = I: returns ytilde with
// stilde^T ytilde >= mu2 stilde^T stilde.
DampResult powell_damp_identity(const Vector& stilde, const Vector& y, double mu2);

// Classical Powell damping on a direct approximation B:
// ytilde = theta y + (1 - theta) B s so that s^T ytilde >= mu s^T B s.
DampResult powell_damp_B(const Vector& s, const Vector& y, const Matrix& b, double mu);

struct CurvaturePair {
  Vector s;  // stilde
  Vector y;  // ytilde
  double theta1 = 1.0;
  double theta2 = 1.0;
};

// Double damping: stage 1 against H, then stage 2 with B = I. Zero y (stage 1)
// or zero stilde (stage 2) raises DegeneratePairError; callers treat that as
// "skip this update".
CurvaturePair double_damp(const Vector& s, const Vector& y, const Matrix& h, double mu1,
                          double mu2);
CurvaturePair double_damp(const Vector& s, const Vector& y, const Vector& hy, double yhy,
                          double mu1, double mu2);

// Keep-condition of the provably convergent variant: true iff
// stilde^T ytilde >= mu1 ytilde^T H ytilde (false for ytilde = 0), i.e. the
// update may be applied; false means skip.
bool dd_skip_predicate(const CurvaturePair& pair, const Matrix& h, double mu1);
// Operator form; the caller supplies H ytilde.
bool dd_skip_predicate(const CurvaturePair& pair, const Vector& h_ytilde, double mu1);

// --- limited-memory BFGS -----------------------------------------------------

// Classical two-loop recursion with H0 = I over explicit pair lists, oldest
// first. Serves as the oracle for the compact representation and as its
// fallback when the small middle system is numerically singular.
Vector lbfgs_apply_two_loop(const std::vector<Vector>& s_list,
                            const std::vector<Vector>& y_list, const Vector& v);

// Fixed-capacity pair window with the compact (matrix) representation of the
// L-BFGS operator, H0 = I:
//   H = I + [S Y] * M * [S Y]^T,
//   M = [ R^{-T} (D + Y^T Y) R^{-1}   -R^{-T} ]
//       [ -R^{-1}                      0      ]
// with R upper triangular, R(i,j) = s_i^T y_j for i <= j, D = diag(s_i^T y_i).
// R and Y^T Y are maintained incrementally on push; each apply solves
// triangular systems against R, and its dominant cost is two matrix products
// against [S Y].
class LbfgsBuffer {
 public:
  LbfgsBuffer() = default;
  LbfgsBuffer(int dim, int capacity);

  int dim() const { return dim_; }
  int capacity() const { return capacity_; }
  int size() const { return count_; }

  // Append a pair, evicting the oldest at capacity. Requires s^T y > 0.
  void push(const Vector& s, const Vector& y);

  // H v (column-wise for matrices).
  Vector apply(const Vector& v) const;
  Matrix apply(const Matrix& v) const;

  // Pair extraction, oldest first (tests, fallback, monitors).
  std::vector<Vector> s_list() const;
  std::vector<Vector> y_list() const;

 private:
  void drop_oldest();

  int dim_ = 0;
  int capacity_ = 0;
  int count_ = 0;
  Matrix s_cols_;  // dim x count
  Matrix y_cols_;  // dim x count
  Matrix r_;       // count x count, upper triangular
  Matrix yty_;     // count x count
};

// --- Hessian-action update for the A factor ----------------------------------

// The A-side inverse is maintained by BFGS steps whose curvature pairs come
// from the action of the damped moving-average A itself:
//   A <- beta A + (1 - beta) a_outer_mean
//   s = Ha a_bar, y = (A + lambda_a I) s, Ha <- bfgs_inverse_update(Ha, s, y).
// (the non-scaled variant; a_bar = 0 leaves the state untouched).
struct HessianActionState {
  Matrix a;
  Matrix ha;
  double beta = 0.9;
  double lambda_a = 0.0;
};

HessianActionState make_hessian_action_state(int dim, double beta, double lambda_a);

void hessian_action_step(HessianActionState& state, const Matrix& a_outer_mean,
                         const Vector& a_bar);

}  // namespace kqn
