#include "kqn/qn.hpp"

#include <cblas.h>

#include <cmath>
#include <cstdio>
#include <string>

namespace kqn {

namespace {

bool is_zero(const Vector& v) {
  for (double x : v) {
    if (x != 0.0) return false;
  }
  return true;
}

void check_vec_dim(const Matrix& h, const Vector& v, const char* who) {
  if (h.rows != h.cols || h.rows != int(v.size())) {
    throw DimensionError(std::string(who) + ": H is " + std::to_string(h.rows) + "x" +
                         std::to_string(h.cols) + ", vector has length " +
                         std::to_string(v.size()));
  }
}

// m += c u v^T
void rank1_add(Matrix& m, double c, const Vector& u, const Vector& v) {
  cblas_dger(CblasRowMajor, m.rows, m.cols, c, u.data(), 1, v.data(), 1, m.data.data(),
             m.cols);
}

}  // namespace

Matrix bfgs_inverse_update(const Matrix& h, const Vector& s, const Vector& y) {
  check_vec_dim(h, s, "bfgs_inverse_update");
  check_vec_dim(h, y, "bfgs_inverse_update");
  const double sy = dot(s, y);
  if (!(sy > 0.0)) {
    throw CurvatureConditionError("bfgs_inverse_update: s^T y = " + std::to_string(sy) +
                                  " is not positive");
  }
  const double rho = 1.0 / sy;
  Vector hy = matvec(h, y);
  const double yhy = dot(y, hy);
  // H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
  Matrix out = h;
  rank1_add(out, -rho, s, hy);
  rank1_add(out, -rho, hy, s);
  rank1_add(out, rho * rho * yhy + rho, s, s);
  symmetrize(out);
  return out;
}

Matrix broyden_update(const Matrix& h, const Vector& s, const Vector& y, double phi) {
  check_vec_dim(h, s, "broyden_update");
  check_vec_dim(h, y, "broyden_update");
  if (phi < 0.0 || phi > 1.0) {
    throw std::invalid_argument("broyden_update: phi must lie in [0, 1], got " +
                                std::to_string(phi));
  }
  const double sy = dot(s, y);
  if (!(sy > 0.0)) {
    throw CurvatureConditionError("broyden_update: s^T y = " + std::to_string(sy) +
                                  " is not positive");
  }
  Vector hy = matvec(h, y);
  const double yhy = dot(y, hy);
  if (!(yhy > 0.0)) {
    throw CurvatureConditionError("broyden_update: y^T H y = " + std::to_string(yhy) +
                                  " is not positive");
  }
  const double rho = 1.0 / sy;
  const double sigma = 1.0 / yhy;
  Vector w(s.size());
  for (size_t i = 0; i < w.size(); ++i) w[i] = rho * s[i] - sigma * hy[i];
  Matrix out = h;
  rank1_add(out, -sigma, hy, hy);
  rank1_add(out, rho, s, s);
  if (phi != 0.0) rank1_add(out, phi * yhy, w, w);
  symmetrize(out);
  return out;
}

Matrix sherman_morrison_rank1_inverse(const Matrix& h, const Vector& a, double c) {
  check_vec_dim(h, a, "sherman_morrison_rank1_inverse");
  if (!(c > 0.0)) {
    throw std::invalid_argument("sherman_morrison_rank1_inverse: c must be positive");
  }
  if (is_zero(a)) return h;
  Vector ha = matvec(h, a);
  const double denom = 1.0 / c + dot(a, ha);
  Matrix out = h;
  rank1_add(out, -1.0 / denom, ha, ha);
  symmetrize(out);
  return out;
}

DampResult powell_damp_H(const Vector& s, const Vector& y, const Vector& hy, double yhy,
                         double mu1) {
  if (is_zero(y)) {
    throw DegeneratePairError("powell_damp_H: y is zero");
  }
  if (!(yhy > 0.0)) {
    throw CurvatureConditionError("powell_damp_H: y^T H y = " + std::to_string(yhy) +
                                  " is not positive");
  }
  const double sy = dot(s, y);
  if (sy >= mu1 * yhy) {
    return {s, 1.0};
  }
  const double theta = (1.0 - mu1) * yhy / (yhy - sy);
  Vector stilde(s.size());
  for (size_t i = 0; i < s.size(); ++i) stilde[i] = theta * s[i] + (1.0 - theta) * hy[i];
  return {std::move(stilde), theta};
}

DampResult powell_damp_H(const Vector& s, const Vector& y, const Matrix& h, double mu1) {
  check_vec_dim(h, y, "powell_damp_H");
  Vector hy = matvec(h, y);
  return powell_damp_H(s, y, hy, dot(y, hy), mu1);
}

DampResult powell_damp_identity(const Vector& stilde, const Vector& y, double mu2) {
  if (is_zero(stilde)) {
    throw DegeneratePairError("powell_damp_identity: stilde is zero");
  }
  const double ss = dot(stilde, stilde);
  const double sy = dot(stilde, y);
  if (sy >= mu2 * ss) {
    return {y, 1.0};
  }
  const double theta = (1.0 - mu2) * ss / (ss - sy);
  Vector ytilde(y.size());
  for (size_t i = 0; i < y.size(); ++i) {
    ytilde[i] = theta * y[i] + (1.0 - theta) * stilde[i];
  }
  return {std::move(ytilde), theta};
}

DampResult powell_damp_B(const Vector& s, const Vector& y, const Matrix& b, double mu) {
  check_vec_dim(b, s, "powell_damp_B");
  if (is_zero(s)) {
    throw DegeneratePairError("powell_damp_B: s is zero");
  }
  Vector bs = matvec(b, s);
  const double sbs = dot(s, bs);
  if (!(sbs > 0.0)) {
    throw CurvatureConditionError("powell_damp_B: s^T B s = " + std::to_string(sbs) +
                                  " is not positive");
  }
  const double sy = dot(s, y);
  if (sy >= mu * sbs) {
    return {y, 1.0};
  }
  const double theta = (1.0 - mu) * sbs / (sbs - sy);
  Vector ytilde(y.size());
  for (size_t i = 0; i < y.size(); ++i) ytilde[i] = theta * y[i] + (1.0 - theta) * bs[i];
  return {std::move(ytilde), theta};
}

CurvaturePair double_damp(const Vector& s, const Vector& y, const Vector& hy, double yhy,
                          double mu1, double mu2) {
  DampResult stage1 = powell_damp_H(s, y, hy, yhy, mu1);
  DampResult stage2 = powell_damp_identity(stage1.vec, y, mu2);
  return {std::move(stage1.vec), std::move(stage2.vec), stage1.theta, stage2.theta};
}

CurvaturePair double_damp(const Vector& s, const Vector& y, const Matrix& h, double mu1,
                          double mu2) {
  check_vec_dim(h, y, "double_damp");
  Vector hy = matvec(h, y);
  return double_damp(s, y, hy, dot(y, hy), mu1, mu2);
}

bool dd_skip_predicate(const CurvaturePair& pair, const Vector& h_ytilde, double mu1) {
  if (is_zero(pair.y)) return false;
  return dot(pair.s, pair.y) >= mu1 * dot(pair.y, h_ytilde);
}

bool dd_skip_predicate(const CurvaturePair& pair, const Matrix& h, double mu1) {
  if (is_zero(pair.y)) return false;
  return dd_skip_predicate(pair, matvec(h, pair.y), mu1);
}

Vector lbfgs_apply_two_loop(const std::vector<Vector>& s_list,
                            const std::vector<Vector>& y_list, const Vector& v) {
  if (s_list.size() != y_list.size()) {
    throw DimensionError("lbfgs_apply_two_loop: " + std::to_string(s_list.size()) +
                         " s vectors vs " + std::to_string(y_list.size()) + " y vectors");
  }
  const int p = int(s_list.size());
  Vector q = v;
  std::vector<double> alpha(p, 0.0), rho(p, 0.0);
  for (int i = p - 1; i >= 0; --i) {
    rho[i] = 1.0 / dot(s_list[i], y_list[i]);
    alpha[i] = rho[i] * dot(s_list[i], q);
    for (size_t k = 0; k < q.size(); ++k) q[k] -= alpha[i] * y_list[i][k];
  }
  Vector r = q;  // H0 = I
  for (int i = 0; i < p; ++i) {
    const double beta = rho[i] * dot(y_list[i], r);
    for (size_t k = 0; k < r.size(); ++k) r[k] += (alpha[i] - beta) * s_list[i][k];
  }
  return r;
}

LbfgsBuffer::LbfgsBuffer(int dim, int capacity) : dim_(dim), capacity_(capacity) {
  if (dim <= 0 || capacity <= 0) {
    throw DimensionError("LbfgsBuffer: dim and capacity must be positive");
  }
  s_cols_ = Matrix(dim, 0);
  y_cols_ = Matrix(dim, 0);
  r_ = Matrix(0, 0);
  yty_ = Matrix(0, 0);
}

namespace {

Matrix append_column(const Matrix& m, const Vector& col) {
  Matrix out(m.rows, m.cols + 1);
  for (int i = 0; i < m.rows; ++i) {
    for (int j = 0; j < m.cols; ++j) out(i, j) = m(i, j);
    out(i, m.cols) = col[i];
  }
  return out;
}

Matrix drop_first_row_col(const Matrix& m) {
  Matrix out(m.rows - 1, m.cols - 1);
  for (int i = 1; i < m.rows; ++i)
    for (int j = 1; j < m.cols; ++j) out(i - 1, j - 1) = m(i, j);
  return out;
}

Matrix drop_first_col(const Matrix& m) {
  Matrix out(m.rows, m.cols - 1);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 1; j < m.cols; ++j) out(i, j - 1) = m(i, j);
  return out;
}

}  // namespace

void LbfgsBuffer::drop_oldest() {
  s_cols_ = drop_first_col(s_cols_);
  y_cols_ = drop_first_col(y_cols_);
  r_ = drop_first_row_col(r_);
  yty_ = drop_first_row_col(yty_);
  --count_;
}

void LbfgsBuffer::push(const Vector& s, const Vector& y) {
  if (int(s.size()) != dim_ || int(y.size()) != dim_) {
    throw DimensionError("LbfgsBuffer::push: pair length " + std::to_string(s.size()) +
                         "/" + std::to_string(y.size()) + ", buffer dim " +
                         std::to_string(dim_));
  }
  const double sy = dot(s, y);
  if (!(sy > 0.0)) {
    throw CurvatureConditionError("LbfgsBuffer::push: s^T y = " + std::to_string(sy) +
                                  " is not positive");
  }
  if (count_ == capacity_) drop_oldest();

  // Extend R and Y^T Y by one column/row: R(i, new) = s_i^T y_new including
  // the new diagonal entry; the new row of R below the diagonal is zero.
  const int q = count_;
  Matrix r_new(q + 1, q + 1);
  Matrix yty_new(q + 1, q + 1);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) {
      r_new(i, j) = r_(i, j);
      yty_new(i, j) = yty_(i, j);
    }
  for (int i = 0; i < q; ++i) {
    double siy = 0.0, yiy = 0.0;
    for (int k = 0; k < dim_; ++k) {
      siy += s_cols_(k, i) * y[k];
      yiy += y_cols_(k, i) * y[k];
    }
    r_new(i, q) = siy;
    yty_new(i, q) = yiy;
    yty_new(q, i) = yiy;
  }
  r_new(q, q) = sy;
  yty_new(q, q) = dot(y, y);
  r_ = std::move(r_new);
  yty_ = std::move(yty_new);
  s_cols_ = append_column(s_cols_, s);
  y_cols_ = append_column(y_cols_, y);
  ++count_;
}

std::vector<Vector> LbfgsBuffer::s_list() const {
  std::vector<Vector> out(count_, Vector(dim_));
  for (int j = 0; j < count_; ++j)
    for (int i = 0; i < dim_; ++i) out[j][i] = s_cols_(i, j);
  return out;
}

std::vector<Vector> LbfgsBuffer::y_list() const {
  std::vector<Vector> out(count_, Vector(dim_));
  for (int j = 0; j < count_; ++j)
    for (int i = 0; i < dim_; ++i) out[j][i] = y_cols_(i, j);
  return out;
}

Matrix LbfgsBuffer::apply(const Matrix& v) const {
  if (v.rows != dim_) {
    throw DimensionError("LbfgsBuffer::apply: operand has " + std::to_string(v.rows) +
                         " rows, buffer dim " + std::to_string(dim_));
  }
  if (count_ == 0) return v;
  const int p = count_;

  // Guard the triangular solves: R's diagonal entries are the s^T y values,
  // positive at push time but conceivably underflowed.
  for (int i = 0; i < p; ++i) {
    if (!(std::abs(r_(i, i)) > 1e-300)) {
      std::fprintf(stderr,
                   "LbfgsBuffer::apply: near-singular middle system, "
                   "falling back to two-loop recursion\n");
      auto sl = s_list();
      auto yl = y_list();
      Matrix out(v.rows, v.cols);
      Vector col(v.rows);
      for (int j = 0; j < v.cols; ++j) {
        for (int i2 = 0; i2 < v.rows; ++i2) col[i2] = v(i2, j);
        Vector res = lbfgs_apply_two_loop(sl, yl, col);
        for (int i2 = 0; i2 < v.rows; ++i2) out(i2, j) = res[i2];
      }
      return out;
    }
  }

  // [S Y]^T v, split as u_s (top) and u_y (bottom).
  Matrix u_s = gemm(s_cols_, v, true, false);
  Matrix u_y = gemm(y_cols_, v, true, false);

  // t1 = R^{-1} u_s (back substitution, R upper triangular).
  Matrix t1 = u_s;
  for (int j = 0; j < t1.cols; ++j) {
    for (int i = p - 1; i >= 0; --i) {
      double acc = t1(i, j);
      for (int k = i + 1; k < p; ++k) acc -= r_(i, k) * t1(k, j);
      t1(i, j) = acc / r_(i, i);
    }
  }
  // t2 = (D + Y^T Y) t1 - u_y, with D = diag(R).
  Matrix t2(p, t1.cols);
  for (int j = 0; j < t1.cols; ++j) {
    for (int i = 0; i < p; ++i) {
      double acc = r_(i, i) * t1(i, j) - u_y(i, j);
      for (int k = 0; k < p; ++k) acc += yty_(i, k) * t1(k, j);
      t2(i, j) = acc;
    }
  }
  // top = R^{-T} t2 (forward substitution on the transposed factor).
  Matrix top = t2;
  for (int j = 0; j < top.cols; ++j) {
    for (int i = 0; i < p; ++i) {
      double acc = top(i, j);
      for (int k = 0; k < i; ++k) acc -= r_(k, i) * top(k, j);
      top(i, j) = acc / r_(i, i);
    }
  }

  // result = v + S top - Y t1; the two d-sized products dominate.
  Matrix out = v;
  Matrix s_top = gemm(s_cols_, top);
  axpy(1.0, s_top, out);
  Matrix y_t1 = gemm(y_cols_, t1);
  axpy(-1.0, y_t1, out);
  return out;
}

Vector LbfgsBuffer::apply(const Vector& v) const {
  Matrix col(dim_, 1);
  for (int i = 0; i < dim_; ++i) col(i, 0) = v[i];
  Matrix res = apply(col);
  Vector out(dim_);
  for (int i = 0; i < dim_; ++i) out[i] = res(i, 0);
  return out;
}

HessianActionState make_hessian_action_state(int dim, double beta, double lambda_a) {
  HessianActionState st;
  st.a = Matrix(dim, dim);
  st.ha = Matrix::identity(dim);
  st.beta = beta;
  st.lambda_a = lambda_a;
  return st;
}

void hessian_action_step(HessianActionState& state, const Matrix& a_outer_mean,
                         const Vector& a_bar) {
  if (!a_outer_mean.same_shape(state.a) || int(a_bar.size()) != state.a.rows) {
    throw DimensionError("hessian_action_step: operand shapes do not match state dim " +
                         std::to_string(state.a.rows));
  }
  if (is_zero(a_bar)) return;  // nothing to act on; state untouched
  scale_in_place(state.a, state.beta);
  axpy(1.0 - state.beta, a_outer_mean, state.a);
  Vector s = matvec(state.ha, a_bar);
  Vector y = matvec(state.a, s);
  for (size_t i = 0; i < y.size(); ++i) y[i] += state.lambda_a * s[i];
  state.ha = bfgs_inverse_update(state.ha, s, y);
}

}  // namespace kqn
