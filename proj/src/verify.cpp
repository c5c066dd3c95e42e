#include "kqn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "kqn/format.hpp"
#include "kqn/rng.hpp"

namespace kqn {

namespace {

// Model consisting of layers [first, last) of the given model, sharing its
// loss and no l2 term (the oracles operate on the plain data term).
NetworkModel slice_model(const NetworkModel& model, int first, int last) {
  NetworkModel out;
  out.loss = model.loss;
  out.l2_coeff = model.l2_coeff;
  for (int l = first; l < last; ++l) {
    out.layers.push_back(model.layers[l]);
    out.weights.push_back(model.weights[l]);
  }
  return out;
}

Vector activations_into_layer(const NetworkModel& model, const Vector& input, int layer) {
  if (layer == 0) return input;
  NetworkModel prefix = slice_model(model, 0, layer);
  prefix.l2_coeff = 0.0;
  return forward_outputs(prefix, {input})[0];
}

double elementwise_activation(Activation act, double h) {
  switch (act) {
    case Activation::relu: return h > 0.0 ? h : 0.0;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-h));
    case Activation::tanh: return std::tanh(h);
    case Activation::linear: return h;
  }
  return 0.0;
}

double matrix_rel_diff(const Matrix& got, const Matrix& want) {
  Matrix d = got;
  axpy(-1.0, want, d);
  return max_abs(d) / std::max(max_abs(want), 1e-300);
}

double vector_rel_diff(const Vector& got, const Vector& want) {
  double num = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    num = std::max(num, std::abs(got[i] - want[i]));
  }
  return num / std::max(max_abs(want), 1e-300);
}

// Explicit Kronecker product; only used to assemble oracle-side expectations.
Matrix kron_product(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows * b.rows, a.cols * b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j)
      for (int p = 0; p < b.rows; ++p)
        for (int q = 0; q < b.cols; ++q)
          k(i * b.rows + p, j * b.cols + q) = a(i, j) * b(p, q);
  return k;
}

Matrix random_spd_matrix(Rng& rng, int d, double shift) {
  Matrix r(d, d);
  for (double& v : r.data) v = 2.0 * rng.uniform() - 1.0;
  Matrix m = gemm(r, r, true, false);
  add_scaled_identity(m, shift);
  symmetrize(m);
  return m;
}

Vector random_unit_range_vector(Rng& rng, int d) {
  Vector v(d);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  return v;
}

SuiteCheck make_check(std::string name, bool passed, double worst, std::string detail) {
  SuiteCheck c;
  c.name = std::move(name);
  c.passed = passed;
  c.worst = worst;
  c.detail = std::move(detail);
  return c;
}

}  // namespace

std::vector<Matrix> finite_diff_gradient(const NetworkModel& model,
                                         const DataBatch& batch, double h) {
  NetworkModel scratch = model;
  std::vector<Matrix> grads;
  grads.reserve(model.weights.size());
  for (size_t l = 0; l < model.weights.size(); ++l) {
    Matrix g(model.weights[l].rows, model.weights[l].cols);
    for (size_t idx = 0; idx < g.data.size(); ++idx) {
      const double saved = scratch.weights[l].data[idx];
      scratch.weights[l].data[idx] = saved + h;
      const double up = loss_only(scratch, batch);
      scratch.weights[l].data[idx] = saved - h;
      const double down = loss_only(scratch, batch);
      scratch.weights[l].data[idx] = saved;
      g.data[idx] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

LayerHessianOracle finite_diff_layer_hessian(const NetworkModel& model,
                                             const Vector& input, const Vector& target,
                                             int layer, double h) {
  if (layer < 0 || layer >= model.num_layers()) {
    throw DimensionError("finite_diff_layer_hessian: layer " + std::to_string(layer) +
                         " out of range");
  }
  LayerHessianOracle oracle;

  Vector a_prev = activations_into_layer(model, input, layer);
  oracle.abar = a_prev;
  oracle.abar.push_back(1.0);

  // Loss as a function of this layer's weight block, single sample, no l2.
  NetworkModel scratch = model;
  scratch.l2_coeff = 0.0;
  DataBatch one{{input}, {target}};
  auto loss_of_weights = [&]() { return loss_only(scratch, one); };
  Matrix& w = scratch.weights[layer];
  const int d_out = w.rows;
  const int d_in1 = w.cols;
  const int n = d_out * d_in1;
  // vec is column-stacking: flat index v = col * d_out + row.
  auto entry = [&](int v) -> double& { return w(v % d_out, v / d_out); };
  auto second_diff = [&](auto&& eval, auto&& at, int n_params) {
    Matrix hess(n_params, n_params);
    const double f0 = eval();
    for (int i = 0; i < n_params; ++i) {
      for (int j = i; j < n_params; ++j) {
        double v;
        if (i == j) {
          const double saved = at(i);
          at(i) = saved + 2.0 * h;
          const double up = eval();
          at(i) = saved - 2.0 * h;
          const double down = eval();
          at(i) = saved;
          v = (up - 2.0 * f0 + down) / (4.0 * h * h);
        } else {
          const double si = at(i), sj = at(j);
          at(i) = si + h; at(j) = sj + h;
          const double pp = eval();
          at(j) = sj - h;
          const double pm = eval();
          at(i) = si - h;
          const double mm = eval();
          at(j) = sj + h;
          const double mp = eval();
          at(i) = si; at(j) = sj;
          v = (pp - pm - mp + mm) / (4.0 * h * h);
        }
        hess(i, j) = v;
        hess(j, i) = v;
      }
    }
    return hess;
  };

  oracle.w_hessian = second_diff(loss_of_weights, [&](int v) -> double& { return entry(v); }, n);

  // Loss as a function of the layer's pre-activation: apply the activation to
  // the perturbed h and continue through the remaining layers.
  Vector h_point = matvec(model.weights[layer], oracle.abar);
  NetworkModel suffix = slice_model(model, layer + 1, model.num_layers());
  suffix.l2_coeff = 0.0;
  const Activation act = model.layers[layer].activation;
  auto eval_preact = [&]() {
    Vector a(h_point.size());
    for (size_t i = 0; i < a.size(); ++i) a[i] = elementwise_activation(act, h_point[i]);
    if (!suffix.layers.empty()) return loss_only(suffix, {{a}, {target}});
    // Output layer: evaluate the loss directly on a.
    double s = 0.0;
    if (model.loss == LossKind::mse) {
      for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - target[i];
        s += 0.5 * d * d;
      }
    } else {
      for (size_t i = 0; i < a.size(); ++i) {
        const double c = std::clamp(a[i], 1e-12, 1.0 - 1e-12);
        s -= target[i] * std::log(c) + (1.0 - target[i]) * std::log(1.0 - c);
      }
    }
    return s;
  };
  oracle.g_hessian = second_diff(
      eval_preact, [&](int v) -> double& { return h_point[v]; }, int(h_point.size()));
  return oracle;
}

// --- suites -----------------------------------------------------------------

SuiteReport theorem1_suite(uint64_t seed, int trials, int max_dim, double tol) {
  SuiteReport report;
  report.suite = "theorem1";
  Rng rng(derive_seed(seed, 0x7101));
  const double cs[] = {0.5, 1.0, 2.0};
  const double phis[] = {0.0, 0.5, 1.0};
  double worst_broyden[3] = {0.0, 0.0, 0.0};
  double worst_sherman = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int d = 2 + int(rng.below(uint64_t(max_dim - 1)));
    const Matrix a_mat = random_spd_matrix(rng, d, 0.5);
    const Matrix h = spd_inverse(a_mat);
    const Vector a = random_unit_range_vector(rng, d);
    const double c = cs[t % 3];

    // The rank-one curvature pair of the theorem: s = H a, y = (A + c aa^T) s.
    const Vector s = matvec(h, a);
    const double a_h_a = dot(a, s);
    Vector y = a;
    for (double& v : y) v *= 1.0 + c * a_h_a;

    Matrix a_plus = a_mat;
    axpy(c, outer(a, a), a_plus);
    symmetrize(a_plus);
    const Matrix dense_route = spd_inverse(a_plus);

    worst_sherman = std::max(
        worst_sherman,
        matrix_rel_diff(sherman_morrison_rank1_inverse(h, a, c), dense_route));
    for (int i = 0; i < 3; ++i) {
      worst_broyden[i] = std::max(
          worst_broyden[i], matrix_rel_diff(broyden_update(h, s, y, phis[i]), dense_route));
    }
  }
  const std::string detail =
      std::to_string(trials) + " trials; d <= " + std::to_string(max_dim);
  for (int i = 0; i < 3; ++i) {
    report.checks.push_back(make_check("broyden-phi-" + format_g9(phis[i]),
                                       worst_broyden[i] <= tol, worst_broyden[i],
                                       detail));
  }
  report.checks.push_back(
      make_check("sherman-morrison", worst_sherman <= tol, worst_sherman, detail));

  // Degenerate direction: a = 0 must leave the inverse untouched.
  Rng zrng(derive_seed(seed, 0x7102));
  const Matrix h0 = spd_inverse(random_spd_matrix(zrng, 6, 0.5));
  const double zero_err =
      matrix_rel_diff(sherman_morrison_rank1_inverse(h0, Vector(6, 0.0), 1.0), h0);
  report.checks.push_back(make_check("zero-direction", zero_err == 0.0, zero_err,
                                     "a = 0 returns H exactly"));
  return report;
}

SuiteReport lbfgs_equivalence_suite(uint64_t seed, int states_per_cell, double tol) {
  SuiteReport report;
  report.suite = "lbfgs-equivalence";
  Rng rng(derive_seed(seed, 0x1bf6));

  // Empty window: both representations are the identity.
  {
    LbfgsBuffer empty(8, 4);
    const Vector v = random_unit_range_vector(rng, 8);
    const double e1 = vector_rel_diff(empty.apply(v), v);
    const double e2 = vector_rel_diff(lbfgs_apply_two_loop({}, {}, v), v);
    report.checks.push_back(make_check("empty-window", e1 == 0.0 && e2 == 0.0,
                                       std::max(e1, e2), "no pairs: H = I"));
  }

  for (int p : {1, 5, 100}) {
    for (int d : {3, 50, 200}) {
      double worst = 0.0;
      for (int t = 0; t < states_per_cell; ++t) {
        LbfgsBuffer buffer(d, p);
        // Pairs from the action of a fixed SPD map are always admissible.
        const Matrix m = random_spd_matrix(rng, d, 0.3);
        const int pushes = p + int(rng.below(uint64_t(p) + 1));
        for (int k = 0; k < pushes; ++k) {
          const Vector s = random_unit_range_vector(rng, d);
          buffer.push(s, matvec(m, s));
        }
        const Vector v = random_unit_range_vector(rng, d);
        const Vector got = buffer.apply(v);
        const Vector want = lbfgs_apply_two_loop(buffer.s_list(), buffer.y_list(), v);
        worst = std::max(worst, vector_rel_diff(got, want));
      }
      report.checks.push_back(
          make_check("p=" + std::to_string(p) + " d=" + std::to_string(d), worst <= tol,
                     worst, std::to_string(states_per_cell) + " buffer states"));
    }
  }
  return report;
}

SuiteReport dd_guarantee_suite(uint64_t seed, int draws, int max_dim, double rel_slack) {
  SuiteReport report;
  report.suite = "double-damping";
  Rng rng(derive_seed(seed, 0xdd));
  const double mu1s[] = {0.1, 0.2, 0.5};
  const double mu2s[] = {0.05, 0.3, 0.548};
  double worst_stage1 = -std::numeric_limits<double>::infinity();
  double worst_stage2 = worst_stage1;
  bool thetas_ok = true;
  long degenerate = 0;
  for (int t = 0; t < draws; ++t) {
    const int d = 1 + int(rng.below(uint64_t(max_dim)));
    const Matrix h = random_spd_matrix(rng, d, 0.05 + rng.uniform());
    const Vector s = random_unit_range_vector(rng, d);
    const Vector y = random_unit_range_vector(rng, d);
    if (max_abs(y) == 0.0) continue;
    const double mu1 = mu1s[t % 3];
    const double mu2 = mu2s[(t / 3) % 3];
    CurvaturePair pair;
    try {
      pair = double_damp(s, y, h, mu1, mu2);
    } catch (const DegeneratePairError&) {
      ++degenerate;
      continue;
    }
    // Violation margins, positive when the guarantee fails.
    const double y_h_y = dot(y, matvec(h, y));
    const double stage1 = (mu1 * y_h_y - dot(pair.s, y)) / std::max(mu1 * y_h_y, 1e-300);
    const double s_dot_s = dot(pair.s, pair.s);
    const double stage2 =
        (mu2 * s_dot_s - dot(pair.s, pair.y)) / std::max(mu2 * s_dot_s, 1e-300);
    worst_stage1 = std::max(worst_stage1, stage1);
    worst_stage2 = std::max(worst_stage2, stage2);
    if (pair.theta1 <= 0.0 || pair.theta1 > 1.0 || pair.theta2 <= 0.0 ||
        pair.theta2 > 1.0) {
      thetas_ok = false;
    }
  }
  const std::string detail = std::to_string(draws) + " draws; d <= " +
                             std::to_string(max_dim) + "; degenerate " +
                             std::to_string(degenerate);
  report.checks.push_back(make_check("stage1-curvature-floor",
                                     worst_stage1 <= rel_slack, worst_stage1, detail));
  report.checks.push_back(make_check("stage2-curvature-floor",
                                     worst_stage2 <= rel_slack, worst_stage2, detail));
  report.checks.push_back(
      make_check("damping-coefficients-in-range", thetas_ok, thetas_ok ? 0.0 : 1.0,
                 "theta1, theta2 in (0, 1]"));
  return report;
}

SuiteReport gradient_oracle_suite(uint64_t seed, int num_seeds, double h, double tol) {
  SuiteReport report;
  report.suite = "gradient-oracle";
  struct Case {
    const char* name;
    std::vector<Activation> acts;
    LossKind loss;
    double l2;
  };
  const std::vector<int> widths = {8, 6, 4, 6, 8};
  const Case cases[] = {
      {"tanh-mse",
       {Activation::tanh, Activation::tanh, Activation::tanh, Activation::tanh},
       LossKind::mse, 1e-5},
      {"sigmoid-binary-entropy",
       {Activation::tanh, Activation::tanh, Activation::tanh, Activation::sigmoid},
       LossKind::binary_entropy, 0.0},
  };
  for (const Case& c : cases) {
    double worst = 0.0;
    for (int i = 0; i < num_seeds; ++i) {
      const uint64_t model_seed = derive_seed(seed, 0x9d0 + uint64_t(i));
      NetworkModel model = make_model(widths, c.acts, c.loss, c.l2, model_seed);
      Rng drng(derive_seed(seed, 0x9e0 + uint64_t(i)));
      DataBatch batch;
      for (int sample = 0; sample < 4; ++sample) {
        Vector x(8);
        for (double& v : x) v = drng.uniform();
        batch.inputs.push_back(x);
        batch.targets.push_back(x);
      }
      TraceOptions light;
      light.capture_a_outer = false;
      const BatchTrace trace = forward_backward(model, batch, light);
      const std::vector<Matrix> fd = finite_diff_gradient(model, batch, h);
      for (int l = 0; l < model.num_layers(); ++l) {
        Matrix diff = fd[l];
        axpy(-1.0, trace.layers[l].grad_mean, diff);
        worst = std::max(worst, max_abs(diff) /
                                    std::max(max_abs(trace.layers[l].grad_mean), 1e-12));
      }
    }
    report.checks.push_back(make_check(c.name, worst <= tol, worst,
                                       std::to_string(num_seeds) + " seeds; h = " +
                                           format_g9(h)));
  }
  return report;
}

SuiteReport kron_hessian_suite(uint64_t seed, int num_seeds, double h, double tol) {
  SuiteReport report;
  report.suite = "kron-hessian";
  const std::vector<int> widths = {5, 4, 3};
  double worst_per_layer[2] = {0.0, 0.0};
  double worst_symmetry = 0.0;
  for (int i = 0; i < num_seeds; ++i) {
    NetworkModel model =
        make_model(widths, {Activation::sigmoid, Activation::sigmoid}, LossKind::mse,
                   0.0, derive_seed(seed, 0x8e0 + uint64_t(i)));
    Rng drng(derive_seed(seed, 0x8f0 + uint64_t(i)));
    Vector x(5), y(3);
    for (double& v : x) v = drng.uniform();
    for (double& v : y) v = drng.uniform();
    for (int layer = 0; layer < model.num_layers(); ++layer) {
      const LayerHessianOracle oracle = finite_diff_layer_hessian(model, x, y, layer, h);
      const Matrix want =
          kron_product(outer(oracle.abar, oracle.abar), oracle.g_hessian);
      worst_per_layer[layer] =
          std::max(worst_per_layer[layer], matrix_rel_diff(oracle.w_hessian, want));
      Matrix asym = oracle.w_hessian;
      for (int r = 0; r < asym.rows; ++r) {
        for (int cidx = 0; cidx < asym.cols; ++cidx) {
          asym(r, cidx) -= oracle.w_hessian(cidx, r);
        }
      }
      worst_symmetry = std::max(
          worst_symmetry, max_abs(asym) / std::max(max_abs(oracle.w_hessian), 1e-12));
    }
  }
  const std::string detail =
      std::to_string(num_seeds) + " seeds; h = " + format_g9(h);
  for (int layer = 0; layer < 2; ++layer) {
    report.checks.push_back(make_check("layer-" + std::to_string(layer) + "-kron-form",
                                       worst_per_layer[layer] <= tol,
                                       worst_per_layer[layer], detail));
  }
  report.checks.push_back(
      make_check("hessian-symmetry", worst_symmetry <= 1e-6, worst_symmetry, detail));
  return report;
}

std::vector<SuiteReport> run_all_suites(uint64_t seed) {
  std::vector<SuiteReport> reports;
  reports.push_back(dd_guarantee_suite(seed, 100000, 50, 1e-12));
  reports.push_back(theorem1_suite(seed, 1000, 20, 1e-8));
  reports.push_back(lbfgs_equivalence_suite(seed, 100, 1e-10));
  reports.push_back(gradient_oracle_suite(seed, 10, 1e-5, 1e-5));
  reports.push_back(kron_hessian_suite(seed, 5, 1e-4, 1e-4));
  return reports;
}

void write_suite_csv(const std::vector<SuiteReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open \"" + path + "\" for writing");
  out << "suite,check,status,worst,detail\n";
  for (const SuiteReport& report : reports) {
    for (const SuiteCheck& check : report.checks) {
      out << report.suite << ',' << check.name << ','
          << (check.passed ? "pass" : "fail") << ',' << format_g9(check.worst) << ','
          << check.detail << '\n';
    }
  }
}

// --- bound monitor ----------------------------------------------------------

BoundMonitor::BoundMonitor(const NetworkModel& model, const KbfgsConfig& config,
                           bool inputs_bounded)
    : config_(config) {
  const int num_layers = model.num_layers();
  for (int l = 0; l < num_layers; ++l) {
    layer_widths_.push_back(model.layers[l].out_dim);
    const bool bounded_inputs =
        l == 0 ? inputs_bounded
               : (model.layers[l - 1].activation == Activation::sigmoid ||
                  model.layers[l - 1].activation == Activation::tanh);
    a_bound_applies_.push_back(config.exact_a_inverse && bounded_inputs);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  accum_.extremes.assign(num_layers, LayerExtremes{nan, nan, nan, nan});
  dd_counts_.assign(num_layers, 0);
  skip_counts_.assign(num_layers, 0);
}

namespace {

void widen(double& low, double& high, double lo, double hi) {
  if (std::isnan(low) || lo < low) low = lo;
  if (std::isnan(high) || hi > high) high = hi;
}

}  // namespace

void BoundMonitor::observe(const KbfgsState& state, const StepMetrics& metrics) {
  ++accum_.steps_observed;
  const double slack = 1e-6;
  for (size_t l = 0; l < state.layers.size(); ++l) {
    const KbfgsLayerState& ls = state.layers[l];

    const double ha_lo = extreme_eigenvalue_estimate(ls.a_side.ha, EigenExtreme::min);
    const double ha_hi = extreme_eigenvalue_estimate(ls.a_side.ha, EigenExtreme::max);
    widen(accum_.extremes[l].ha_min, accum_.extremes[l].ha_max, ha_lo, ha_hi);
    if (a_bound_applies_[l]) {
      const double d = double(ls.a_side.ha.rows - 1);  // input dim without the bias
      const double floor = 1.0 / (1.0 + d + config_.lambda_a()) * (1.0 - slack);
      const double cap = 1.0 / config_.lambda_a() * (1.0 + slack);
      if (ha_lo < floor || ha_hi > cap) {
        accum_.violations.push_back(
            "layer " + std::to_string(l) + " step " +
            std::to_string(accum_.steps_observed) + ": Ha eigenvalues [" +
            format_g9(ha_lo) + ", " + format_g9(ha_hi) + "] outside [" +
            format_g9(floor) + ", " + format_g9(cap) + "]");
      }
    }

    Matrix hg_dense;
    bool have_hg = false;
    if (!config_.use_lbfgs) {
      hg_dense = ls.hg;
      have_hg = true;
    } else if (layer_widths_[l] <= 64) {
      hg_dense = ls.hg_buffer.apply(Matrix::identity(layer_widths_[l]));
      symmetrize(hg_dense);
      have_hg = true;
    }
    if (have_hg) {
      const double hg_lo = extreme_eigenvalue_estimate(hg_dense, EigenExtreme::min);
      const double hg_hi = extreme_eigenvalue_estimate(hg_dense, EigenExtreme::max);
      widen(accum_.extremes[l].hg_min, accum_.extremes[l].hg_max, hg_lo, hg_hi);
      if (hg_lo <= 0.0) {
        accum_.violations.push_back("layer " + std::to_string(l) + " step " +
                                    std::to_string(accum_.steps_observed) +
                                    ": Hg not positive definite, min eigenvalue " +
                                    format_g9(hg_lo));
      } else if (config_.use_lbfgs) {
        const double floor =
            std::pow(1.0 + 1.0 / config_.mu1, -double(config_.memory)) * (1.0 - slack);
        if (hg_lo < floor) {
          accum_.violations.push_back("layer " + std::to_string(l) + " step " +
                                      std::to_string(accum_.steps_observed) +
                                      ": Hg min eigenvalue " + format_g9(hg_lo) +
                                      " below the limited-memory floor " +
                                      format_g9(floor));
        }
      }
    }

    if (l < metrics.layers.size()) {
      if (metrics.layers[l].dd_satisfied) ++dd_counts_[l];
      if (metrics.layers[l].skipped) ++skip_counts_[l];
    }
  }
}

MonitorReport BoundMonitor::report() const {
  MonitorReport out = accum_;
  const double steps = double(std::max(accum_.steps_observed, 1L));
  for (size_t l = 0; l < dd_counts_.size(); ++l) {
    out.dd_satisfied_fraction.push_back(double(dd_counts_[l]) / steps);
    out.skip_fraction.push_back(double(skip_counts_[l]) / steps);
  }
  return out;
}

}  // namespace kqn
