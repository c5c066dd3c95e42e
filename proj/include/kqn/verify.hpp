#pragma once

#include <string>
#include <vector>

#include "kqn/linalg.hpp"
#include "kqn/mlp.hpp"
#include "kqn/optim.hpp"

namespace kqn {

// --- finite-difference oracles -------------------------------------------
// These deliberately drive only loss_only (forward passes), so they share no
// code with the backward pass or the curvature updates they are used to check.

// Central-difference gradient of the batch loss w.r.t. every weight entry.
std::vector<Matrix> finite_diff_gradient(const NetworkModel& model,
                                         const DataBatch& batch, double h);

struct LayerHessianOracle {
  Matrix w_hessian;  // d2 loss / d vec(W_l)2 at one sample, column-stacked
  Matrix g_hessian;  // d2 loss / d h_l2 at the same sample
  Vector abar;       // homogeneous input feeding layer l at that sample
};

// Second differences of the single-sample loss, both w.r.t. the layer's
// weight block and w.r.t. its pre-activation. Together these exercise the
// Kronecker factorization: w_hessian should equal (abar abar^T) x g_hessian.
LayerHessianOracle finite_diff_layer_hessian(const NetworkModel& model,
                                             const Vector& input, const Vector& target,
                                             int layer, double h);

// --- suite plumbing -------------------------------------------------------

struct SuiteCheck {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // worst observed error/margin, suite-specific meaning
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<SuiteCheck> checks;
  bool all_passed() const {
    for (const SuiteCheck& c : checks) {
      if (!c.passed) return false;
    }
    return true;
  }
};

// Rank-one inverse-update equivalence (Broyden family vs Sherman-Morrison vs
// dense re-inversion) over random SPD trials.
SuiteReport theorem1_suite(uint64_t seed, int trials, int max_dim, double tol);

// Compact L-BFGS apply vs the classical two-loop recursion over random
// admissible pair streams, p in {1,5,100} x d in {3,50,200}.
SuiteReport lbfgs_equivalence_suite(uint64_t seed, int states_per_cell, double tol);

// Double-damping guarantees on random (s, y, SPD H) draws.
SuiteReport dd_guarantee_suite(uint64_t seed, int draws, int max_dim, double rel_slack);

// Backward pass vs finite differences on smooth-activation networks.
SuiteReport gradient_oracle_suite(uint64_t seed, int num_seeds, double h, double tol);

// Kronecker layer-Hessian structure vs finite differences.
SuiteReport kron_hessian_suite(uint64_t seed, int num_seeds, double h, double tol);

// All five suites at their acceptance-scale parameters.
std::vector<SuiteReport> run_all_suites(uint64_t seed);

// Writes one CSV line per check: suite,check,status,worst,detail.
void write_suite_csv(const std::vector<SuiteReport>& reports, const std::string& path);

// --- runtime bound monitor --------------------------------------------------

struct LayerExtremes {
  double ha_min = 0.0, ha_max = 0.0;  // eigenvalue range seen across steps
  double hg_min = 0.0, hg_max = 0.0;  // NaN when the operator was never measured
};

struct MonitorReport {
  std::vector<LayerExtremes> extremes;
  std::vector<double> dd_satisfied_fraction;  // per layer, over observed steps
  std::vector<double> skip_fraction;          // per layer
  std::vector<std::string> violations;
  long steps_observed = 0;
};

// Pure observer of a K-BFGS run. After each step, observe() records the
// eigenvalue extremes of both preconditioner factors and checks them against
// the theory: the bounded-activation interval
// [1/(1 + d_l + lambda_a), 1/lambda_a] for exact-inversion runs whose layer
// inputs lie in [-1,1] (previous activation sigmoid/tanh, or the input layer
// when inputs_bounded is set), and the limited-memory floor
// (1 + 1/mu1)^-memory for Hg. The limited-memory operator is materialized by
// probing, so Hg monitoring is restricted to layers of width <= 64.
class BoundMonitor {
 public:
  BoundMonitor(const NetworkModel& model, const KbfgsConfig& config,
               bool inputs_bounded);

  void observe(const KbfgsState& state, const StepMetrics& metrics);
  MonitorReport report() const;

 private:
  KbfgsConfig config_;
  std::vector<bool> a_bound_applies_;
  std::vector<int> layer_widths_;
  MonitorReport accum_;
  std::vector<long> dd_counts_;
  std::vector<long> skip_counts_;
};

}  // namespace kqn
