#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "kqn/data.hpp"
#include "kqn/mlp.hpp"
#include "kqn/qn.hpp"
#include "kqn/rng.hpp"

namespace kqn {

enum class OptimizerKind { kbfgs, kbfgs_l, kbfgs_l_skip, kfac, adam, rmsprop, sgdm };

OptimizerKind optimizer_from_string(const std::string& s);
const char* to_string(OptimizerKind k);

// Per-layer outcome of one curvature update. For optimizers without double
// damping (KFAC, first-order) the fields keep their neutral defaults.
struct LayerStepInfo {
  double theta1 = 1.0;       // stage-1 damping coefficient
  double theta2 = 1.0;       // stage-2 damping coefficient
  bool skipped = false;      // curvature update not applied this step
  bool dd_satisfied = true;  // ytilde^T H ytilde <= (2/mu1) stilde^T ytilde
};

struct StepMetrics {
  double loss = 0.0;  // batch loss at the pre-step weights
  double seconds = 0.0;
  std::vector<LayerStepInfo> layers;
};

// --- K-BFGS family -----------------------------------------------------------

struct KbfgsConfig {
  double alpha = 0.3;
  double damping = 0.3;  // lambda, split as lambda_a = lambda_g = sqrt(lambda)
  double ma_decay = 0.9;
  double mu1 = 0.2;
  bool use_lbfgs = false;
  int memory = 100;  // L-BFGS pair window
  bool skip_variant = false;
  bool exact_a_inverse = false;
  double lr_decay_exponent = 0.75;  // skip variant only: alpha_k = alpha k^-e
  bool double_grad = false;

  double lambda_a() const { return std::sqrt(damping); }
  double lambda_g() const { return std::sqrt(damping); }
  double mu2() const { return lambda_g(); }
};

struct KbfgsLayerState {
  Matrix grad_ma;              // moving-average gradient (unused in skip mode)
  HessianActionState a_side;   // A estimate and its inverse approximation Ha
  Matrix hg;                   // dense Hg (use_lbfgs == false)
  LbfgsBuffer hg_buffer;       // limited-memory Hg (use_lbfgs == true)
  Vector s_ma;                 // moving average of h_bar_plus - h_bar
  Vector y_ma;                 // moving average of g_bar_plus - g_bar
};

struct KbfgsState {
  KbfgsConfig config;
  std::vector<KbfgsLayerState> layers;
  long step_count = 0;
  // Second-pass gradients of the previous step (double-grad averaging).
  std::vector<Matrix> prev_second_grad;
  bool has_prev_second_grad = false;
};

KbfgsState make_kbfgs_state(const NetworkModel& model, const KbfgsConfig& config);

// One optimizer iteration: forward-backward, preconditioned step, second pass
// on the same batch, double-damped Hg update (optionally skipped by the
// convergence predicate), Ha update from the first pass statistics.
StepMetrics kbfgs_step(KbfgsState& state, NetworkModel& model, const DataBatch& batch);

// --- KFAC ----------------------------------------------------------------------

struct KfacConfig {
  double alpha = 1.0;
  double damping = 3.0;  // lambda, applied as sqrt(lambda) shifts per factor
  double ma_decay = 0.9;
  int inverse_period = 20;  // T: recompute inverses while k <= T or k % T == 0

  double shift() const { return std::sqrt(damping); }
};

struct KfacLayerState {
  Matrix grad_ma;
  Matrix a;   // input-side factor estimate
  Matrix g;   // output-side factor estimate
  Matrix ha;  // (a + shift I)^-1 at the last recompute
  Matrix hg;  // (g + shift I)^-1 at the last recompute
};

struct KfacState {
  KfacConfig config;
  std::vector<KfacLayerState> layers;
  long step_count = 0;
  Rng sampling_rng{0};  // predictive-distribution target sampling
};

KfacState make_kfac_state(const NetworkModel& model, const KfacConfig& config,
                          uint64_t sampling_seed);

StepMetrics kfac_step(KfacState& state, NetworkModel& model, const DataBatch& batch);

// --- first-order baselines ------------------------------------------------------

struct FirstOrderConfig {
  OptimizerKind kind = OptimizerKind::sgdm;  // sgdm | adam | rmsprop
  double alpha = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.9;
  double epsilon = 1e-4;
};

struct FirstOrderState {
  FirstOrderConfig config;
  std::vector<Matrix> m1;  // momentum / first moment
  std::vector<Matrix> m2;  // second moment (adam, rmsprop)
  long step_count = 0;
};

FirstOrderState make_first_order_state(const NetworkModel& model,
                                       const FirstOrderConfig& config);

StepMetrics first_order_step(FirstOrderState& state, NetworkModel& model,
                             const DataBatch& batch);

// --- warm start -----------------------------------------------------------------

// Curvature estimation over the training set before the first step, walked in
// chunks of batch_size. num_batches = 0 means the whole set; otherwise only
// the first num_batches chunks are used. K-BFGS: A accumulated sample-exactly,
// Ha = (A + lambda_a I)^-1, Hg stays identity, gradient averages stay zero.
// KFAC: additionally G from sampled-target backward passes. RMSprop: m2 from
// full-chunk gradient squares; Adam and SGD-m are no-ops.
void warm_start(KbfgsState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches);
void warm_start(KfacState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches);
void warm_start(FirstOrderState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches);

// --- uniform driver interface (bench) --------------------------------------------

using OptimizerState = std::variant<KbfgsState, KfacState, FirstOrderState>;

void warm_start(OptimizerState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches);
StepMetrics optimizer_step(OptimizerState& state, NetworkModel& model,
                           const DataBatch& batch);

}  // namespace kqn
