#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kqn/linalg.hpp"
#include "kqn/rng.hpp"

namespace kqn {

enum class Activation { relu, sigmoid, tanh, linear };
enum class LossKind { mse, binary_entropy };

Activation activation_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);
const char* to_string(Activation a);
const char* to_string(LossKind k);

struct LayerSpec {
  int in_dim = 0;
  int out_dim = 0;
  Activation activation = Activation::linear;
};

// Fully-connected feed-forward network. Weight l has shape
// out_dim x (in_dim + 1); the last column is the bias, matching the
// homogeneous-coordinate convention (inputs get a trailing 1 appended).
struct NetworkModel {
  std::vector<LayerSpec> layers;
  std::vector<Matrix> weights;
  LossKind loss = LossKind::mse;
  double l2_coeff = 0.0;  // eta: applied in loss and gradient only, never curvature

  int input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }
  int num_layers() const { return int(layers.size()); }
};

struct DataBatch {
  std::vector<Vector> inputs;
  std::vector<Vector> targets;
  size_t size() const { return inputs.size(); }
};

// Per-layer batch statistics produced by one forward-backward pass. Matrices
// with rows == 0 were not requested (see TraceOptions).
struct LayerTrace {
  Vector a_bar_prev;    // mean homogeneous input, length in_dim + 1
  Matrix a_outer_mean;  // mean of abar abar^T, (in_dim+1)^2
  Matrix g_outer_mean;  // mean of g g^T, out_dim^2 (KFAC only)
  Vector h_bar;         // mean pre-activation
  Vector g_bar;         // mean pre-activation gradient
  Matrix grad_mean;     // mean weight gradient, includes the l2 term
};

struct BatchTrace {
  double loss = 0.0;
  std::vector<LayerTrace> layers;
};

// The outer-product means are the expensive parts of a trace (O(m d^2) each);
// callers that only need gradients or h/g means turn them off.
struct TraceOptions {
  bool capture_a_outer = true;
  bool capture_g_outer = false;
};

// Glorot-uniform weights, +-sqrt(6/(fan_in+fan_out)), zero bias column.
// Bit-identical for a fixed seed.
std::vector<Matrix> init_weights(const std::vector<LayerSpec>& specs, uint64_t seed);

NetworkModel make_model(const std::vector<int>& widths,
                        const std::vector<Activation>& activations, LossKind loss,
                        double l2_coeff, uint64_t seed);

// One batched forward-backward pass. Loss is the batch mean plus the l2 term;
// grad_mean is the mean over samples of g abar^T plus eta W. Non-finite
// activations or loss raise NumericalDivergenceError.
BatchTrace forward_backward(const NetworkModel& model, const DataBatch& batch,
                            const TraceOptions& options = {});

// Forward pass only; same loss as forward_backward on the same batch.
double loss_only(const NetworkModel& model, const DataBatch& batch);

// Sum of squares of every weight entry (bias columns included); the loss adds
// 0.5 * l2_coeff times this.
double weight_norm_sq(const NetworkModel& model);

// Final-layer outputs per sample.
std::vector<Vector> forward_outputs(const NetworkModel& model,
                                    const std::vector<Vector>& inputs);

// Mean over samples of 0.5 * |a_L - y|^2 (the reported test error).
double mean_square_test_error(const NetworkModel& model, const DataBatch& batch);

// Forward-only collection of the per-layer homogeneous-input outer-product
// means (the A_l statistics); used by optimizer warm starts.
std::vector<Matrix> activation_outer_means(const NetworkModel& model,
                                           const std::vector<Vector>& inputs);

// Targets drawn from the model's predictive distribution at the given inputs:
// Bernoulli(a) per unit for binary_entropy, a + N(0,1) per unit for mse.
std::vector<Vector> sample_predictive_targets(const NetworkModel& model,
                                              const std::vector<Vector>& inputs,
                                              Rng& rng);

// W_l -= alpha * direction_l for every layer.
void apply_step(NetworkModel& model, const std::vector<Matrix>& direction, double alpha);

}  // namespace kqn
