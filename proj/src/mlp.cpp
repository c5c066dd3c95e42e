#include "kqn/mlp.hpp"

#include <algorithm>
#include <cmath>

namespace kqn {

namespace {

constexpr double kEntropyClamp = 1e-12;

Vector row_means(const Matrix& m) {
  Vector out(m.rows, 0.0);
  for (int i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < m.cols; ++j) s += m(i, j);
    out[i] = s / m.cols;
  }
  return out;
}

void apply_activation(Activation act, const Matrix& h, Matrix& a) {
  a = h;
  switch (act) {
    case Activation::relu:
      for (double& v : a.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::sigmoid:
      for (double& v : a.data) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case Activation::tanh:
      for (double& v : a.data) v = std::tanh(v);
      break;
    case Activation::linear:
      break;
  }
}

// phi'(h), written in terms of h and a = phi(h). The relu subgradient at
// h = 0 is taken as 0.
double activation_derivative(Activation act, double h, double a) {
  switch (act) {
    case Activation::relu:
      return h > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid:
      return a * (1.0 - a);
    case Activation::tanh:
      return 1.0 - a * a;
    case Activation::linear:
      return 1.0;
  }
  return 0.0;
}

void check_batch(const NetworkModel& model, const DataBatch& batch) {
  if (batch.inputs.empty()) {
    throw EmptyBatchError("forward pass: batch has no samples");
  }
  if (batch.targets.size() != batch.inputs.size()) {
    throw DimensionError("forward pass: " + std::to_string(batch.inputs.size()) +
                         " inputs vs " + std::to_string(batch.targets.size()) +
                         " targets");
  }
  for (const Vector& x : batch.inputs) {
    if (int(x.size()) != model.input_dim()) {
      throw DimensionError("forward pass: input length " + std::to_string(x.size()) +
                           ", model expects " + std::to_string(model.input_dim()));
    }
  }
  for (const Vector& y : batch.targets) {
    if (int(y.size()) != model.output_dim()) {
      throw DimensionError("forward pass: target length " + std::to_string(y.size()) +
                           ", model expects " + std::to_string(model.output_dim()));
    }
  }
}

struct ForwardPass {
  // abar[l] has shape (in_dim_l + 1) x m with a trailing row of ones;
  // h[l] and a[l] have shape out_dim_l x m.
  std::vector<Matrix> abar;
  std::vector<Matrix> h;
  std::vector<Matrix> a;
};

Matrix with_ones_row(const Matrix& a) {
  Matrix out(a.rows + 1, a.cols);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::fill(out.data.begin() + size_t(a.rows) * a.cols, out.data.end(), 1.0);
  return out;
}

// keep_trace retains every layer's inputs/pre-activations for the backward
// pass; loss-only callers retain just the final activation.
ForwardPass run_forward(const NetworkModel& model, const std::vector<Vector>& inputs,
                        bool keep_trace) {
  const int m = int(inputs.size());
  const int l_count = model.num_layers();
  ForwardPass fp;
  Matrix current(model.input_dim() + 1, m);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < model.input_dim(); ++i) current(i, j) = inputs[j][i];
    current(model.input_dim(), j) = 1.0;
  }
  for (int l = 0; l < l_count; ++l) {
    Matrix h = gemm(model.weights[l], current);
    if (!all_finite(h)) {
      throw NumericalDivergenceError(
          "forward pass: non-finite pre-activation at layer " + std::to_string(l + 1),
          l + 1);
    }
    Matrix a;
    apply_activation(model.layers[l].activation, h, a);
    if (keep_trace) {
      fp.abar.push_back(std::move(current));
      fp.h.push_back(std::move(h));
    }
    if (l + 1 < l_count) current = with_ones_row(a);
    if (keep_trace || l + 1 == l_count) fp.a.push_back(std::move(a));
  }
  return fp;
}

double batch_mean_loss(const NetworkModel& model, const Matrix& a_last,
                       const std::vector<Vector>& targets) {
  const int m = a_last.cols;
  double total = 0.0;
  if (model.loss == LossKind::mse) {
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int i = 0; i < a_last.rows; ++i) {
        const double d = a_last(i, j) - targets[j][i];
        s += d * d;
      }
      total += 0.5 * s;
    }
  } else {
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int i = 0; i < a_last.rows; ++i) {
        const double a = std::clamp(a_last(i, j), kEntropyClamp, 1.0 - kEntropyClamp);
        const double y = targets[j][i];
        s -= y * std::log(a) + (1.0 - y) * std::log(1.0 - a);
      }
      total += s;
    }
  }
  double loss = total / m + 0.5 * model.l2_coeff * weight_norm_sq(model);
  if (!std::isfinite(loss)) {
    throw NumericalDivergenceError("loss is non-finite", 0);
  }
  return loss;
}

// dL/da at the output, elementwise, on the batch matrix.
Matrix output_loss_gradient(const NetworkModel& model, const Matrix& a_last,
                            const std::vector<Vector>& targets) {
  Matrix da(a_last.rows, a_last.cols);
  if (model.loss == LossKind::mse) {
    for (int j = 0; j < da.cols; ++j)
      for (int i = 0; i < da.rows; ++i) da(i, j) = a_last(i, j) - targets[j][i];
  } else {
    for (int j = 0; j < da.cols; ++j) {
      for (int i = 0; i < da.rows; ++i) {
        const double a = std::clamp(a_last(i, j), kEntropyClamp, 1.0 - kEntropyClamp);
        const double y = targets[j][i];
        da(i, j) = (a - y) / (a * (1.0 - a));
      }
    }
  }
  return da;
}

}  // namespace

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + s + "'");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "binary_entropy") return LossKind::binary_entropy;
  throw ConfigError("unknown loss '" + s + "'");
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "?";
}

const char* to_string(LossKind k) {
  return k == LossKind::mse ? "mse" : "binary_entropy";
}

double weight_norm_sq(const NetworkModel& model) {
  double s = 0.0;
  for (const Matrix& w : model.weights) {
    for (double v : w.data) s += v * v;
  }
  return s;
}

std::vector<Matrix> init_weights(const std::vector<LayerSpec>& specs, uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> weights;
  weights.reserve(specs.size());
  for (const LayerSpec& spec : specs) {
    const double bound = std::sqrt(6.0 / (spec.in_dim + spec.out_dim));
    Matrix w(spec.out_dim, spec.in_dim + 1);
    for (int i = 0; i < spec.out_dim; ++i) {
      for (int j = 0; j < spec.in_dim; ++j) w(i, j) = rng.uniform(-bound, bound);
      // bias column stays zero
    }
    weights.push_back(std::move(w));
  }
  return weights;
}

NetworkModel make_model(const std::vector<int>& widths,
                        const std::vector<Activation>& activations, LossKind loss,
                        double l2_coeff, uint64_t seed) {
  if (widths.size() < 2) {
    throw ConfigError("architecture needs at least input and output widths");
  }
  if (activations.size() != widths.size() - 1) {
    throw ConfigError("architecture has " + std::to_string(widths.size() - 1) +
                      " layers but " + std::to_string(activations.size()) +
                      " activations");
  }
  NetworkModel model;
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    model.layers.push_back({widths[l], widths[l + 1], activations[l]});
  }
  model.loss = loss;
  model.l2_coeff = l2_coeff;
  model.weights = init_weights(model.layers, seed);
  return model;
}

BatchTrace forward_backward(const NetworkModel& model, const DataBatch& batch,
                            const TraceOptions& options) {
  check_batch(model, batch);
  const int m = int(batch.size());
  const int l_count = model.num_layers();
  ForwardPass fp = run_forward(model, batch.inputs, true);

  BatchTrace trace;
  trace.loss = batch_mean_loss(model, fp.a.back(), batch.targets);
  trace.layers.resize(l_count);

  Matrix da = output_loss_gradient(model, fp.a.back(), batch.targets);
  for (int l = l_count - 1; l >= 0; --l) {
    const Matrix& h = fp.h[l];
    const Matrix& a = fp.a[l];
    Matrix g(h.rows, h.cols);
    for (size_t i = 0; i < g.data.size(); ++i) {
      g.data[i] =
          da.data[i] * activation_derivative(model.layers[l].activation, h.data[i],
                                             a.data[i]);
    }

    LayerTrace& lt = trace.layers[l];
    const Matrix& abar_prev = fp.abar[l];
    lt.grad_mean = gemm(g, abar_prev, false, true);
    scale_in_place(lt.grad_mean, 1.0 / m);
    if (model.l2_coeff != 0.0) axpy(model.l2_coeff, model.weights[l], lt.grad_mean);
    lt.a_bar_prev = row_means(abar_prev);
    lt.h_bar = row_means(h);
    lt.g_bar = row_means(g);
    if (options.capture_a_outer) lt.a_outer_mean = outer_mean_cols(abar_prev);
    if (options.capture_g_outer) lt.g_outer_mean = outer_mean_cols(g);

    if (l > 0) {
      // Backpropagate through W_l without its bias column: the homogeneous 1
      // is a constant, so its row of W^T g is dropped.
      Matrix full = gemm(model.weights[l], g, true, false);
      full.rows = model.layers[l].in_dim;
      full.data.resize(size_t(full.rows) * full.cols);
      da = std::move(full);
    }
  }
  return trace;
}

double loss_only(const NetworkModel& model, const DataBatch& batch) {
  check_batch(model, batch);
  ForwardPass fp = run_forward(model, batch.inputs, false);
  return batch_mean_loss(model, fp.a.back(), batch.targets);
}

std::vector<Vector> forward_outputs(const NetworkModel& model,
                                    const std::vector<Vector>& inputs) {
  if (inputs.empty()) {
    throw EmptyBatchError("forward_outputs: no inputs");
  }
  for (const Vector& x : inputs) {
    if (int(x.size()) != model.input_dim()) {
      throw DimensionError("forward_outputs: input length " + std::to_string(x.size()) +
                           ", model expects " + std::to_string(model.input_dim()));
    }
  }
  ForwardPass fp = run_forward(model, inputs, false);
  const Matrix& a_last = fp.a.back();
  std::vector<Vector> out(inputs.size(), Vector(a_last.rows));
  for (int j = 0; j < a_last.cols; ++j)
    for (int i = 0; i < a_last.rows; ++i) out[j][i] = a_last(i, j);
  return out;
}

double mean_square_test_error(const NetworkModel& model, const DataBatch& batch) {
  check_batch(model, batch);
  ForwardPass fp = run_forward(model, batch.inputs, false);
  const Matrix& a_last = fp.a.back();
  double total = 0.0;
  for (int j = 0; j < a_last.cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < a_last.rows; ++i) {
      const double d = a_last(i, j) - batch.targets[j][i];
      s += d * d;
    }
    total += 0.5 * s;
  }
  return total / a_last.cols;
}

std::vector<Matrix> activation_outer_means(const NetworkModel& model,
                                           const std::vector<Vector>& inputs) {
  if (inputs.empty()) {
    throw EmptyBatchError("activation_outer_means: no inputs");
  }
  ForwardPass fp = run_forward(model, inputs, true);
  std::vector<Matrix> stats;
  stats.reserve(fp.abar.size());
  for (const Matrix& abar : fp.abar) stats.push_back(outer_mean_cols(abar));
  return stats;
}

std::vector<Vector> sample_predictive_targets(const NetworkModel& model,
                                              const std::vector<Vector>& inputs,
                                              Rng& rng) {
  std::vector<Vector> outputs = forward_outputs(model, inputs);
  for (Vector& a : outputs) {
    for (double& v : a) {
      v = model.loss == LossKind::binary_entropy ? double(rng.bernoulli(v))
                                                 : v + rng.gauss();
    }
  }
  return outputs;
}

void apply_step(NetworkModel& model, const std::vector<Matrix>& direction, double alpha) {
  if (direction.size() != model.weights.size()) {
    throw DimensionError("apply_step: " + std::to_string(direction.size()) +
                         " direction blocks for " + std::to_string(model.weights.size()) +
                         " layers");
  }
  for (size_t l = 0; l < model.weights.size(); ++l) {
    axpy(-alpha, direction[l], model.weights[l]);
  }
}

}  // namespace kqn
