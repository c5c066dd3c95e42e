#include "kqn/optim.hpp"

#include <chrono>
#include <cmath>
#include <utility>

#include "kqn/errors.hpp"

namespace kqn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void update_ma(Matrix& ma, const Matrix& x, double decay) {
  scale_in_place(ma, decay);
  axpy(1.0 - decay, x, ma);
}

void update_ma(Vector& ma, const Vector& x, double decay) {
  if (ma.size() != x.size()) {
    throw DimensionError("moving average: length " + std::to_string(ma.size()) +
                         " vs " + std::to_string(x.size()));
  }
  for (size_t i = 0; i < ma.size(); ++i) ma[i] = decay * ma[i] + (1.0 - decay) * x[i];
}

Matrix zeros_like(const Matrix& w) { return Matrix(w.rows, w.cols); }

Matrix lm_inverse(const Matrix& a, double shift) {
  Matrix shifted = a;
  add_scaled_identity(shifted, shift);
  return spd_inverse(shifted);
}

// Walks the dataset in order in chunks of batch_size. max_batches = 0 means
// all chunks; include_tail controls whether a final short chunk is visited.
template <typename Fn>
void for_each_chunk(const Dataset& data, size_t batch_size, size_t max_batches,
                    bool include_tail, Fn&& fn) {
  if (batch_size == 0) throw ConfigError("warm start: batch size must be positive");
  if (data.size() == 0) throw EmptyBatchError("warm start: empty dataset");
  size_t served = 0;
  for (size_t pos = 0; pos < data.size(); pos += batch_size) {
    const size_t len = std::min(batch_size, data.size() - pos);
    if (len < batch_size && !include_tail) break;
    if (max_batches != 0 && served == max_batches) break;
    DataBatch chunk;
    chunk.inputs.assign(data.inputs.begin() + pos, data.inputs.begin() + pos + len);
    chunk.targets.assign(data.targets.begin() + pos, data.targets.begin() + pos + len);
    fn(chunk);
    ++served;
  }
}

}  // namespace

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "kbfgs") return OptimizerKind::kbfgs;
  if (s == "kbfgs_l") return OptimizerKind::kbfgs_l;
  if (s == "kbfgs_l_skip") return OptimizerKind::kbfgs_l_skip;
  if (s == "kfac") return OptimizerKind::kfac;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  if (s == "sgdm") return OptimizerKind::sgdm;
  throw ConfigError("unknown optimizer \"" + s + "\"");
}

const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kbfgs: return "kbfgs";
    case OptimizerKind::kbfgs_l: return "kbfgs_l";
    case OptimizerKind::kbfgs_l_skip: return "kbfgs_l_skip";
    case OptimizerKind::kfac: return "kfac";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::sgdm: return "sgdm";
  }
  return "?";
}

// --- K-BFGS family -----------------------------------------------------------

KbfgsState make_kbfgs_state(const NetworkModel& model, const KbfgsConfig& config) {
  if (config.alpha <= 0 || config.damping <= 0) {
    throw ConfigError("kbfgs: alpha and damping must be positive");
  }
  if (config.ma_decay < 0 || config.ma_decay >= 1) {
    throw ConfigError("kbfgs: ma_decay must lie in [0,1)");
  }
  if (config.mu1 <= 0 || config.mu1 >= 1) {
    throw ConfigError("kbfgs: mu1 must lie in (0,1)");
  }
  if (config.use_lbfgs && config.memory <= 0) {
    throw ConfigError("kbfgs: memory must be positive");
  }
  KbfgsState state;
  state.config = config;
  state.layers.reserve(model.num_layers());
  for (const LayerSpec& spec : model.layers) {
    KbfgsLayerState ls;
    ls.grad_ma = Matrix(spec.out_dim, spec.in_dim + 1);
    ls.a_side = make_hessian_action_state(spec.in_dim + 1, config.ma_decay,
                                          config.lambda_a());
    if (config.use_lbfgs) {
      ls.hg_buffer = LbfgsBuffer(spec.out_dim, config.memory);
    } else {
      ls.hg = Matrix::identity(spec.out_dim);
    }
    ls.s_ma.assign(spec.out_dim, 0.0);
    ls.y_ma.assign(spec.out_dim, 0.0);
    state.layers.push_back(std::move(ls));
  }
  return state;
}

StepMetrics kbfgs_step(KbfgsState& state, NetworkModel& model, const DataBatch& batch) {
  const auto start = Clock::now();
  const KbfgsConfig& cfg = state.config;
  const int num_layers = model.num_layers();

  TraceOptions first_opts;
  first_opts.capture_a_outer = true;
  BatchTrace trace = forward_backward(model, batch, first_opts);

  StepMetrics metrics;
  metrics.loss = trace.loss;
  metrics.layers.resize(num_layers);

  std::vector<Matrix> direction(num_layers);
  for (int l = 0; l < num_layers; ++l) {
    KbfgsLayerState& ls = state.layers[l];
    Matrix effective = trace.layers[l].grad_mean;
    if (cfg.double_grad && state.has_prev_second_grad) {
      scale_in_place(effective, 0.5);
      axpy(0.5, state.prev_second_grad[l], effective);
    }
    const Matrix* preconditioned_grad = &effective;
    if (!cfg.skip_variant) {
      update_ma(ls.grad_ma, effective, cfg.ma_decay);
      preconditioned_grad = &ls.grad_ma;
    }
    if (cfg.use_lbfgs) {
      Matrix half = gemm(*preconditioned_grad, ls.a_side.ha, false, false);
      direction[l] = ls.hg_buffer.apply(half);
    } else {
      direction[l] = kron_sandwich(ls.hg, *preconditioned_grad, ls.a_side.ha);
    }
  }

  const double alpha =
      cfg.skip_variant
          ? cfg.alpha * std::pow(double(state.step_count + 1), -cfg.lr_decay_exponent)
          : cfg.alpha;
  apply_step(model, direction, alpha);

  TraceOptions second_opts;
  second_opts.capture_a_outer = false;
  BatchTrace plus = forward_backward(model, batch, second_opts);
  if (cfg.double_grad) {
    state.prev_second_grad.clear();
    state.prev_second_grad.reserve(num_layers);
    for (int l = 0; l < num_layers; ++l) {
      state.prev_second_grad.push_back(plus.layers[l].grad_mean);
    }
    state.has_prev_second_grad = true;
  }

  for (int l = 0; l < num_layers; ++l) {
    KbfgsLayerState& ls = state.layers[l];
    LayerStepInfo& info = metrics.layers[l];

    Vector s_raw(ls.s_ma.size());
    Vector y_raw(ls.y_ma.size());
    for (size_t i = 0; i < s_raw.size(); ++i) {
      s_raw[i] = plus.layers[l].h_bar[i] - trace.layers[l].h_bar[i];
      y_raw[i] = plus.layers[l].g_bar[i] - trace.layers[l].g_bar[i];
    }
    update_ma(ls.s_ma, s_raw, cfg.ma_decay);
    update_ma(ls.y_ma, y_raw, cfg.ma_decay);

    try {
      CurvaturePair pair;
      Vector h_ytilde;
      if (cfg.use_lbfgs) {
        Vector hy = ls.hg_buffer.apply(ls.y_ma);
        pair = double_damp(ls.s_ma, ls.y_ma, hy, dot(ls.y_ma, hy), cfg.mu1, cfg.mu2());
        h_ytilde = ls.hg_buffer.apply(pair.y);
      } else {
        pair = double_damp(ls.s_ma, ls.y_ma, ls.hg, cfg.mu1, cfg.mu2());
        h_ytilde = matvec(ls.hg, pair.y);
      }
      info.theta1 = pair.theta1;
      info.theta2 = pair.theta2;
      // Satisfaction metric, measured against Hg before the update.
      const double y_h_y = dot(pair.y, h_ytilde);
      const double s_dot_y = dot(pair.s, pair.y);
      info.dd_satisfied = y_h_y <= (2.0 / cfg.mu1) * s_dot_y * (1.0 + 1e-12);

      bool keep = true;
      if (cfg.skip_variant) keep = dd_skip_predicate(pair, h_ytilde, cfg.mu1);
      if (keep) {
        if (cfg.use_lbfgs) {
          ls.hg_buffer.push(pair.s, pair.y);
        } else {
          ls.hg = bfgs_inverse_update(ls.hg, pair.s, pair.y);
        }
      } else {
        info.skipped = true;
      }
    } catch (const DegeneratePairError&) {
      info.skipped = true;
      info.dd_satisfied = false;
    } catch (const CurvatureConditionError&) {
      info.skipped = true;
      info.dd_satisfied = false;
    }

    if (cfg.exact_a_inverse) {
      update_ma(ls.a_side.a, trace.layers[l].a_outer_mean, cfg.ma_decay);
      ls.a_side.ha = lm_inverse(ls.a_side.a, cfg.lambda_a());
    } else {
      hessian_action_step(ls.a_side, trace.layers[l].a_outer_mean,
                          trace.layers[l].a_bar_prev);
    }
  }

  ++state.step_count;
  metrics.seconds = seconds_since(start);
  return metrics;
}

// --- KFAC ----------------------------------------------------------------------

KfacState make_kfac_state(const NetworkModel& model, const KfacConfig& config,
                          uint64_t sampling_seed) {
  if (config.alpha <= 0 || config.damping <= 0) {
    throw ConfigError("kfac: alpha and damping must be positive");
  }
  if (config.ma_decay < 0 || config.ma_decay >= 1) {
    throw ConfigError("kfac: ma_decay must lie in [0,1)");
  }
  if (config.inverse_period <= 0) {
    throw ConfigError("kfac: inverse_period must be positive");
  }
  KfacState state;
  state.config = config;
  state.sampling_rng = Rng(derive_seed(sampling_seed, 0xFAC));
  state.layers.reserve(model.num_layers());
  for (const LayerSpec& spec : model.layers) {
    KfacLayerState ls;
    ls.grad_ma = Matrix(spec.out_dim, spec.in_dim + 1);
    ls.a = Matrix(spec.in_dim + 1, spec.in_dim + 1);
    ls.g = Matrix(spec.out_dim, spec.out_dim);
    ls.ha = Matrix::identity(spec.in_dim + 1);
    ls.hg = Matrix::identity(spec.out_dim);
    state.layers.push_back(std::move(ls));
  }
  return state;
}

StepMetrics kfac_step(KfacState& state, NetworkModel& model, const DataBatch& batch) {
  const auto start = Clock::now();
  const KfacConfig& cfg = state.config;
  const int num_layers = model.num_layers();

  TraceOptions grad_only;
  grad_only.capture_a_outer = false;
  BatchTrace trace = forward_backward(model, batch, grad_only);

  StepMetrics metrics;
  metrics.loss = trace.loss;
  metrics.layers.resize(num_layers);

  std::vector<Matrix> direction(num_layers);
  for (int l = 0; l < num_layers; ++l) {
    KfacLayerState& ls = state.layers[l];
    update_ma(ls.grad_ma, trace.layers[l].grad_mean, cfg.ma_decay);
    direction[l] = kron_sandwich(ls.hg, ls.grad_ma, ls.ha);
  }
  apply_step(model, direction, cfg.alpha);

  // Factor statistics come from a pass with targets sampled from the model's
  // own predictive distribution at the updated weights.
  DataBatch sampled;
  sampled.inputs = batch.inputs;
  sampled.targets = sample_predictive_targets(model, batch.inputs, state.sampling_rng);
  TraceOptions stat_opts;
  stat_opts.capture_a_outer = true;
  stat_opts.capture_g_outer = true;
  BatchTrace stats = forward_backward(model, sampled, stat_opts);
  for (int l = 0; l < num_layers; ++l) {
    KfacLayerState& ls = state.layers[l];
    update_ma(ls.a, stats.layers[l].a_outer_mean, cfg.ma_decay);
    update_ma(ls.g, stats.layers[l].g_outer_mean, cfg.ma_decay);
  }

  ++state.step_count;
  const long k = state.step_count;
  if (k <= cfg.inverse_period || k % cfg.inverse_period == 0) {
    for (int l = 0; l < num_layers; ++l) {
      KfacLayerState& ls = state.layers[l];
      ls.ha = lm_inverse(ls.a, cfg.shift());
      ls.hg = lm_inverse(ls.g, cfg.shift());
    }
  }

  metrics.seconds = seconds_since(start);
  return metrics;
}

// --- first-order baselines ------------------------------------------------------

FirstOrderState make_first_order_state(const NetworkModel& model,
                                       const FirstOrderConfig& config) {
  switch (config.kind) {
    case OptimizerKind::sgdm:
    case OptimizerKind::adam:
    case OptimizerKind::rmsprop: break;
    default:
      throw ConfigError(std::string("first-order state for optimizer \"") +
                        to_string(config.kind) + "\"");
  }
  if (config.alpha <= 0) throw ConfigError("first-order: alpha must be positive");
  if (config.kind != OptimizerKind::sgdm && config.epsilon <= 0) {
    throw ConfigError("first-order: epsilon must be positive");
  }
  FirstOrderState state;
  state.config = config;
  for (const Matrix& w : model.weights) {
    state.m1.push_back(zeros_like(w));
    state.m2.push_back(zeros_like(w));
  }
  return state;
}

StepMetrics first_order_step(FirstOrderState& state, NetworkModel& model,
                             const DataBatch& batch) {
  const auto start = Clock::now();
  const FirstOrderConfig& cfg = state.config;
  const int num_layers = model.num_layers();

  TraceOptions grad_only;
  grad_only.capture_a_outer = false;
  BatchTrace trace = forward_backward(model, batch, grad_only);

  StepMetrics metrics;
  metrics.loss = trace.loss;
  metrics.layers.resize(num_layers);

  ++state.step_count;
  std::vector<Matrix> direction(num_layers);
  for (int l = 0; l < num_layers; ++l) {
    const Matrix& g = trace.layers[l].grad_mean;
    Matrix& m1 = state.m1[l];
    Matrix& m2 = state.m2[l];
    switch (cfg.kind) {
      case OptimizerKind::sgdm: {
        scale_in_place(m1, cfg.beta1);
        axpy(1.0, g, m1);
        direction[l] = m1;
        break;
      }
      case OptimizerKind::rmsprop: {
        Matrix dir(g.rows, g.cols);
        for (size_t i = 0; i < g.data.size(); ++i) {
          m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
          dir.data[i] = g.data[i] / (std::sqrt(m2.data[i]) + cfg.epsilon);
        }
        direction[l] = std::move(dir);
        break;
      }
      case OptimizerKind::adam: {
        const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step_count));
        const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step_count));
        Matrix dir(g.rows, g.cols);
        for (size_t i = 0; i < g.data.size(); ++i) {
          m1.data[i] = cfg.beta1 * m1.data[i] + (1.0 - cfg.beta1) * g.data[i];
          m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
          dir.data[i] = (m1.data[i] / c1) / (std::sqrt(m2.data[i] / c2) + cfg.epsilon);
        }
        direction[l] = std::move(dir);
        break;
      }
      default: break;
    }
  }
  apply_step(model, direction, cfg.alpha);

  metrics.seconds = seconds_since(start);
  return metrics;
}

// --- warm start -----------------------------------------------------------------

void warm_start(KbfgsState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches) {
  const int num_layers = model.num_layers();
  std::vector<Matrix> sums;
  for (const LayerSpec& spec : model.layers) {
    sums.emplace_back(spec.in_dim + 1, spec.in_dim + 1);
  }
  size_t total = 0;
  for_each_chunk(data, batch_size, num_batches, /*include_tail=*/true,
                 [&](const DataBatch& chunk) {
                   std::vector<Matrix> stats =
                       activation_outer_means(model, chunk.inputs);
                   for (int l = 0; l < num_layers; ++l) {
                     axpy(double(chunk.size()), stats[l], sums[l]);
                   }
                   total += chunk.size();
                 });
  for (int l = 0; l < num_layers; ++l) {
    KbfgsLayerState& ls = state.layers[l];
    scale_in_place(sums[l], 1.0 / double(total));
    ls.a_side.a = std::move(sums[l]);
    ls.a_side.ha = lm_inverse(ls.a_side.a, state.config.lambda_a());
  }
}

void warm_start(KfacState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches) {
  const int num_layers = model.num_layers();
  std::vector<Matrix> a_sums, g_sums;
  for (const LayerSpec& spec : model.layers) {
    a_sums.emplace_back(spec.in_dim + 1, spec.in_dim + 1);
    g_sums.emplace_back(spec.out_dim, spec.out_dim);
  }
  size_t total = 0;
  TraceOptions stat_opts;
  stat_opts.capture_a_outer = true;
  stat_opts.capture_g_outer = true;
  for_each_chunk(data, batch_size, num_batches, /*include_tail=*/true,
                 [&](const DataBatch& chunk) {
                   DataBatch sampled;
                   sampled.inputs = chunk.inputs;
                   sampled.targets = sample_predictive_targets(model, chunk.inputs,
                                                               state.sampling_rng);
                   BatchTrace stats = forward_backward(model, sampled, stat_opts);
                   for (int l = 0; l < num_layers; ++l) {
                     axpy(double(chunk.size()), stats.layers[l].a_outer_mean, a_sums[l]);
                     axpy(double(chunk.size()), stats.layers[l].g_outer_mean, g_sums[l]);
                   }
                   total += chunk.size();
                 });
  for (int l = 0; l < num_layers; ++l) {
    KfacLayerState& ls = state.layers[l];
    scale_in_place(a_sums[l], 1.0 / double(total));
    scale_in_place(g_sums[l], 1.0 / double(total));
    ls.a = std::move(a_sums[l]);
    ls.g = std::move(g_sums[l]);
    ls.ha = lm_inverse(ls.a, state.config.shift());
    // Hg stays identity until the first step's recompute.
  }
}

void warm_start(FirstOrderState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches) {
  if (state.config.kind != OptimizerKind::rmsprop) return;
  const int num_layers = model.num_layers();
  std::vector<Matrix> sums;
  for (const Matrix& w : model.weights) sums.push_back(zeros_like(w));
  size_t chunks = 0;
  TraceOptions grad_only;
  grad_only.capture_a_outer = false;
  for_each_chunk(data, batch_size, num_batches, /*include_tail=*/false,
                 [&](const DataBatch& chunk) {
                   BatchTrace trace = forward_backward(model, chunk, grad_only);
                   for (int l = 0; l < num_layers; ++l) {
                     const Matrix& g = trace.layers[l].grad_mean;
                     for (size_t i = 0; i < g.data.size(); ++i) {
                       sums[l].data[i] += g.data[i] * g.data[i];
                     }
                   }
                   ++chunks;
                 });
  if (chunks == 0) return;  // dataset smaller than one batch: stay cold
  for (int l = 0; l < num_layers; ++l) {
    scale_in_place(sums[l], 1.0 / double(chunks));
    state.m2[l] = std::move(sums[l]);
  }
}

// --- uniform driver interface ------------------------------------------------------

void warm_start(OptimizerState& state, const NetworkModel& model, const Dataset& data,
                size_t batch_size, size_t num_batches) {
  std::visit([&](auto& s) { warm_start(s, model, data, batch_size, num_batches); },
             state);
}

StepMetrics optimizer_step(OptimizerState& state, NetworkModel& model,
                           const DataBatch& batch) {
  struct Visitor {
    NetworkModel& model;
    const DataBatch& batch;
    StepMetrics operator()(KbfgsState& s) { return kbfgs_step(s, model, batch); }
    StepMetrics operator()(KfacState& s) { return kfac_step(s, model, batch); }
    StepMetrics operator()(FirstOrderState& s) {
      return first_order_step(s, model, batch);
    }
  };
  return std::visit(Visitor{model, batch}, state);
}

}  // namespace kqn
