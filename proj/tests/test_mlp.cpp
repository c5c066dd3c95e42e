#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kqn/mlp.hpp"
#include "kqn/verify.hpp"
#include "test_util.hpp"

using namespace kqn;
using namespace kqn::testutil;

namespace {

DataBatch random_ae_batch(Rng& rng, int dim, int m, bool binary) {
  DataBatch b;
  for (int i = 0; i < m; ++i) {
    Vector x(dim);
    for (double& v : x) v = binary ? double(rng.bernoulli(0.5)) : rng.uniform();
    b.targets.push_back(x);
    b.inputs.push_back(std::move(x));
  }
  return b;
}

}  // namespace

TEST_CASE("init_weights shape, bias column, bound, determinism") {
  std::vector<LayerSpec> specs{{2, 3, Activation::relu}};
  auto w1 = init_weights(specs, 42);
  auto w2 = init_weights(specs, 42);
  auto w3 = init_weights(specs, 43);
  REQUIRE(w1.size() == 1);
  CHECK(w1[0].rows == 3);
  CHECK(w1[0].cols == 3);
  const double bound = std::sqrt(6.0 / 5.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(w1[0](i, 2) == 0.0);  // bias column
    for (int j = 0; j < 2; ++j) CHECK(std::abs(w1[0](i, j)) <= bound);
  }
  CHECK(w1[0].data == w2[0].data);  // bit-identical
  CHECK(w1[0].data != w3[0].data);
}

TEST_CASE("make_model validates architecture") {
  CHECK_THROWS_AS(make_model({4}, {}, LossKind::mse, 0.0, 0), ConfigError);
  CHECK_THROWS_AS(make_model({4, 3}, {Activation::relu, Activation::relu},
                             LossKind::mse, 0.0, 0),
                  ConfigError);
}

TEST_CASE("single linear layer hand trace") {
  // W = [[1, 0]] (weight 1, bias 0), x = [1], y = [0], mse.
  NetworkModel model = make_model({1, 1}, {Activation::linear}, LossKind::mse, 0.0, 0);
  model.weights[0](0, 0) = 1.0;
  model.weights[0](0, 1) = 0.0;
  DataBatch batch{{{1.0}}, {{0.0}}};
  BatchTrace t = forward_backward(model, batch);
  CHECK(t.loss == doctest::Approx(0.5).epsilon(1e-15));
  REQUIRE(t.layers.size() == 1);
  CHECK(t.layers[0].h_bar[0] == 1.0);
  CHECK(t.layers[0].g_bar[0] == 1.0);
  CHECK(t.layers[0].grad_mean(0, 0) == 1.0);
  CHECK(t.layers[0].grad_mean(0, 1) == 1.0);
  CHECK(t.layers[0].a_bar_prev == Vector{1.0, 1.0});
  CHECK(t.layers[0].a_outer_mean(0, 0) == 1.0);
  CHECK(t.layers[0].a_outer_mean(1, 1) == 1.0);
}

TEST_CASE("relu dead unit gives zero gradient") {
  NetworkModel model = make_model({1, 1}, {Activation::relu}, LossKind::mse, 0.0, 0);
  model.weights[0](0, 0) = -1.0;  // h = -1 -> a = 0
  DataBatch batch{{{1.0}}, {{1.0}}};
  BatchTrace t = forward_backward(model, batch);
  CHECK(t.loss == doctest::Approx(0.5));
  CHECK(t.layers[0].grad_mean(0, 0) == 0.0);
  CHECK(t.layers[0].grad_mean(0, 1) == 0.0);

  // subgradient at h = 0 is 0 by convention
  model.weights[0](0, 0) = 0.0;
  BatchTrace t0 = forward_backward(model, batch);
  CHECK(t0.layers[0].g_bar[0] == 0.0);
}

TEST_CASE("binary entropy hand values and clamping") {
  NetworkModel model = make_model({1, 1}, {Activation::sigmoid},
                                  LossKind::binary_entropy, 0.0, 0);
  model.weights[0](0, 0) = 0.0;  // a = sigmoid(0) = 0.5
  DataBatch batch{{{1.0}}, {{1.0}}};
  BatchTrace t = forward_backward(model, batch);
  CHECK(t.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // Da = (0.5 - 1)/0.25 = -2, phi' = 0.25 -> g = -0.5
  CHECK(t.layers[0].g_bar[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(t.layers[0].grad_mean(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));

  // saturated output stays finite through the clamp
  model.weights[0](0, 0) = 100.0;  // sigmoid(100) rounds to 1.0
  DataBatch zero_target{{{1.0}}, {{0.0}}};
  const double loss = loss_only(model, zero_target);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(-std::log(1e-12)).epsilon(1e-6));
  CHECK(std::isfinite(forward_backward(model, zero_target).layers[0].g_bar[0]));
}

TEST_CASE("l2 term contributes to loss and gradient only as eta") {
  Rng rng(9);
  DataBatch batch = random_ae_batch(rng, 4, 6, false);
  NetworkModel plain = make_model({4, 3, 4}, {Activation::tanh, Activation::sigmoid},
                                  LossKind::mse, 0.0, 7);
  NetworkModel reg = plain;
  reg.l2_coeff = 1e-3;
  double wsq = 0.0;
  for (const Matrix& w : reg.weights)
    for (double v : w.data) wsq += v * v;
  CHECK(loss_only(reg, batch) ==
        doctest::Approx(loss_only(plain, batch) + 0.5 * 1e-3 * wsq).epsilon(1e-12));

  BatchTrace tp = forward_backward(plain, batch);
  BatchTrace tr = forward_backward(reg, batch);
  for (int l = 0; l < 2; ++l) {
    Matrix want = tp.layers[l].grad_mean;
    axpy(1e-3, plain.weights[l], want);
    CHECK(rel_diff(tr.layers[l].grad_mean, want) <= 1e-12);
  }
}

TEST_CASE("loss_only equals forward_backward loss to 0 ulp") {
  Rng rng(21);
  DataBatch batch = random_ae_batch(rng, 5, 9, true);
  NetworkModel model = make_model({5, 4, 5}, {Activation::tanh, Activation::sigmoid},
                                  LossKind::binary_entropy, 1e-5, 3);
  CHECK(loss_only(model, batch) == forward_backward(model, batch).loss);
}

TEST_CASE("backward pass matches central finite differences") {
  Rng rng(31);
  // tanh + mse autoencoder
  {
    DataBatch batch = random_ae_batch(rng, 4, 5, false);
    NetworkModel model = make_model(
        {4, 3, 4}, {Activation::tanh, Activation::linear}, LossKind::mse, 0.0, 11);
    BatchTrace t = forward_backward(model, batch);
    auto fd = finite_diff_gradient(model, batch, 1e-5);
    for (int l = 0; l < 2; ++l) CHECK(rel_diff(t.layers[l].grad_mean, fd[l]) <= 1e-6);
  }
  // sigmoid-output binary entropy
  {
    DataBatch batch = random_ae_batch(rng, 4, 5, true);
    NetworkModel model = make_model(
        {4, 3, 4}, {Activation::sigmoid, Activation::sigmoid},
        LossKind::binary_entropy, 0.0, 13);
    BatchTrace t = forward_backward(model, batch);
    auto fd = finite_diff_gradient(model, batch, 1e-5);
    for (int l = 0; l < 2; ++l) CHECK(rel_diff(t.layers[l].grad_mean, fd[l]) <= 1e-6);
  }
}

TEST_CASE("batch statistics equal means of per-sample passes") {
  Rng rng(41);
  DataBatch batch = random_ae_batch(rng, 3, 7, false);
  NetworkModel model = make_model({3, 4, 3}, {Activation::sigmoid, Activation::linear},
                                  LossKind::mse, 0.0, 17);
  TraceOptions opts;
  opts.capture_g_outer = true;
  BatchTrace whole = forward_backward(model, batch, opts);

  std::vector<BatchTrace> singles;
  for (size_t i = 0; i < batch.size(); ++i) {
    singles.push_back(forward_backward(
        model, DataBatch{{batch.inputs[i]}, {batch.targets[i]}}, opts));
  }
  for (int l = 0; l < 2; ++l) {
    Matrix grad_mean(whole.layers[l].grad_mean.rows, whole.layers[l].grad_mean.cols);
    Matrix a_outer(whole.layers[l].a_outer_mean.rows, whole.layers[l].a_outer_mean.cols);
    Matrix g_outer(whole.layers[l].g_outer_mean.rows, whole.layers[l].g_outer_mean.cols);
    for (const BatchTrace& s : singles) {
      axpy(1.0 / singles.size(), s.layers[l].grad_mean, grad_mean);
      axpy(1.0 / singles.size(), s.layers[l].a_outer_mean, a_outer);
      axpy(1.0 / singles.size(), s.layers[l].g_outer_mean, g_outer);
    }
    CHECK(rel_diff(whole.layers[l].grad_mean, grad_mean) <= 1e-12);
    CHECK(rel_diff(whole.layers[l].a_outer_mean, a_outer) <= 1e-12);
    CHECK(rel_diff(whole.layers[l].g_outer_mean, g_outer) <= 1e-12);
  }
}

TEST_CASE("trace options control outer-product capture") {
  Rng rng(43);
  DataBatch batch = random_ae_batch(rng, 3, 4, false);
  NetworkModel model = make_model({3, 2, 3}, {Activation::tanh, Activation::linear},
                                  LossKind::mse, 0.0, 19);
  BatchTrace def = forward_backward(model, batch);
  CHECK(def.layers[0].a_outer_mean.rows == 4);
  CHECK(def.layers[0].g_outer_mean.rows == 0);

  TraceOptions none;
  none.capture_a_outer = false;
  BatchTrace light = forward_backward(model, batch, none);
  CHECK(light.layers[0].a_outer_mean.rows == 0);
  CHECK(rel_diff(light.layers[0].grad_mean, def.layers[0].grad_mean) == 0.0);
}

TEST_CASE("apply_step") {
  NetworkModel model = make_model({2, 2}, {Activation::linear}, LossKind::mse, 0.0, 5);
  Matrix before = model.weights[0];
  Matrix dir(2, 3);
  for (double& v : dir.data) v = 1.0;
  apply_step(model, {dir}, 0.0);
  CHECK(model.weights[0].data == before.data);
  apply_step(model, {dir}, 0.25);
  for (size_t i = 0; i < before.data.size(); ++i) {
    CHECK(model.weights[0].data[i] == doctest::Approx(before.data[i] - 0.25).epsilon(1e-15));
  }
  CHECK_THROWS_AS(apply_step(model, {dir, dir}, 1.0), DimensionError);
  Matrix bad(1, 1);
  CHECK_THROWS_AS(apply_step(model, {bad}, 1.0), DimensionError);
}

TEST_CASE("sample_predictive_targets") {
  // degenerate Bernoulli: saturated sigmoid gives target exactly 1
  NetworkModel model = make_model({1, 1}, {Activation::sigmoid},
                                  LossKind::binary_entropy, 0.0, 0);
  model.weights[0](0, 0) = 100.0;
  Rng rng(55);
  auto t = sample_predictive_targets(model, {{1.0}}, rng);
  CHECK(t[0][0] == 1.0);

  // Monte Carlo mean tracks the predictive probability
  model.weights[0](0, 0) = std::log(0.3 / 0.7);  // sigmoid -> 0.3
  Rng rng2(56);
  double mean = 0.0;
  const int n = 100000;
  std::vector<Vector> inputs(n, Vector{1.0});
  auto draws = sample_predictive_targets(model, inputs, rng2);
  for (const Vector& d : draws) {
    CHECK((d[0] == 0.0 || d[0] == 1.0));
    mean += d[0];
  }
  CHECK(std::abs(mean / n - 0.3) <= 0.01);

  // mse targets are a_L plus exactly the rng's gauss stream
  NetworkModel lin = make_model({2, 2}, {Activation::linear}, LossKind::mse, 0.0, 9);
  std::vector<Vector> xin{{0.3, 0.7}, {0.1, 0.4}};
  auto outs = forward_outputs(lin, xin);
  Rng ra(77), rb(77);
  auto sampled = sample_predictive_targets(lin, xin, ra);
  for (size_t j = 0; j < sampled.size(); ++j) {
    for (size_t i = 0; i < sampled[j].size(); ++i) {
      CHECK(sampled[j][i] == outs[j][i] + rb.gauss());
    }
  }
}

TEST_CASE("mean_square_test_error hand value") {
  NetworkModel model = make_model({1, 1}, {Activation::linear}, LossKind::mse, 0.0, 0);
  model.weights[0](0, 0) = 1.0;
  DataBatch batch{{{1.0}, {2.0}}, {{0.0}, {2.0}}};
  // outputs 1 and 2, errors 0.5*1 and 0 -> mean 0.25
  CHECK(mean_square_test_error(model, batch) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("divergence and batch shape errors") {
  NetworkModel model = make_model({2, 3, 2}, {Activation::relu, Activation::linear},
                                  LossKind::mse, 0.0, 1);
  DataBatch batch{{{1.0, 2.0}}, {{0.0, 0.0}}};
  model.weights[0](0, 0) = std::numeric_limits<double>::infinity();
  try {
    forward_backward(model, batch);
    FAIL("expected NumericalDivergenceError");
  } catch (const NumericalDivergenceError& e) {
    CHECK(e.layer == 1);
  }

  NetworkModel ok = make_model({2, 2}, {Activation::linear}, LossKind::mse, 0.0, 1);
  CHECK_THROWS_AS(loss_only(ok, DataBatch{}), EmptyBatchError);
  CHECK_THROWS_AS(loss_only(ok, DataBatch{{{1.0, 2.0}}, {{1.0}}}), DimensionError);
  CHECK_THROWS_AS(loss_only(ok, DataBatch{{{1.0}}, {{1.0, 2.0}}}), DimensionError);
}
