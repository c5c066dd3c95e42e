// Acceptance harness: exercises every shipped criterion end to end and prints
// one PASS/FAIL line per criterion. Exit code = number of failed hard
// criteria (soft comparisons are reported but never fail the run).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kqn/bench.hpp"
#include "kqn/format.hpp"
#include "kqn/optim.hpp"
#include "kqn/rng.hpp"
#include "kqn/verify.hpp"
#include "test_util.hpp"

using namespace kqn;

namespace {

int g_failures = 0;

void report(int id, bool pass, const std::string& label, const std::string& detail) {
  std::printf("C%-2d %s  %s  [%s]\n", id, pass ? "PASS" : "FAIL", label.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

void report_soft(const std::string& label, bool held, const std::string& detail) {
  std::printf("     soft %s  %s  [%s]\n", held ? "HOLDS" : "MISSED", label.c_str(),
              detail.c_str());
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double worst_of(const SuiteReport& report) {
  double w = 0.0;
  for (const SuiteCheck& c : report.checks) w = std::max(w, std::fabs(c.worst));
  return w;
}

// Suite criterion runner with a wall-clock budget.
void suite_criterion(int id, const std::string& label, const SuiteReport& suite,
                     double elapsed, double budget) {
  const bool pass = suite.all_passed() && elapsed < budget;
  report(id, pass, label,
         "worst " + format_g9(worst_of(suite)) + ", " + format_g9(elapsed) + " s (budget " +
             format_g9(budget) + " s)");
}

// --- criterion 6: exact-inversion eigenvalue interval --------------------------

void criterion_lemma1_interval() {
  const double lambda_a = 0.316;
  std::vector<int> widths{16, 8, 16};
  std::vector<Activation> acts{Activation::sigmoid, Activation::sigmoid};
  NetworkModel model =
      make_model(widths, acts, LossKind::binary_entropy, 1e-5, 60601);
  Dataset data = synthetic_autoencoder(606, 200, 16, SyntheticKind::binary);

  KbfgsConfig config;
  config.alpha = 0.3;
  config.damping = lambda_a * lambda_a;  // lambda_a = sqrt(damping)
  config.use_lbfgs = true;
  config.skip_variant = true;
  config.exact_a_inverse = true;
  KbfgsState state = make_kbfgs_state(model, config);
  warm_start(state, model, data, 50, 0);

  BoundMonitor monitor(model, config, /*inputs_bounded=*/true);
  BatchSampler sampler(data.size(), 50, 606);
  for (int k = 0; k < 200; ++k) {
    StepMetrics metrics = kbfgs_step(state, model, sampler.next_batch(data));
    monitor.observe(state, metrics);
  }
  MonitorReport rep = monitor.report();

  bool pass = rep.violations.empty() && rep.steps_observed == 200;
  std::string detail = "lambda_a 0.316, 200 iterations";
  for (size_t l = 0; l < rep.extremes.size(); ++l) {
    const int d = model.layers[l].in_dim;
    const double lo = 1.0 / (1.0 + d + lambda_a);
    const double hi = 1.0 / lambda_a;
    pass = pass && rep.extremes[l].ha_min >= lo * (1.0 - 1e-6) &&
           rep.extremes[l].ha_max <= hi * (1.0 + 1e-6);
    detail += "; l" + std::to_string(l + 1) + " Ha in [" +
              format_g9(rep.extremes[l].ha_min) + ", " + format_g9(rep.extremes[l].ha_max) +
              "] vs [" + format_g9(lo) + ", " + format_g9(hi) + "]";
  }
  if (!rep.violations.empty()) {
    detail += "; first violation: " + rep.violations.front();
  }
  report(6, pass, "Lemma 1 H_a eigenvalue interval under exact inversion", detail);
}

// --- criterion 7: damped BFGS norm growth --------------------------------------

void criterion_norm_growth() {
  ArchPreset preset = arch_preset("tiny-ae");
  NetworkModel model =
      make_model(preset.widths, preset.activations, preset.loss, 1e-5, 70707);
  Dataset data = synthetic_autoencoder(707, 100, 16, SyntheticKind::continuous);

  KbfgsConfig config;
  config.alpha = 0.1;
  config.damping = 0.3;
  config.mu1 = 0.2;
  KbfgsState state = make_kbfgs_state(model, config);
  warm_start(state, model, data, 20, 0);

  const double growth = 1.0 + 1.0 / config.mu1;
  const int layers = model.num_layers();
  BatchSampler sampler(data.size(), 20, 707);
  bool pass = true;
  double worst_ratio = 0.0;
  long checked = 0, skipped = 0;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> lmax_b_before(layers);
    for (int l = 0; l < layers; ++l) {
      lmax_b_before[l] = 1.0 / testutil::eigen_extremes_oracle(state.layers[l].hg).first;
    }
    StepMetrics metrics = kbfgs_step(state, model, sampler.next_batch(data));
    for (int l = 0; l < layers; ++l) {
      if (metrics.layers[l].skipped) {
        ++skipped;
        continue;
      }
      const double lmax_b_after =
          1.0 / testutil::eigen_extremes_oracle(state.layers[l].hg).first;
      const double ratio = lmax_b_after / (lmax_b_before[l] * growth);
      worst_ratio = std::max(worst_ratio, ratio);
      pass = pass && lmax_b_after <= lmax_b_before[l] * growth * (1.0 + 1e-8);
      ++checked;
    }
  }
  report(7, pass, "BFGS norm growth lambda_max(B+) <= (1+1/mu1) lambda_max(B)",
         std::to_string(checked) + " damped updates (+" + std::to_string(skipped) +
             " skipped), worst ratio " + format_g9(worst_ratio) + " (<= 1)");
}

// --- criteria 8 and 9: desk-scale training -------------------------------------

// Renders grayscale pen-stroke images and writes them as an IDX ubyte file, so
// the stand-in flows through the exact loader a real image subset would use.
// Scan statistics matter here, not just dimensions. Smooth [0, 1] stroke edges
// keep the reconstruction sigmoids away from their flat tails (hard 0/1 pixels
// pair an O(1) entropy gradient with vanishing curvature, and the
// curvature-scaled step overshoots at the shipped step sizes). The
// low-frequency background field gives each image more degrees of freedom than
// the bottleneck width, so a small subset keeps an irreducible residual like
// real scans instead of being memorized within a few epochs; without that
// floor the problem sharpens so fast that gradients outrun the averaged
// curvature and the run detonates mid-descent.
std::string ensure_stroke_idx(int count, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/stroke-images-idx3-ubyte";
  constexpr int side = 28;
  constexpr int waves = 6;
  Rng rng(0x57A0CE5u);
  std::ofstream out(path, std::ios::binary);
  auto put_be32 = [&](uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  const unsigned char magic[4] = {0, 0, 0x08, 3};
  out.write(reinterpret_cast<const char*>(magic), 4);
  put_be32(uint32_t(count));
  put_be32(side);
  put_be32(side);
  std::vector<double> canvas(side * side);
  std::vector<unsigned char> pixels(side * side);
  for (int i = 0; i < count; ++i) {
    // Paper texture: a dim base level plus a few random plane waves.
    const double base = rng.uniform(0.03, 0.09);
    std::fill(canvas.begin(), canvas.end(), base);
    for (int w = 0; w < waves; ++w) {
      const double amp = rng.uniform(0.01, 0.04);
      const double fx = rng.uniform(0.04, 0.35), fy = rng.uniform(0.04, 0.35);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
          canvas[py * side + px] +=
              amp * std::cos(6.283185307179586 * (fx * px + fy * py) + phase);
        }
      }
    }
    const int strokes = 2 + int(rng.below(3));
    for (int s = 0; s < strokes; ++s) {
      // One stroke: a quadratic Bezier pen path stamped with a Gaussian nib.
      const double x0 = rng.uniform(5.0, 23.0), y0 = rng.uniform(5.0, 23.0);
      const double x1 = rng.uniform(2.0, 26.0), y1 = rng.uniform(2.0, 26.0);
      const double x2 = rng.uniform(5.0, 23.0), y2 = rng.uniform(5.0, 23.0);
      const double ink = rng.uniform(0.7, 1.0);
      const double nib = rng.uniform(0.9, 1.3);
      for (int k = 0; k <= 63; ++k) {
        const double t = k / 63.0;
        const double u = 1.0 - t;
        const double cx = u * u * x0 + 2.0 * u * t * x1 + t * t * x2;
        const double cy = u * u * y0 + 2.0 * u * t * y1 + t * t * y2;
        const int px_lo = std::max(0, int(cx) - 3), px_hi = std::min(side - 1, int(cx) + 3);
        const int py_lo = std::max(0, int(cy) - 3), py_hi = std::min(side - 1, int(cy) + 3);
        for (int py = py_lo; py <= py_hi; ++py) {
          for (int px = px_lo; px <= px_hi; ++px) {
            const double d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            const double v = ink * std::exp(-d2 / (2.0 * nib * nib));
            double& cell = canvas[py * side + px];
            cell = std::max(cell, v);
          }
        }
      }
    }
    for (int j = 0; j < side * side; ++j) {
      const double v = std::clamp(canvas[j], 0.0, 1.0);
      pixels[j] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
    out.write(reinterpret_cast<const char*>(pixels.data()), side * side);
  }
  return path;
}

ExperimentConfig desk_config(bool& real_mnist) {
  ExperimentConfig config;
  const char* env = std::getenv("KQN_MNIST_PATH");
  std::string idx_path = env != nullptr ? env : "data/train-images-idx3-ubyte";
  real_mnist = std::filesystem::exists(idx_path);
  config.dataset_kind = DatasetKind::idx;
  config.dataset_path = real_mnist ? idx_path : ensure_stroke_idx(6000, "acceptance_out");
  config.train_limit = 5000;
  config.test_limit = 1000;
  config.arch = "mnist-ae";
  config.batch_size = 1000;
  config.epochs = 20;
  config.seed = 0;
  config.out_dir = "acceptance_out";
  return config;
}

void criterion_desk_scale() {
  bool real_mnist = false;
  const ExperimentConfig base = desk_config(real_mnist);
  const std::string source = real_mnist ? "real MNIST subset" : "stroke-image stand-in";

  auto run_one = [&](OptimizerKind kind) {
    std::fprintf(stderr, "  [desk-scale] training %s ...\n", to_string(kind));
    ExperimentConfig config = base;
    config.optimizer = kind;
    return run_experiment(config);
  };

  RunResult kbfgs_run = run_one(OptimizerKind::kbfgs);
  RunResult kbfgs_l_run = run_one(OptimizerKind::kbfgs_l);
  RunResult kfac_run = run_one(OptimizerKind::kfac);
  RunResult sgdm_run = run_one(OptimizerKind::sgdm);

  auto ratio_of = [](const RunResult& r) {
    if (r.diverged || r.records.empty() || !std::isfinite(r.initial_train_loss)) {
      return std::numeric_limits<double>::infinity();
    }
    return r.records.back().train_loss / r.initial_train_loss;
  };
  const double r_kbfgs = ratio_of(kbfgs_run);
  const double r_kbfgs_l = ratio_of(kbfgs_l_run);
  const double r_kfac = ratio_of(kfac_run);

  const bool pass = r_kbfgs <= 0.60 && r_kbfgs_l <= 0.60 && r_kfac <= 0.60;
  report(8, pass, "desk-scale training: final loss <= 60% of epoch-0 loss",
         source + "; kbfgs " + format_g9(r_kbfgs) + ", kbfgs_l " + format_g9(r_kbfgs_l) +
             ", kfac " + format_g9(r_kfac) + " (each <= 0.6)");

  const bool soft_ok = !kbfgs_run.records.empty() && !sgdm_run.records.empty() &&
                       kbfgs_run.records.back().train_loss <=
                           sgdm_run.records.back().train_loss;
  report_soft("K-BFGS epoch-20 loss <= SGD-m epoch-20 loss", soft_ok,
              "kbfgs " +
                  format_g9(kbfgs_run.records.empty()
                                ? std::numeric_limits<double>::quiet_NaN()
                                : kbfgs_run.records.back().train_loss) +
                  " vs sgdm " +
                  format_g9(sgdm_run.records.empty()
                                ? std::numeric_limits<double>::quiet_NaN()
                                : sgdm_run.records.back().train_loss));

  // criterion 9: per-layer DD satisfaction on the K-BFGS(L) run
  double min_fraction = 1.0;
  int min_layer = 0;
  const size_t layers = kbfgs_l_run.records.empty()
                            ? 0
                            : kbfgs_l_run.records.front().dd_fraction.size();
  for (size_t l = 0; l < layers; ++l) {
    double acc = 0.0;
    for (const EpochRecord& rec : kbfgs_l_run.records) acc += rec.dd_fraction[l];
    const double fraction = acc / double(kbfgs_l_run.records.size());
    if (fraction < min_fraction) {
      min_fraction = fraction;
      min_layer = int(l) + 1;
    }
  }
  const bool dd_pass = layers > 0 && min_fraction >= 0.8;
  report(9, dd_pass, "DD satisfaction rate on the K-BFGS(L) run",
         "min layer fraction " + format_g9(min_fraction) + " at layer " +
             std::to_string(min_layer) +
             " (hard >= 0.8; paper observes >= 0.9 at full scale)");
}

// --- criterion 10: CSV determinism ----------------------------------------------

std::vector<std::string> csv_lines(const std::string& path) {
  std::vector<std::string> lines;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

void criterion_determinism() {
  ExperimentConfig config;
  config.synthetic_n = 60;
  config.synthetic_test_n = 20;
  config.synthetic_dim = 16;
  config.arch = "tiny-ae";
  config.optimizer = OptimizerKind::kbfgs_l;
  config.epochs = 3;
  config.batch_size = 20;
  config.seed = 11;

  config.out_dir = "acceptance_out/det1";
  RunResult a = run_experiment(config);
  config.out_dir = "acceptance_out/det2";
  RunResult b = run_experiment(config);

  auto la = csv_lines(a.csv_path);
  auto lb = csv_lines(b.csv_path);
  bool pass = la.size() == lb.size() && !la.empty();
  int diffs = 0;
  for (size_t i = 0; pass && i < la.size(); ++i) {
    std::stringstream sa(la[i]), sb(lb[i]);
    std::string fa, fb;
    int col = 0;
    while (true) {
      const bool ga = bool(std::getline(sa, fa, ','));
      const bool gb = bool(std::getline(sb, fb, ','));
      if (ga != gb) {
        pass = false;
        break;
      }
      if (!ga) break;
      if (col != 3 && fa != fb) {  // column 3 is wall_seconds
        pass = false;
        ++diffs;
      }
      ++col;
    }
  }
  report(10, pass, "byte-identical CSVs across reruns (modulo wall time)",
         std::to_string(la.size()) + " lines compared, " + std::to_string(diffs) +
             " unexpected field differences");
}

}  // namespace

int main() {
  std::printf("acceptance: Kronecker-factored quasi-Newton toolkit\n");

  {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteReport s = dd_guarantee_suite(1, 100000, 50, 1e-12);
    suite_criterion(1, "double-damping guarantees (1e5 draws, d <= 50, slack 1e-12)", s,
                    seconds_since(t0), 10.0);
  }
  {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteReport s = theorem1_suite(2, 1000, 20, 1e-8);
    suite_criterion(2, "Theorem 1 equivalence (1000 trials, d <= 20, rel 1e-8)", s,
                    seconds_since(t0), 5.0);
  }
  {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteReport s = lbfgs_equivalence_suite(3, 100, 1e-10);
    suite_criterion(3, "compact vs two-loop L-BFGS (100 states/cell, rel 1e-10)", s,
                    seconds_since(t0), 30.0);
  }
  {
    SuiteReport s = gradient_oracle_suite(4, 10, 1e-5, 1e-5);
    report(4, s.all_passed(), "gradient oracle (10 seeds, h 1e-5, rel 1e-5)",
           "worst " + format_g9(worst_of(s)));
  }
  {
    SuiteReport s = kron_hessian_suite(5, 5, 1e-4, 1e-4);
    report(5, s.all_passed(), "Kronecker layer Hessian (5 seeds, rel 1e-4)",
           "worst " + format_g9(worst_of(s)));
  }
  criterion_lemma1_interval();
  criterion_norm_growth();
  criterion_desk_scale();
  criterion_determinism();

  std::printf("%d of 10 criteria failed\n", g_failures);
  return g_failures;
}
