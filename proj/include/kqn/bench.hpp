#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "kqn/data.hpp"
#include "kqn/mlp.hpp"
#include "kqn/optim.hpp"

namespace kqn {

// Autoencoder architecture preset: widths (first entry = input dim), one
// activation per layer, reconstruction loss.
struct ArchPreset {
  std::vector<int> widths;
  std::vector<Activation> activations;
  LossKind loss = LossKind::mse;
};

// Known presets: "mnist-ae", "faces-ae", "curves-ae", "tiny-ae".
// Unknown name -> ConfigError.
ArchPreset arch_preset(const std::string& name);

enum class DatasetKind { synthetic, idx, csv };

struct ExperimentConfig {
  // dataset
  DatasetKind dataset_kind = DatasetKind::synthetic;
  SyntheticKind synthetic_kind = SyntheticKind::continuous;
  int synthetic_n = 1000;
  int synthetic_test_n = 0;  // 0: synthetic_n / 5, at least 1
  int synthetic_dim = 16;    // must match the preset input width
  std::string dataset_path;  // idx / csv files
  size_t train_limit = 0;    // file data: first N samples train (0 = all)
  size_t test_limit = 0;     // file data: next N samples test (0 = reuse train)

  // model
  std::string arch = "tiny-ae";
  double l2 = 1e-5;

  // optimizer; alpha/damping 0 means "per-optimizer shipped default"
  OptimizerKind optimizer = OptimizerKind::kbfgs;
  double alpha = 0.0;
  double damping = 0.0;
  double beta = 0.9;  // moving-average decay everywhere it appears
  double mu1 = 0.2;
  int memory = 100;
  int inverse_period = 20;
  bool double_grad = false;
  size_t warm_start_batches = 0;  // 0 = whole training set

  // run
  int epochs = 20;
  size_t batch_size = 1000;
  uint64_t seed = 0;
  std::string out_dir = ".";

  // grid (run_grid only)
  std::vector<double> grid_alpha;
  std::vector<double> grid_damping;
};

// Shipped (alpha, damping) defaults per optimizer; damping is meaningless for
// sgdm and returned as 0.
double default_alpha(OptimizerKind kind);
double default_damping(OptimizerKind kind);

// Fill unset alpha/damping with the shipped defaults and validate every field.
// Out-of-range values raise ConfigError naming the offending key.
void finalize_config(ExperimentConfig& config);

// key = value lines, dotted keys, '#' comments, blank lines ignored.
// Unknown keys raise ConfigError naming the key. The returned config is
// finalized (defaults filled, ranges validated).
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);

struct BenchData {
  Dataset train;
  Dataset test;
};

// Materialize the configured train/test pair. Synthetic test data comes from
// an independently seeded draw; file-backed test data is the slice after the
// training slice (or the training set itself when test_limit = 0).
BenchData load_bench_data(const ExperimentConfig& config);

// Full-set evaluation, walked in chunks of `chunk` samples to bound peak
// memory. Results match the single-batch calls exactly.
double full_train_loss(const NetworkModel& model, const Dataset& data, size_t chunk);
double full_test_error(const NetworkModel& model, const Dataset& data, size_t chunk);

struct EpochRecord {
  int epoch = 0;              // 1-based
  double train_loss = 0.0;    // full training set, l2 term included
  double test_error = 0.0;    // mean square error on the test set
  double wall_seconds = 0.0;  // cumulative warm start + step time; evaluation excluded
  bool diverged = false;
  std::vector<double> dd_fraction;  // per layer, over this epoch's iterations
  std::vector<long> skip_count;     // per layer, over this epoch's iterations
};

struct RunResult {
  // Evaluated after the warm start, before the first step; NaN if the run
  // diverged before reaching that point.
  double initial_train_loss = std::numeric_limits<double>::quiet_NaN();
  double initial_test_error = std::numeric_limits<double>::quiet_NaN();
  std::vector<EpochRecord> records;
  bool diverged = false;
  std::string csv_path;
};

// CSV file name for one run: "<optimizer>_a<alpha>_d<damping>.csv" with %.9g
// numbers ("-" damping for sgdm). Requires a finalized config.
std::string run_csv_name(const ExperimentConfig& config);

// Warm start, then `epochs` sweeps of floor(n/m) optimizer steps each; after
// every epoch the full train loss and test error are evaluated with the clock
// paused and one CSV row is written and flushed. Divergence stops the run,
// records a row with the diverged flag set, and is reported in the result
// rather than thrown.
RunResult run_experiment(const ExperimentConfig& config);

struct GridCell {
  double alpha = 0.0;
  double damping = 0.0;  // ignored (and printed "-") for sgdm
  double min_train_loss = 0.0;
  int epoch_of_min = 0;  // 0 = the post-warm-start evaluation was the minimum
  bool diverged = false;
  bool best = false;
  std::string csv_path;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::string summary_csv_path;
  int best_index = -1;  // -1 if every cell diverged before producing a loss
};

// One experiment per (alpha, damping) pair (alpha list only for sgdm), each
// writing its own per-epoch CSV, plus a summary CSV with the best pair
// flagged. Cell divergence is recorded and the grid continues.
GridResult run_grid(const ExperimentConfig& config);

}  // namespace kqn
