#include "kqn/bench.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kqn/format.hpp"

namespace kqn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(unsigned(s[b]))) ++b;
  while (e > b && std::isspace(unsigned(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& value) {
  size_t consumed = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &consumed);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse number '" + value + "'");
  }
  if (consumed != value.size()) {
    throw ConfigError("config key '" + key + "': trailing junk in '" + value + "'");
  }
  return v;
}

long parse_int(const std::string& key, const std::string& value) {
  size_t consumed = 0;
  long v = 0;
  try {
    v = std::stol(value, &consumed);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse integer '" + value + "'");
  }
  if (consumed != value.size()) {
    throw ConfigError("config key '" + key + "': trailing junk in '" + value + "'");
  }
  return v;
}

size_t parse_count(const std::string& key, const std::string& value) {
  long v = parse_int(key, value);
  if (v < 0) {
    throw ConfigError("config key '" + key + "': must be >= 0, got " + value);
  }
  return size_t(v);
}

uint64_t parse_seed(const std::string& key, const std::string& value) {
  if (value.empty() || !std::all_of(value.begin(), value.end(), [](char c) {
        return std::isdigit(unsigned(c));
      })) {
    throw ConfigError("config key '" + key + "': seed must be a nonnegative integer, got '" +
                      value + "'");
  }
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': seed out of range: '" + value + "'");
  }
}

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= value.size()) {
    size_t comma = value.find(',', start);
    if (comma == std::string::npos) comma = value.size();
    const std::string field = trim(value.substr(start, comma - start));
    if (field.empty()) {
      throw ConfigError("config key '" + key + "': empty entry in list '" + value + "'");
    }
    out.push_back(parse_double(key, field));
    start = comma + 1;
    if (comma == value.size()) break;
  }
  return out;
}

void require_positive(const std::string& key, double v) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "': must be positive and finite, got " +
                      format_g9(v));
  }
}

double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DataBatch slice_batch(const Dataset& data, size_t start, size_t len) {
  DataBatch b;
  b.inputs.assign(data.inputs.begin() + start, data.inputs.begin() + start + len);
  b.targets.assign(data.targets.begin() + start, data.targets.begin() + start + len);
  return b;
}

OptimizerState make_optimizer_state(const ExperimentConfig& config,
                                    const NetworkModel& model) {
  switch (config.optimizer) {
    case OptimizerKind::kbfgs:
    case OptimizerKind::kbfgs_l:
    case OptimizerKind::kbfgs_l_skip: {
      KbfgsConfig k;
      k.alpha = config.alpha;
      k.damping = config.damping;
      k.ma_decay = config.beta;
      k.mu1 = config.mu1;
      k.use_lbfgs = config.optimizer != OptimizerKind::kbfgs;
      k.memory = config.memory;
      k.skip_variant = config.optimizer == OptimizerKind::kbfgs_l_skip;
      k.exact_a_inverse = config.optimizer == OptimizerKind::kbfgs_l_skip;
      k.double_grad = config.double_grad;
      return make_kbfgs_state(model, k);
    }
    case OptimizerKind::kfac: {
      KfacConfig f;
      f.alpha = config.alpha;
      f.damping = config.damping;
      f.ma_decay = config.beta;
      f.inverse_period = config.inverse_period;
      return make_kfac_state(model, f, config.seed);
    }
    case OptimizerKind::adam:
    case OptimizerKind::rmsprop:
    case OptimizerKind::sgdm: {
      FirstOrderConfig f;
      f.kind = config.optimizer;
      f.alpha = config.alpha;
      f.beta1 = config.beta;
      f.beta2 = config.beta;
      // Table-5 pairs are (alpha, epsilon) for adam/rmsprop, so the damping
      // slot doubles as epsilon there.
      if (config.optimizer != OptimizerKind::sgdm) f.epsilon = config.damping;
      return make_first_order_state(model, f);
    }
  }
  throw ConfigError("unknown optimizer kind");
}

void write_csv_header(std::ofstream& csv, int layers) {
  csv << "epoch,train_loss,test_error,wall_seconds,diverged";
  for (int l = 1; l <= layers; ++l) csv << ",dd_fraction_l" << l;
  for (int l = 1; l <= layers; ++l) csv << ",skip_count_l" << l;
  csv << "\n";
  csv.flush();
}

void write_csv_row(std::ofstream& csv, const EpochRecord& rec) {
  csv << rec.epoch << ',' << format_g9(rec.train_loss) << ',' << format_g9(rec.test_error)
      << ',' << format_g9(rec.wall_seconds) << ',' << (rec.diverged ? 1 : 0);
  for (double f : rec.dd_fraction) csv << ',' << format_g9(f);
  for (long s : rec.skip_count) csv << ',' << s;
  csv << "\n";
  csv.flush();
}

}  // namespace

ArchPreset arch_preset(const std::string& name) {
  const Activation R = Activation::relu;
  const Activation S = Activation::sigmoid;
  const Activation T = Activation::tanh;
  const Activation L = Activation::linear;
  if (name == "mnist-ae") {
    return {{784, 1000, 500, 250, 30, 250, 500, 1000, 784},
            {R, R, R, L, R, R, R, S},
            LossKind::binary_entropy};
  }
  if (name == "faces-ae") {
    return {{625, 2000, 1000, 500, 30, 500, 1000, 2000, 625},
            {R, R, R, L, R, R, R, L},
            LossKind::mse};
  }
  if (name == "curves-ae") {
    return {{784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784},
            {R, R, R, R, R, L, R, R, R, R, R, S},
            LossKind::binary_entropy};
  }
  if (name == "tiny-ae") {
    return {{16, 8, 4, 8, 16}, {T, T, T, L}, LossKind::mse};
  }
  throw ConfigError("unknown architecture preset '" + name + "'");
}

double default_alpha(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kbfgs:
    case OptimizerKind::kbfgs_l:
    case OptimizerKind::kbfgs_l_skip:
      return 0.3;
    case OptimizerKind::kfac:
      return 1.0;
    case OptimizerKind::adam:
    case OptimizerKind::rmsprop:
      return 1e-4;
    case OptimizerKind::sgdm:
      return 0.03;
  }
  return 0.0;
}

double default_damping(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kbfgs:
    case OptimizerKind::kbfgs_l:
    case OptimizerKind::kbfgs_l_skip:
      return 0.3;
    case OptimizerKind::kfac:
      return 3.0;
    case OptimizerKind::adam:
    case OptimizerKind::rmsprop:
      return 1e-4;  // epsilon
    case OptimizerKind::sgdm:
      return 0.0;  // unused
  }
  return 0.0;
}

void finalize_config(ExperimentConfig& config) {
  arch_preset(config.arch);  // validates the name

  if (config.alpha == 0.0) config.alpha = default_alpha(config.optimizer);
  require_positive("alpha", config.alpha);
  if (config.optimizer == OptimizerKind::sgdm) {
    config.damping = 0.0;
  } else {
    if (config.damping == 0.0) config.damping = default_damping(config.optimizer);
    require_positive("damping", config.damping);
  }

  if (!(config.beta >= 0.0 && config.beta < 1.0)) {
    throw ConfigError("config key 'beta': must lie in [0,1), got " + format_g9(config.beta));
  }
  if (!(config.mu1 > 0.0 && config.mu1 < 1.0)) {
    throw ConfigError("config key 'mu1': must lie in (0,1), got " + format_g9(config.mu1));
  }
  if (config.memory < 1) throw ConfigError("config key 'memory': must be >= 1");
  if (config.inverse_period < 1) {
    throw ConfigError("config key 'inverse_period': must be >= 1");
  }
  if (config.l2 < 0.0 || !std::isfinite(config.l2)) {
    throw ConfigError("config key 'l2': must be >= 0, got " + format_g9(config.l2));
  }
  if (config.epochs < 0) throw ConfigError("config key 'epochs': must be >= 0");
  if (config.batch_size < 1) throw ConfigError("config key 'batch_size': must be >= 1");

  if (config.dataset_kind == DatasetKind::synthetic) {
    if (config.synthetic_n < 1) throw ConfigError("config key 'dataset.n': must be >= 1");
    if (config.synthetic_dim < 1) throw ConfigError("config key 'dataset.dim': must be >= 1");
    if (config.synthetic_test_n < 0) {
      throw ConfigError("config key 'dataset.test_n': must be >= 0");
    }
  } else if (config.dataset_path.empty()) {
    throw ConfigError("config key 'dataset.path': required for file-backed datasets");
  }

  for (double a : config.grid_alpha) require_positive("grid.alpha", a);
  for (double d : config.grid_damping) require_positive("grid.damping", d);
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig config;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key or value in '" + line + "'");
    }

    if (key == "dataset.kind") {
      if (value == "synthetic") {
        config.dataset_kind = DatasetKind::synthetic;
      } else if (value == "idx") {
        config.dataset_kind = DatasetKind::idx;
      } else if (value == "csv") {
        config.dataset_kind = DatasetKind::csv;
      } else {
        throw ConfigError("config key 'dataset.kind': unknown kind '" + value + "'");
      }
    } else if (key == "dataset.synthetic") {
      if (value == "binary") {
        config.synthetic_kind = SyntheticKind::binary;
      } else if (value == "continuous") {
        config.synthetic_kind = SyntheticKind::continuous;
      } else {
        throw ConfigError("config key 'dataset.synthetic': unknown kind '" + value + "'");
      }
    } else if (key == "dataset.n") {
      config.synthetic_n = int(parse_int(key, value));
    } else if (key == "dataset.test_n") {
      config.synthetic_test_n = int(parse_int(key, value));
    } else if (key == "dataset.dim") {
      config.synthetic_dim = int(parse_int(key, value));
    } else if (key == "dataset.path") {
      config.dataset_path = value;
    } else if (key == "dataset.limit") {
      config.train_limit = parse_count(key, value);
    } else if (key == "dataset.test_limit") {
      config.test_limit = parse_count(key, value);
    } else if (key == "arch") {
      config.arch = value;
    } else if (key == "l2") {
      config.l2 = parse_double(key, value);
    } else if (key == "optimizer") {
      config.optimizer = optimizer_from_string(value);
    } else if (key == "alpha") {
      // 0 is the "use the shipped default" sentinel, so explicit values must
      // be strictly positive here rather than in finalize_config.
      config.alpha = parse_double(key, value);
      require_positive(key, config.alpha);
    } else if (key == "damping") {
      config.damping = parse_double(key, value);
      require_positive(key, config.damping);
    } else if (key == "beta") {
      config.beta = parse_double(key, value);
    } else if (key == "mu1") {
      config.mu1 = parse_double(key, value);
    } else if (key == "memory") {
      config.memory = int(parse_int(key, value));
    } else if (key == "inverse_period") {
      config.inverse_period = int(parse_int(key, value));
    } else if (key == "double_grad") {
      config.double_grad = parse_flag(key, value);
    } else if (key == "warm_start_batches") {
      config.warm_start_batches = parse_count(key, value);
    } else if (key == "epochs") {
      config.epochs = int(parse_int(key, value));
    } else if (key == "batch_size") {
      config.batch_size = parse_count(key, value);
    } else if (key == "seed") {
      config.seed = parse_seed(key, value);
    } else if (key == "out") {
      config.out_dir = value;
    } else if (key == "grid.alpha") {
      config.grid_alpha = parse_double_list(key, value);
    } else if (key == "grid.damping") {
      config.grid_damping = parse_double_list(key, value);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  finalize_config(config);
  return config;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("parse_config: cannot open '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

BenchData load_bench_data(const ExperimentConfig& config) {
  BenchData out;
  if (config.dataset_kind == DatasetKind::synthetic) {
    out.train = synthetic_autoencoder(config.seed, config.synthetic_n, config.synthetic_dim,
                                      config.synthetic_kind);
    const int test_n = config.synthetic_test_n > 0 ? config.synthetic_test_n
                                                   : std::max(1, config.synthetic_n / 5);
    out.test = synthetic_autoencoder(derive_seed(config.seed, 0x7E57), test_n,
                                     config.synthetic_dim, config.synthetic_kind);
    return out;
  }

  Dataset all = config.dataset_kind == DatasetKind::idx ? load_idx(config.dataset_path)
                                                        : load_csv(config.dataset_path);
  const size_t n_train =
      config.train_limit > 0 ? std::min(config.train_limit, all.size()) : all.size();
  out.train.inputs.assign(all.inputs.begin(), all.inputs.begin() + n_train);
  out.train.targets.assign(all.targets.begin(), all.targets.begin() + n_train);
  const size_t remaining = all.size() - n_train;
  const size_t n_test = std::min(config.test_limit, remaining);
  if (n_test > 0) {
    out.test.inputs.assign(all.inputs.begin() + n_train,
                           all.inputs.begin() + n_train + n_test);
    out.test.targets.assign(all.targets.begin() + n_train,
                            all.targets.begin() + n_train + n_test);
  } else {
    out.test = out.train;
  }
  return out;
}

double full_train_loss(const NetworkModel& model, const Dataset& data, size_t chunk) {
  const size_t n = data.size();
  if (n == 0) throw ConfigError("full_train_loss: empty dataset");
  if (chunk == 0) chunk = n;
  const double l2_term = 0.5 * model.l2_coeff * weight_norm_sq(model);
  double acc = 0.0;
  for (size_t start = 0; start < n; start += chunk) {
    const size_t len = std::min(chunk, n - start);
    acc += (loss_only(model, slice_batch(data, start, len)) - l2_term) * double(len);
  }
  return acc / double(n) + l2_term;
}

double full_test_error(const NetworkModel& model, const Dataset& data, size_t chunk) {
  const size_t n = data.size();
  if (n == 0) throw ConfigError("full_test_error: empty dataset");
  if (chunk == 0) chunk = n;
  double acc = 0.0;
  for (size_t start = 0; start < n; start += chunk) {
    const size_t len = std::min(chunk, n - start);
    acc += mean_square_test_error(model, slice_batch(data, start, len)) * double(len);
  }
  return acc / double(n);
}

std::string run_csv_name(const ExperimentConfig& config) {
  std::string name = to_string(config.optimizer);
  name += "_a" + format_g9(config.alpha);
  name += "_d";
  name += config.optimizer == OptimizerKind::sgdm ? "-" : format_g9(config.damping);
  return name + ".csv";
}

RunResult run_experiment(const ExperimentConfig& raw) {
  ExperimentConfig config = raw;
  finalize_config(config);

  const ArchPreset preset = arch_preset(config.arch);
  BenchData data = load_bench_data(config);
  if (data.train.dim() != preset.widths.front()) {
    throw ConfigError("dataset dimension " + std::to_string(data.train.dim()) +
                      " does not match preset '" + config.arch + "' input width " +
                      std::to_string(preset.widths.front()));
  }

  NetworkModel model = make_model(preset.widths, preset.activations, preset.loss, config.l2,
                                  derive_seed(config.seed, 0x10DE1));
  OptimizerState state = make_optimizer_state(config, model);
  BatchSampler sampler(data.train.size(), config.batch_size, config.seed);
  const int layers = model.num_layers();

  std::filesystem::create_directories(config.out_dir);
  RunResult result;
  result.csv_path = (std::filesystem::path(config.out_dir) / run_csv_name(config)).string();
  std::ofstream csv(result.csv_path, std::ios::binary);  // LF endings everywhere
  if (!csv) {
    throw FormatError("run_experiment: cannot open '" + result.csv_path + "' for writing");
  }
  write_csv_header(csv, layers);

  double wall = 0.0;
  bool diverged = false;

  {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      warm_start(state, model, data.train, config.batch_size, config.warm_start_batches);
      wall += elapsed_seconds(t0);
    } catch (const NumericalDivergenceError&) {
      wall += elapsed_seconds(t0);
      diverged = true;
    }
  }

  if (!diverged) {
    try {
      result.initial_train_loss = full_train_loss(model, data.train, config.batch_size);
      result.initial_test_error = full_test_error(model, data.test, config.batch_size);
    } catch (const NumericalDivergenceError&) {
      diverged = true;
    }
  }
  if (diverged) {
    // Divergence before the first step: a single flagged row marks the run.
    EpochRecord rec;
    rec.epoch = 0;
    rec.train_loss = kNaN;
    rec.test_error = kNaN;
    rec.wall_seconds = wall;
    rec.diverged = true;
    rec.dd_fraction.assign(layers, 1.0);
    rec.skip_count.assign(layers, 0);
    write_csv_row(csv, rec);
    result.records.push_back(std::move(rec));
    result.diverged = true;
    return result;
  }

  const size_t batches_per_epoch = sampler.batches_per_epoch();
  for (int epoch = 1; epoch <= config.epochs && !diverged; ++epoch) {
    std::vector<long> dd_count(layers, 0);
    std::vector<long> skip_count(layers, 0);
    size_t steps_done = 0;
    for (size_t it = 0; it < batches_per_epoch; ++it) {
      DataBatch batch = sampler.next_batch(data.train);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        StepMetrics metrics = optimizer_step(state, model, batch);
        wall += elapsed_seconds(t0);
        for (int l = 0; l < layers; ++l) {
          dd_count[l] += metrics.layers[l].dd_satisfied ? 1 : 0;
          skip_count[l] += metrics.layers[l].skipped ? 1 : 0;
        }
        ++steps_done;
      } catch (const NumericalDivergenceError&) {
        wall += elapsed_seconds(t0);
        diverged = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.wall_seconds = wall;
    rec.skip_count = skip_count;
    rec.dd_fraction.resize(layers);
    for (int l = 0; l < layers; ++l) {
      rec.dd_fraction[l] = steps_done > 0 ? double(dd_count[l]) / double(steps_done) : 1.0;
    }
    if (!diverged) {
      try {
        rec.train_loss = full_train_loss(model, data.train, config.batch_size);
        rec.test_error = full_test_error(model, data.test, config.batch_size);
      } catch (const NumericalDivergenceError&) {
        diverged = true;
      }
    }
    if (diverged) {
      rec.train_loss = kNaN;
      rec.test_error = kNaN;
      rec.diverged = true;
    }
    write_csv_row(csv, rec);
    result.records.push_back(std::move(rec));
  }

  result.diverged = diverged;
  return result;
}

GridResult run_grid(const ExperimentConfig& raw) {
  ExperimentConfig base = raw;
  finalize_config(base);

  const std::vector<double> alphas =
      base.grid_alpha.empty() ? std::vector<double>{base.alpha} : base.grid_alpha;
  std::vector<double> dampings;
  if (base.optimizer == OptimizerKind::sgdm) {
    dampings = {0.0};
  } else if (base.grid_damping.empty()) {
    dampings = {base.damping};
  } else {
    dampings = base.grid_damping;
  }

  GridResult out;
  for (double alpha : alphas) {
    for (double damping : dampings) {
      ExperimentConfig cell_config = base;
      cell_config.alpha = alpha;
      cell_config.damping = damping;
      cell_config.grid_alpha.clear();
      cell_config.grid_damping.clear();
      RunResult run = run_experiment(cell_config);

      GridCell cell;
      cell.alpha = alpha;
      cell.damping = damping;
      cell.diverged = run.diverged;
      cell.csv_path = run.csv_path;
      cell.min_train_loss = kNaN;
      cell.epoch_of_min = -1;
      if (std::isfinite(run.initial_train_loss)) {
        cell.min_train_loss = run.initial_train_loss;
        cell.epoch_of_min = 0;
      }
      for (const EpochRecord& rec : run.records) {
        if (std::isfinite(rec.train_loss) &&
            (!std::isfinite(cell.min_train_loss) || rec.train_loss < cell.min_train_loss)) {
          cell.min_train_loss = rec.train_loss;
          cell.epoch_of_min = rec.epoch;
        }
      }
      out.cells.push_back(std::move(cell));
    }
  }

  for (size_t i = 0; i < out.cells.size(); ++i) {
    if (!std::isfinite(out.cells[i].min_train_loss)) continue;
    if (out.best_index < 0 ||
        out.cells[i].min_train_loss < out.cells[out.best_index].min_train_loss) {
      out.best_index = int(i);
    }
  }
  if (out.best_index >= 0) out.cells[out.best_index].best = true;

  std::filesystem::create_directories(base.out_dir);
  out.summary_csv_path =
      (std::filesystem::path(base.out_dir) / "grid_summary.csv").string();
  std::ofstream csv(out.summary_csv_path, std::ios::binary);
  if (!csv) {
    throw FormatError("run_grid: cannot open '" + out.summary_csv_path + "' for writing");
  }
  csv << "alpha,damping,min_train_loss,epoch_of_min,diverged,best\n";
  for (const GridCell& cell : out.cells) {
    csv << format_g9(cell.alpha) << ',';
    if (base.optimizer == OptimizerKind::sgdm) {
      csv << '-';
    } else {
      csv << format_g9(cell.damping);
    }
    csv << ',' << format_g9(cell.min_train_loss) << ',' << cell.epoch_of_min << ','
        << (cell.diverged ? 1 : 0) << ',' << (cell.best ? 1 : 0) << "\n";
  }
  csv.flush();
  return out;
}

}  // namespace kqn
