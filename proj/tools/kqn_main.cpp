#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kqn/bench.hpp"
#include "kqn/format.hpp"
#include "kqn/verify.hpp"

namespace {

struct Overrides {
  std::string config_path;
  uint64_t seed = 0;
  std::string out_dir;
  int epochs = 0;
  std::vector<uint64_t> seeds;  // run only: one experiment per seed
};

void add_common_options(CLI::App* cmd, Overrides& ov, bool with_seed_list) {
  cmd->add_option("--config", ov.config_path, "experiment config file (key = value)")
      ->required();
  cmd->add_option("--seed", ov.seed, "override the config seed");
  cmd->add_option("--out", ov.out_dir, "override the output directory");
  cmd->add_option("--epochs", ov.epochs, "override the epoch count");
  if (with_seed_list) {
    cmd->add_option("--seeds", ov.seeds,
                    "run once per seed, each into <out>/seed-<s>/ (shaded-band protocol)")
        ->delimiter(',');
  }
}

kqn::ExperimentConfig load_config(const CLI::App* cmd, const Overrides& ov) {
  kqn::ExperimentConfig config = kqn::parse_config(ov.config_path);
  if (cmd->count("--seed") > 0) config.seed = ov.seed;
  if (cmd->count("--out") > 0) config.out_dir = ov.out_dir;
  if (cmd->count("--epochs") > 0) {
    if (ov.epochs < 0) throw kqn::ConfigError("--epochs must be >= 0");
    config.epochs = ov.epochs;
  }
  return config;
}

int report_run(const kqn::RunResult& result) {
  if (result.diverged) {
    std::printf("DIVERGED after %zu recorded epochs; partial metrics in %s\n",
                result.records.size(), result.csv_path.c_str());
    return 2;
  }
  const double final_loss =
      result.records.empty() ? result.initial_train_loss : result.records.back().train_loss;
  const double final_err =
      result.records.empty() ? result.initial_test_error : result.records.back().test_error;
  std::printf("wrote %s  epochs=%zu  train_loss %s -> %s  test_error %s\n",
              result.csv_path.c_str(), result.records.size(),
              kqn::format_g9(result.initial_train_loss).c_str(),
              kqn::format_g9(final_loss).c_str(), kqn::format_g9(final_err).c_str());
  return 0;
}

int cmd_run(const CLI::App* cmd, const Overrides& ov) {
  kqn::ExperimentConfig config = load_config(cmd, ov);
  if (ov.seeds.empty()) {
    return report_run(kqn::run_experiment(config));
  }
  int rc = 0;
  for (uint64_t s : ov.seeds) {
    kqn::ExperimentConfig per_seed = config;
    per_seed.seed = s;
    per_seed.out_dir =
        (std::filesystem::path(config.out_dir) / ("seed-" + std::to_string(s))).string();
    std::printf("seed %llu: ", static_cast<unsigned long long>(s));
    rc = std::max(rc, report_run(kqn::run_experiment(per_seed)));
  }
  return rc;
}

int cmd_grid(const CLI::App* cmd, const Overrides& ov) {
  kqn::ExperimentConfig config = load_config(cmd, ov);
  kqn::GridResult grid = kqn::run_grid(config);
  for (const kqn::GridCell& cell : grid.cells) {
    std::printf("alpha %s  damping %s  min_loss %s  at epoch %d%s%s\n",
                kqn::format_g9(cell.alpha).c_str(),
                config.optimizer == kqn::OptimizerKind::sgdm
                    ? "-"
                    : kqn::format_g9(cell.damping).c_str(),
                kqn::format_g9(cell.min_train_loss).c_str(), cell.epoch_of_min,
                cell.diverged ? "  DIVERGED" : "", cell.best ? "  <- best" : "");
  }
  std::printf("summary: %s\n", grid.summary_csv_path.c_str());
  if (grid.best_index < 0) {
    std::printf("every grid cell diverged\n");
    return 2;
  }
  return 0;
}

int cmd_verify(uint64_t seed, const std::string& out_dir) {
  std::vector<kqn::SuiteReport> reports = kqn::run_all_suites(seed);
  bool all_ok = true;
  for (const kqn::SuiteReport& report : reports) {
    const bool ok = report.all_passed();
    all_ok = all_ok && ok;
    double worst = 0.0;
    for (const kqn::SuiteCheck& check : report.checks) {
      worst = std::max(worst, std::fabs(check.worst));
    }
    std::printf("%-22s %s  (%zu checks, worst %s)\n", report.suite.c_str(),
                ok ? "PASS" : "FAIL", report.checks.size(), kqn::format_g9(worst).c_str());
    if (!ok) {
      for (const kqn::SuiteCheck& check : report.checks) {
        if (!check.passed) {
          std::printf("  failed: %s  worst %s  %s\n", check.name.c_str(),
                      kqn::format_g9(check.worst).c_str(), check.detail.c_str());
        }
      }
    }
  }
  std::filesystem::create_directories(out_dir);
  const std::string csv_path =
      (std::filesystem::path(out_dir) / "verify_report.csv").string();
  kqn::write_suite_csv(reports, csv_path);
  std::printf("report: %s\n", csv_path.c_str());
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kronecker-factored quasi-Newton optimization benchmarks"};
  app.require_subcommand(1);

  Overrides run_ov, grid_ov;
  CLI::App* run_cmd = app.add_subcommand("run", "train once and log per-epoch metrics");
  add_common_options(run_cmd, run_ov, true);
  CLI::App* grid_cmd =
      app.add_subcommand("grid", "grid-search (alpha, damping) and summarize");
  add_common_options(grid_cmd, grid_ov, false);

  uint64_t verify_seed = 0;
  std::string verify_out = ".";
  CLI::App* verify_cmd =
      app.add_subcommand("verify", "run the oracle suites and write a pass/fail CSV");
  verify_cmd->add_option("--seed", verify_seed, "suite RNG seed");
  verify_cmd->add_option("--out", verify_out, "directory for verify_report.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) return cmd_run(run_cmd, run_ov);
    if (grid_cmd->parsed()) return cmd_grid(grid_cmd, grid_ov);
    if (verify_cmd->parsed()) return cmd_verify(verify_seed, verify_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
