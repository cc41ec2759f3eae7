#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "chanpred/channel.hpp"
#include "chanpred/harness.hpp"

namespace chanpred {

/// Invalid or malformed experiment configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One experiment: a task sequence (ordered scenarios) crossed with seeds
/// and regimens, trained with a shared TrainConfig template and evaluated
/// on held-out sets plus an SNR sweep.
struct ExperimentConfig {
  std::vector<ScenarioConfig> scenarios;  // the task sequence, in order
  TrainConfig train;                      // regimen/seed fields overridden per cell
  std::vector<Regimen> regimens = {Regimen::kNaive, Regimen::kEwc, Regimen::kSi};
  std::vector<double> snr_sweep = {0.0, 4.0, 8.0, 12.0, 16.0, 20.0};
  std::vector<std::uint64_t> seeds;
  std::string output;
  int n_train = 512;   // training samples per task
  int n_eval = 500;    // held-out samples per task
  int history = 8;     // frames per input window (T)

  void validate() const;  // throws ConfigError naming the offending field
};

/// Strict parse: unknown keys are rejected, scenario preset names expand to
/// full configs, and every error message carries the field path.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);

/// Canonical form: fixed key order, scenarios fully expanded. Parsing the
/// result reproduces the config exactly.
std::string serialize_config(const ExperimentConfig& cfg);

/// FNV-1a over the canonical serialization.
std::uint64_t config_hash(const ExperimentConfig& cfg);

struct RunOutcome {
  int exit_code = 0;                  // 0 ok, 2 when >= 1 cell diverged
  std::vector<std::string> diverged;  // run ids with their failure messages
};

/// Runs every (seed x regimen) cell and writes eval_matrix.csv,
/// snr_sweep.csv, memory.csv, summary.csv, channel_gains.csv, manifest.json
/// and per-task checkpoints under cfg.output. Cells are independent; jobs
/// > 1 runs them on worker threads with a deterministic merge order.
RunOutcome run_experiment(const ExperimentConfig& cfg, int jobs = 1);

/// Recomputes summary.csv purely from eval_matrix.csv and memory.csv in the
/// given directory (the same function run_experiment uses).
void summarize_results(const std::string& dir);

/// Shortest decimal form that parses back to the identical double.
std::string format_double(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

void write_csv(const std::string& path, const CsvTable& table);
CsvTable read_csv(const std::string& path);

}  // namespace chanpred
