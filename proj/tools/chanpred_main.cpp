#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "chanpred/channel.hpp"
#include "chanpred/experiment.hpp"
#include "chanpred/harness.hpp"
#include "chanpred/predictor.hpp"

namespace {

double parse_snr(const std::string& text) {
  if (text == "clean") return chanpred::kCleanSnrDb;
  std::size_t consumed = 0;
  const double value = std::stod(text, &consumed);
  if (consumed != text.size()) {
    throw chanpred::ConfigError("cannot parse SNR value: " + text);
  }
  return value;
}

std::vector<double> parse_snr_list(const std::string& text) {
  std::vector<double> values;
  std::size_t begin = 0;
  while (begin <= text.size()) {
    const std::size_t comma = text.find(',', begin);
    const std::string item =
        comma == std::string::npos ? text.substr(begin) : text.substr(begin, comma - begin);
    if (!item.empty()) values.push_back(parse_snr(item));
    if (comma == std::string::npos) break;
    begin = comma + 1;
  }
  if (values.empty()) throw chanpred::ConfigError("empty SNR list: " + text);
  return values;
}

int cmd_generate(const std::string& scenario_name, int samples, int history,
                 std::uint64_t seed, const std::string& snr_text, const std::string& out_path) {
  chanpred::ScenarioConfig scenario = chanpred::scenario_preset(scenario_name);
  scenario.snr_db_train = parse_snr(snr_text);
  const chanpred::TaskDataset dataset =
      chanpred::build_task_dataset(scenario, samples, history, seed);
  chanpred::save_dataset(dataset, out_path);
  std::cout << "wrote " << dataset.samples.size() << " samples (" << scenario.name << ", T="
            << history << ", seed=" << seed << ") to " << out_path << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, int jobs) {
  const chanpred::ExperimentConfig cfg = chanpred::parse_config(config_path);
  const chanpred::RunOutcome outcome = chanpred::run_experiment(cfg, jobs);
  for (const std::string& message : outcome.diverged) {
    std::cerr << "diverged: " << message << "\n";
  }
  std::cout << "results written to " << cfg.output << "\n";
  return outcome.exit_code;
}

int cmd_sweep(const std::string& checkpoint_path, const std::string& scenario_name,
              const std::string& snr_text, int n_eval, std::uint64_t seed,
              const std::string& regimen_label, const std::string& out_path) {
  const chanpred::Predictor predictor = chanpred::load_checkpoint(checkpoint_path);
  const chanpred::ScenarioConfig scenario = chanpred::scenario_preset(scenario_name);
  const std::vector<double> snr_list = parse_snr_list(snr_text);
  const auto curve =
      chanpred::evaluate_nmse_vs_snr(predictor, scenario, snr_list, n_eval, seed);

  const std::string backbone = chanpred::backbone_name(predictor.backbone());
  chanpred::CsvTable table;
  table.header = {"run_id", "seed", "regimen", "backbone", "scenario", "snr_db", "nmse",
                  "nmse_db"};
  const std::string run_id = regimen_label + "-" + backbone + "-s" + std::to_string(seed);
  for (const chanpred::SnrPoint& point : curve) {
    table.rows.push_back({run_id, std::to_string(seed), regimen_label, backbone, scenario.name,
                          chanpred::format_double(point.snr_db),
                          chanpred::format_double(point.nmse),
                          chanpred::format_double(point.nmse_db)});
  }
  chanpred::write_csv(out_path, table);
  std::cout << "wrote " << table.rows.size() << " sweep points to " << out_path << "\n";
  return 0;
}

int cmd_summarize(const std::string& dir) {
  chanpred::summarize_results(dir);
  std::cout << "rewrote " << dir << "/summary.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual-learning toolkit for wireless channel prediction"};
  app.require_subcommand(1);

  auto* generate = app.add_subcommand("generate", "generate a task dataset file");
  std::string gen_scenario;
  int gen_samples = 512;
  int gen_history = 8;
  std::uint64_t gen_seed = 1;
  std::string gen_snr = "clean";
  std::string gen_out;
  generate->add_option("--scenario", gen_scenario, "scenario preset name")->required();
  generate->add_option("--samples", gen_samples, "number of samples");
  generate->add_option("--history", gen_history, "history frames per sample (T)");
  generate->add_option("--seed", gen_seed, "generation seed");
  generate->add_option("--snr", gen_snr, "input SNR in dB, or \"clean\"");
  generate->add_option("--out", gen_out, "output dataset path")->required();

  auto* run = app.add_subcommand("run", "run a configured experiment");
  std::string run_config;
  int run_jobs = 1;
  run->add_option("--config", run_config, "experiment config path")->required();
  run->add_option("--jobs", run_jobs, "worker threads for independent cells");

  auto* sweep = app.add_subcommand("sweep", "NMSE-vs-SNR curve for a checkpoint");
  std::string sweep_checkpoint;
  std::string sweep_scenario;
  std::string sweep_snr = "0,4,8,12,16,20";
  int sweep_n_eval = 1000;
  std::uint64_t sweep_seed = 1;
  std::string sweep_regimen = "adhoc";
  std::string sweep_out;
  sweep->add_option("--checkpoint", sweep_checkpoint, "predictor checkpoint path")->required();
  sweep->add_option("--scenario", sweep_scenario, "scenario preset name")->required();
  sweep->add_option("--snr", sweep_snr, "comma-separated SNR list in dB (\"clean\" allowed)");
  sweep->add_option("--n-eval", sweep_n_eval, "held-out samples per point");
  sweep->add_option("--seed", sweep_seed, "evaluation seed");
  sweep->add_option("--regimen", sweep_regimen, "regimen label for the CSV");
  sweep->add_option("--out", sweep_out, "output CSV path")->required();

  auto* summarize = app.add_subcommand("summarize", "recompute summary.csv from raw results");
  std::string summarize_dir;
  summarize->add_option("--dir", summarize_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      return cmd_generate(gen_scenario, gen_samples, gen_history, gen_seed, gen_snr, gen_out);
    }
    if (run->parsed()) return cmd_run(run_config, run_jobs);
    if (sweep->parsed()) {
      return cmd_sweep(sweep_checkpoint, sweep_scenario, sweep_snr, sweep_n_eval, sweep_seed,
                       sweep_regimen, sweep_out);
    }
    if (summarize->parsed()) return cmd_summarize(summarize_dir);
  } catch (const chanpred::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
