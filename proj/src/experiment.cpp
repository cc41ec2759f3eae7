#include "chanpred/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <system_error>
#include <thread>
#include <utility>

#include "chanpred/rng.hpp"
#include "container_io.hpp"

namespace chanpred {

namespace {

using detail::json;

constexpr std::uint64_t kTrainDataSalt = 0x7a11;
constexpr std::uint64_t kEvalDataSalt = 0xe0a1;
constexpr std::uint64_t kSweepSalt = 0x51ee;
constexpr std::uint64_t kGainsBaseSeed = 0xc4a15eedULL;
constexpr int kGainSamples = 10000;

double parse_double_field(const std::string& text, const std::string& what) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto result = std::from_chars(begin, end, value);
  if (result.ec != std::errc() || result.ptr != end) {
    throw std::runtime_error(what + ": cannot parse number from \"" + text + "\"");
  }
  return value;
}

int parse_int_field(const std::string& text, const std::string& what) {
  int value = 0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto result = std::from_chars(begin, end, value);
  if (result.ec != std::errc() || result.ptr != end) {
    throw std::runtime_error(what + ": cannot parse integer from \"" + text + "\"");
  }
  return value;
}

double snr_from_config(const json& j, const std::string& path) {
  if (j.is_string()) {
    if (j.get<std::string>() == "clean") return kCleanSnrDb;
    throw ConfigError(path + ": expected a number or \"clean\", got \"" +
                      j.get<std::string>() + "\"");
  }
  if (!j.is_number()) throw ConfigError(path + ": expected a number or \"clean\"");
  return j.get<double>();
}

json snr_to_config(double snr_db) {
  if (is_clean_snr(snr_db)) return "clean";
  return snr_db;
}

double number_field(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

int int_field(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
  return j.get<int>();
}

bool bool_field(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
  return j.get<bool>();
}

std::string string_field(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  return j.get<std::string>();
}

ScenarioConfig scenario_from_config(const json& j, const std::string& path) {
  if (j.is_string()) {
    try {
      return scenario_preset(j.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  if (!j.is_object()) throw ConfigError(path + ": expected a preset name or an object");

  ScenarioConfig cfg;
  if (j.contains("preset")) {
    try {
      cfg = scenario_preset(string_field(j.at("preset"), path + ".preset"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path + ".preset: " + e.what());
    }
  }
  for (const auto& [key, value] : j.items()) {
    const std::string field = path + "." + key;
    if (key == "preset") {
      continue;
    } else if (key == "name") {
      cfg.name = string_field(value, field);
    } else if (key == "doppler_hz") {
      cfg.doppler_hz = number_field(value, field);
    } else if (key == "sample_interval_s") {
      cfg.sample_interval_s = number_field(value, field);
    } else if (key == "n_paths") {
      cfg.n_paths = int_field(value, field);
    } else if (key == "n_tx") {
      cfg.n_tx = int_field(value, field);
    } else if (key == "n_rx") {
      cfg.n_rx = int_field(value, field);
    } else if (key == "spatial_corr") {
      cfg.spatial_corr = number_field(value, field);
    } else if (key == "path_gain_spread_db") {
      cfg.path_gain_spread_db = number_field(value, field);
    } else if (key == "snr_db_train") {
      cfg.snr_db_train = snr_from_config(value, field);
    } else {
      throw ConfigError(field + ": unknown key");
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return cfg;
}

json scenario_to_config(const ScenarioConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["doppler_hz"] = cfg.doppler_hz;
  j["sample_interval_s"] = cfg.sample_interval_s;
  j["n_paths"] = cfg.n_paths;
  j["n_tx"] = cfg.n_tx;
  j["n_rx"] = cfg.n_rx;
  j["spatial_corr"] = cfg.spatial_corr;
  j["path_gain_spread_db"] = cfg.path_gain_spread_db;
  j["snr_db_train"] = snr_to_config(cfg.snr_db_train);
  return j;
}

std::string scenario_sequence_label(const std::vector<ScenarioConfig>& scenarios) {
  std::string label;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (i > 0) label += '>';
    label += scenarios[i].name;
  }
  return label;
}

double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values.front();
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (scenarios.empty()) throw ConfigError("scenarios must contain at least one task");
  if (regimens.empty()) throw ConfigError("regimens must contain at least one entry");
  if (seeds.empty()) throw ConfigError("seeds must contain at least one entry");
  if (output.empty()) throw ConfigError("output must name a directory");
  if (n_train < 1) throw ConfigError("n_train must be >= 1");
  if (n_eval < 1) throw ConfigError("n_eval must be >= 1");
  if (history < 1) throw ConfigError("history must be >= 1");
  if (!snr_sweep.empty() && n_eval < 100) {
    throw ConfigError("n_eval must be >= 100 when snr_sweep is nonempty");
  }
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    try {
      scenarios[i].validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("scenarios[" + std::to_string(i) + "]: " + e.what());
    }
  }
  const int width = 2 * scenarios.front().n_tx * scenarios.front().n_rx;
  for (std::size_t i = 1; i < scenarios.size(); ++i) {
    if (2 * scenarios[i].n_tx * scenarios[i].n_rx != width) {
      throw ConfigError("scenarios[" + std::to_string(i) +
                        "]: antenna counts must match across the task sequence");
    }
  }
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (!root.is_object()) throw ConfigError(origin + ": top-level value must be an object");

  ExperimentConfig cfg;
  bool saw_regimens = false;
  bool saw_snr_sweep = false;
  bool train_snr_override = false;

  for (const auto& [key, value] : root.items()) {
    if (key == "scenarios") {
      if (!value.is_array() || value.empty()) {
        throw ConfigError("scenarios: expected a nonempty array");
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        cfg.scenarios.push_back(
            scenario_from_config(value[i], "scenarios[" + std::to_string(i) + "]"));
      }
    } else if (key == "train") {
      if (!value.is_object()) throw ConfigError("train: expected an object");
      for (const auto& [tkey, tvalue] : value.items()) {
        const std::string field = "train." + tkey;
        if (tkey == "backbone") {
          try {
            cfg.train.backbone = backbone_from_name(string_field(tvalue, field));
          } catch (const std::invalid_argument& e) {
            throw ConfigError(field + ": " + e.what());
          }
        } else if (tkey == "hidden") {
          cfg.train.hidden = int_field(tvalue, field);
        } else if (tkey == "epochs") {
          cfg.train.epochs = int_field(tvalue, field);
        } else if (tkey == "batch") {
          cfg.train.batch = int_field(tvalue, field);
        } else if (tkey == "eta") {
          cfg.train.eta = number_field(tvalue, field);
        } else if (tkey == "alpha") {
          cfg.train.alpha = number_field(tvalue, field);
        } else if (tkey == "beta") {
          cfg.train.beta = number_field(tvalue, field);
        } else if (tkey == "xi") {
          cfg.train.xi = number_field(tvalue, field);
        } else if (tkey == "snr_db_train") {
          cfg.train.snr_db_train = snr_from_config(tvalue, field);
          train_snr_override = true;
        } else if (tkey == "consolidate_ewc") {
          cfg.train.consolidate_ewc = bool_field(tvalue, field);
        } else {
          throw ConfigError(field + ": unknown key");
        }
      }
    } else if (key == "regimens") {
      if (!value.is_array() || value.empty()) {
        throw ConfigError("regimens: expected a nonempty array");
      }
      cfg.regimens.clear();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::string field = "regimens[" + std::to_string(i) + "]";
        try {
          cfg.regimens.push_back(regimen_from_name(string_field(value[i], field)));
        } catch (const std::invalid_argument& e) {
          throw ConfigError(field + ": " + e.what());
        }
      }
      saw_regimens = true;
    } else if (key == "snr_sweep") {
      if (!value.is_array()) throw ConfigError("snr_sweep: expected an array");
      cfg.snr_sweep.clear();
      for (std::size_t i = 0; i < value.size(); ++i) {
        cfg.snr_sweep.push_back(
            snr_from_config(value[i], "snr_sweep[" + std::to_string(i) + "]"));
      }
      saw_snr_sweep = true;
    } else if (key == "seeds") {
      if (!value.is_array() || value.empty()) {
        throw ConfigError("seeds: expected a nonempty array");
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::string field = "seeds[" + std::to_string(i) + "]";
        if (!value[i].is_number_integer() ||
            (value[i].is_number_integer() && !value[i].is_number_unsigned() &&
             value[i].get<std::int64_t>() < 0)) {
          throw ConfigError(field + ": expected a nonnegative integer");
        }
        cfg.seeds.push_back(value[i].get<std::uint64_t>());
      }
    } else if (key == "output") {
      cfg.output = string_field(value, "output");
    } else if (key == "n_train") {
      cfg.n_train = int_field(value, "n_train");
    } else if (key == "n_eval") {
      cfg.n_eval = int_field(value, "n_eval");
    } else if (key == "history") {
      cfg.history = int_field(value, "history");
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  (void)saw_regimens;
  (void)saw_snr_sweep;

  for (std::size_t i = 0; i < cfg.regimens.size(); ++i) {
    for (std::size_t j = i + 1; j < cfg.regimens.size(); ++j) {
      if (cfg.regimens[i] == cfg.regimens[j]) {
        throw ConfigError("regimens[" + std::to_string(j) + "]: duplicate entry");
      }
    }
  }
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    for (std::size_t j = i + 1; j < cfg.seeds.size(); ++j) {
      if (cfg.seeds[i] == cfg.seeds[j]) {
        throw ConfigError("seeds[" + std::to_string(j) + "]: duplicate entry");
      }
    }
  }
  if (train_snr_override) {
    for (auto& scenario : cfg.scenarios) scenario.snr_db_train = cfg.train.snr_db_train;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, path);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  json root;
  root["scenarios"] = json::array();
  for (const auto& scenario : cfg.scenarios) {
    root["scenarios"].push_back(scenario_to_config(scenario));
  }
  json train;
  train["backbone"] = backbone_name(cfg.train.backbone);
  train["hidden"] = cfg.train.hidden;
  train["epochs"] = cfg.train.epochs;
  train["batch"] = cfg.train.batch;
  train["eta"] = cfg.train.eta;
  train["alpha"] = cfg.train.alpha;
  train["beta"] = cfg.train.beta;
  train["xi"] = cfg.train.xi;
  if (!is_clean_snr(cfg.train.snr_db_train)) {
    train["snr_db_train"] = cfg.train.snr_db_train;
  }
  train["consolidate_ewc"] = cfg.train.consolidate_ewc;
  root["train"] = std::move(train);
  root["regimens"] = json::array();
  for (Regimen r : cfg.regimens) root["regimens"].push_back(regimen_name(r));
  root["snr_sweep"] = json::array();
  for (double snr : cfg.snr_sweep) root["snr_sweep"].push_back(snr_to_config(snr));
  root["seeds"] = cfg.seeds;
  root["output"] = cfg.output;
  root["n_train"] = cfg.n_train;
  root["n_eval"] = cfg.n_eval;
  root["history"] = cfg.history;
  return root.dump(2) + "\n";
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string text = serialize_config(cfg);
  std::uint64_t hash = 14695981039346656037ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ULL;
  }
  return hash;
}

std::string format_double(double value) {
  char buf[40];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

void write_csv(const std::string& path, const CsvTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i > 0) out << ',';
    out << table.header[i];
  }
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) out << ',';
      out << row[i];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t begin = 0;
    while (true) {
      const std::size_t comma = line.find(',', begin);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(begin));
        break;
      }
      fields.push_back(line.substr(begin, comma - begin));
      begin = comma + 1;
    }
    if (first) {
      table.header = std::move(fields);
      first = false;
    } else {
      table.rows.push_back(std::move(fields));
    }
  }
  if (first) throw std::runtime_error("empty CSV file: " + path);
  return table;
}

namespace {

struct CellSpec {
  std::uint64_t seed = 0;
  Regimen regimen = Regimen::kNaive;
  std::string run_id;
};

struct CellOutput {
  bool diverged = false;
  std::string message;
  std::vector<std::vector<std::string>> eval_rows;
  std::vector<std::vector<std::string>> sweep_rows;
  std::vector<std::vector<std::string>> memory_rows;
};

CellOutput run_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                    const std::string& scenario_seq) {
  TrainConfig tc = cfg.train;
  tc.regimen = cell.regimen;
  tc.seed = cell.seed;

  std::vector<TaskDataset> train_tasks;
  std::vector<TaskDataset> eval_tasks;
  for (std::size_t i = 0; i < cfg.scenarios.size(); ++i) {
    train_tasks.push_back(build_task_dataset(
        cfg.scenarios[i], cfg.n_train, cfg.history,
        Rng::derive(cell.seed, {kTrainDataSalt, static_cast<std::uint64_t>(i)})));
    eval_tasks.push_back(build_task_dataset(
        cfg.scenarios[i], cfg.n_eval, cfg.history,
        Rng::derive(cell.seed, {kEvalDataSalt, static_cast<std::uint64_t>(i)})));
  }

  CellOutput out;
  const std::string seed_text = std::to_string(cell.seed);
  const std::string regimen_text = regimen_name(cell.regimen);
  const std::string backbone_text = backbone_name(tc.backbone);
  try {
    const TaskBoundaryHook hook = [&](int task_index, const Predictor& p,
                                      const RegimenState& state) {
      const std::string base =
          cfg.output + "/checkpoints/" + cell.run_id + "-task" + std::to_string(task_index + 1);
      save_checkpoint(p, base + ".ckpt");
      if (state.regimen == Regimen::kEwc) {
        save_ewc_bank(state.bank, base + ".ewc");
      } else if (state.regimen == Regimen::kSi) {
        save_si_state(state.si, base + ".si");
      }
    };
    const SequenceResult result = run_sequence(train_tasks, eval_tasks, tc, hook);

    const int k = result.matrix.task_count();
    for (int after = 0; after < k; ++after) {
      for (int task = 0; task <= after; ++task) {
        out.eval_rows.push_back({cell.run_id, seed_text, regimen_text, backbone_text,
                                 scenario_seq, std::to_string(task + 1),
                                 std::to_string(after + 1),
                                 format_double(result.matrix.nmse(task, after)),
                                 format_double(result.matrix.nmse_db(task, after))});
      }
    }

    for (std::size_t s = 0; s < cfg.scenarios.size() && !cfg.snr_sweep.empty(); ++s) {
      const auto curve = evaluate_nmse_vs_snr(
          result.predictor, cfg.scenarios[s], cfg.snr_sweep, cfg.n_eval,
          Rng::derive(cell.seed, {kSweepSalt, static_cast<std::uint64_t>(s)}));
      for (const SnrPoint& point : curve) {
        out.sweep_rows.push_back({cell.run_id, seed_text, regimen_text, backbone_text,
                                  cfg.scenarios[s].name, format_double(point.snr_db),
                                  format_double(point.nmse), format_double(point.nmse_db)});
      }
    }

    const MemoryAccounting mem =
        memory_accounting(result.state, result.predictor.param_count());
    out.memory_rows.push_back({cell.run_id, seed_text, regimen_text, backbone_text,
                               std::to_string(mem.model_floats),
                               std::to_string(mem.regimen_extra_floats),
                               std::to_string(mem.fisher_transient_floats)});
  } catch (const DivergenceError& e) {
    out.diverged = true;
    out.message = e.what();
    out.eval_rows.clear();
    out.sweep_rows.clear();
    out.memory_rows.clear();
  }
  return out;
}

}  // namespace

RunOutcome run_experiment(const ExperimentConfig& cfg, int jobs) {
  cfg.validate();
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(cfg.output) / "checkpoints", ec);
  if (ec) throw ConfigError("output: cannot create directory " + cfg.output + ": " + ec.message());

  std::vector<CellSpec> cells;
  for (std::uint64_t seed : cfg.seeds) {
    for (Regimen regimen : cfg.regimens) {
      CellSpec spec;
      spec.seed = seed;
      spec.regimen = regimen;
      spec.run_id = regimen_name(regimen) + "-" + backbone_name(cfg.train.backbone) + "-s" +
                    std::to_string(seed);
      cells.push_back(std::move(spec));
    }
  }
  const std::string scenario_seq = scenario_sequence_label(cfg.scenarios);

  std::vector<CellOutput> outputs(cells.size());
  std::vector<std::exception_ptr> failures(cells.size());
  const auto work = [&](std::size_t i) {
    try {
      outputs[i] = run_cell(cfg, cells[i], scenario_seq);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  if (jobs <= 1 || cells.size() <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) work(i);
    };
    std::vector<std::thread> pool;
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), cells.size());
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& thread : pool) thread.join();
  }
  for (const auto& failure : failures) {
    if (failure) std::rethrow_exception(failure);
  }

  CsvTable eval_table;
  eval_table.header = {"run_id", "seed",       "regimen", "backbone", "scenario_seq",
                       "eval_task", "after_task", "nmse",    "nmse_db"};
  CsvTable sweep_table;
  sweep_table.header = {"run_id", "seed", "regimen", "backbone",
                        "scenario", "snr_db", "nmse", "nmse_db"};
  CsvTable memory_table;
  memory_table.header = {"run_id", "seed", "regimen", "backbone",
                         "model_floats", "regimen_extra_floats", "fisher_transient_floats"};
  RunOutcome outcome;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (outputs[i].diverged) {
      outcome.diverged.push_back(cells[i].run_id + ": " + outputs[i].message);
      continue;
    }
    for (auto& row : outputs[i].eval_rows) eval_table.rows.push_back(std::move(row));
    for (auto& row : outputs[i].sweep_rows) sweep_table.rows.push_back(std::move(row));
    for (auto& row : outputs[i].memory_rows) memory_table.rows.push_back(std::move(row));
  }
  write_csv(cfg.output + "/eval_matrix.csv", eval_table);
  write_csv(cfg.output + "/snr_sweep.csv", sweep_table);
  write_csv(cfg.output + "/memory.csv", memory_table);

  CsvTable gains_table;
  gains_table.header = {"scenario", "sample_index", "gain"};
  for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
    const auto gains = sample_channel_gains(
        cfg.scenarios[s], kGainSamples,
        Rng::derive(kGainsBaseSeed, {static_cast<std::uint64_t>(s)}));
    for (std::size_t i = 0; i < gains.size(); ++i) {
      gains_table.rows.push_back(
          {cfg.scenarios[s].name, std::to_string(i), format_double(gains[i])});
    }
  }
  write_csv(cfg.output + "/channel_gains.csv", gains_table);

  summarize_results(cfg.output);

  outcome.exit_code = outcome.diverged.empty() ? 0 : 2;

  json manifest;
  manifest["format"] = "chanpred-manifest";
  manifest["version"] = 1;
  {
    char hex[17];
    const std::uint64_t hash = config_hash(cfg);
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
    manifest["config_hash"] = std::string("fnv1a64-") + hex;
  }
  manifest["exit_code"] = outcome.exit_code;
  manifest["outputs"] = {"eval_matrix.csv", "snr_sweep.csv", "memory.csv",
                         "summary.csv",     "channel_gains.csv"};
  manifest["cells"] = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    json entry;
    entry["run_id"] = cells[i].run_id;
    entry["status"] = outputs[i].diverged ? "diverged" : "ok";
    if (outputs[i].diverged) entry["message"] = outputs[i].message;
    manifest["cells"].push_back(std::move(entry));
  }
  manifest["config"] = json::parse(serialize_config(cfg));
  std::ofstream manifest_out(cfg.output + "/manifest.json", std::ios::binary | std::ios::trunc);
  if (!manifest_out) throw std::runtime_error("cannot write manifest in " + cfg.output);
  manifest_out << manifest.dump(2) << '\n';

  return outcome;
}

void summarize_results(const std::string& dir) {
  const CsvTable eval_table = read_csv(dir + "/eval_matrix.csv");
  const CsvTable memory_table = read_csv(dir + "/memory.csv");
  const std::vector<std::string> expected_eval = {"run_id", "seed",       "regimen",
                                                  "backbone", "scenario_seq", "eval_task",
                                                  "after_task", "nmse",     "nmse_db"};
  if (eval_table.header != expected_eval) {
    throw std::runtime_error("unexpected eval_matrix.csv header in " + dir);
  }

  struct RunAgg {
    std::string regimen;
    std::string backbone;
    int tasks = 0;
    std::map<std::pair<int, int>, double> nmse;
    double mem_extra = 0.0;
  };
  std::vector<std::string> run_order;
  std::map<std::string, RunAgg> runs;
  for (const auto& row : eval_table.rows) {
    if (row.size() != expected_eval.size()) {
      throw std::runtime_error("malformed eval_matrix.csv row in " + dir);
    }
    const std::string& run_id = row[0];
    auto [it, inserted] = runs.try_emplace(run_id);
    if (inserted) {
      run_order.push_back(run_id);
      it->second.regimen = row[2];
      it->second.backbone = row[3];
    }
    const int task = parse_int_field(row[5], "eval_matrix.csv eval_task");
    const int after = parse_int_field(row[6], "eval_matrix.csv after_task");
    it->second.tasks = std::max(it->second.tasks, after);
    it->second.nmse[{task - 1, after - 1}] = parse_double_field(row[7], "eval_matrix.csv nmse");
  }
  for (const auto& row : memory_table.rows) {
    if (row.size() != 7) throw std::runtime_error("malformed memory.csv row in " + dir);
    const auto it = runs.find(row[0]);
    if (it != runs.end()) {
      it->second.mem_extra = parse_double_field(row[5], "memory.csv regimen_extra_floats");
    }
  }

  struct GroupAgg {
    std::vector<double> forgetting_abs;
    std::vector<double> forgetting_rel;
    std::vector<double> final_nmse_db;
    std::vector<double> mem_floats_extra;
  };
  std::vector<std::pair<std::string, std::string>> group_order;
  std::map<std::pair<std::string, std::string>, GroupAgg> groups;
  for (const std::string& run_id : run_order) {
    const RunAgg& run = runs.at(run_id);
    EvalMatrix matrix(run.tasks);
    for (const auto& [jk, value] : run.nmse) matrix.set(jk.first, jk.second, value);
    const auto key = std::make_pair(run.regimen, run.backbone);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) group_order.push_back(key);
    if (run.tasks >= 2) {
      const ForgettingMetrics metrics = forgetting_metrics(matrix);
      it->second.forgetting_abs.push_back(metrics.mean_abs);
      it->second.forgetting_rel.push_back(metrics.mean_rel);
    }
    it->second.final_nmse_db.push_back(matrix.nmse_db(run.tasks - 1, run.tasks - 1));
    it->second.mem_floats_extra.push_back(run.mem_extra);
  }

  CsvTable summary;
  summary.header = {"regimen", "backbone", "metric", "median", "p25", "p75"};
  const auto emit = [&summary](const std::string& regimen, const std::string& backbone,
                               const std::string& metric, const std::vector<double>& values) {
    if (values.empty()) return;
    summary.rows.push_back({regimen, backbone, metric, format_double(quantile(values, 0.5)),
                            format_double(quantile(values, 0.25)),
                            format_double(quantile(values, 0.75))});
  };
  for (const auto& key : group_order) {
    const GroupAgg& agg = groups.at(key);
    emit(key.first, key.second, "forgetting_abs", agg.forgetting_abs);
    emit(key.first, key.second, "forgetting_rel", agg.forgetting_rel);
    emit(key.first, key.second, "final_nmse_db", agg.final_nmse_db);
    emit(key.first, key.second, "mem_floats_extra", agg.mem_floats_extra);
  }
  write_csv(dir + "/summary.csv", summary);
}

}  // namespace chanpred
