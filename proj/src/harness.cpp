#include "chanpred/harness.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "chanpred/rng.hpp"

namespace chanpred {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x3b7d;
constexpr std::uint64_t kSnrEvalSalt = 0x90c1;
constexpr std::uint64_t kSnrNoiseSalt = 0x44d2;

void require(bool cond, const char* field, const char* msg) {
  if (!cond) throw std::invalid_argument(std::string(field) + " " + msg);
}

}  // namespace

std::string regimen_name(Regimen regimen) {
  switch (regimen) {
    case Regimen::kNaive: return "naive";
    case Regimen::kEwc: return "ewc";
    case Regimen::kSi: return "si";
  }
  throw std::invalid_argument("regimen_name: invalid enum value");
}

Regimen regimen_from_name(const std::string& name) {
  if (name == "naive") return Regimen::kNaive;
  if (name == "ewc") return Regimen::kEwc;
  if (name == "si") return Regimen::kSi;
  throw std::invalid_argument("unknown regimen: " + name + " (expected naive, ewc or si)");
}

void TrainConfig::validate() const {
  require(hidden >= 1, "train.hidden", "must be >= 1");
  require(epochs >= 1, "train.epochs", "must be >= 1");
  require(batch >= 1, "train.batch", "must be >= 1");
  require(eta > 0.0, "train.eta", "must be > 0");
  require(alpha >= 0.0, "train.alpha", "must be >= 0");
  require(beta >= 0.0, "train.beta", "must be >= 0");
  require(xi > 0.0, "train.xi", "must be > 0");
  require(!std::isnan(snr_db_train), "train.snr_db_train", "must not be NaN");
}

RegimenState RegimenState::init(const TrainConfig& cfg, const ArrayXd& theta_initial) {
  RegimenState state;
  state.regimen = cfg.regimen;
  if (cfg.regimen == Regimen::kEwc) {
    state.bank = EwcBank(cfg.alpha);
  } else if (cfg.regimen == Regimen::kSi) {
    state.si = SiState(theta_initial, cfg.beta, cfg.xi);
  }
  return state;
}

bool RegimenState::penalty_active() const {
  switch (regimen) {
    case Regimen::kNaive: return false;
    case Regimen::kEwc: return bank.alpha() != 0.0 && !bank.empty();
    case Regimen::kSi: return si.beta() != 0.0 && si.active();
  }
  return false;
}

double RegimenState::penalty(const ArrayXd& theta) const {
  if (!penalty_active()) return 0.0;
  return regimen == Regimen::kEwc ? bank.penalty(theta) : si.penalty(theta);
}

ArrayXd RegimenState::penalty_gradient(const ArrayXd& theta) const {
  if (!penalty_active()) return ArrayXd::Zero(theta.size());
  return regimen == Regimen::kEwc ? bank.penalty_gradient(theta) : si.penalty_gradient(theta);
}

TrainLog train_task(Predictor& p, const TaskDataset& dataset, RegimenState& state,
                    const TrainConfig& cfg, int task_index) {
  cfg.validate();
  if (state.regimen != cfg.regimen) {
    throw std::invalid_argument("train_task: regimen state does not match config");
  }
  if (dataset.samples.empty()) throw std::invalid_argument("train_task: empty dataset");

  const std::size_t n = dataset.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::derive(cfg.seed, {kShuffleSalt, static_cast<std::uint64_t>(task_index),
                                           static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    EpochStats stats;
    int batches = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch));
      const std::vector<std::size_t> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
      double loss_value = std::numeric_limits<double>::quiet_NaN();
      try {
        Graph graph;
        Tensor loss;
        {
          Graph::Scope scope(graph);
          loss = nmse_loss(p.forward(pack_frames(dataset, batch_idx)),
                           pack_targets(dataset, batch_idx));
        }
        loss_value = loss.item();
        graph.backward(loss);
      } catch (const std::runtime_error& e) {
        throw DivergenceError("training diverged at task " + std::to_string(task_index) +
                              ", epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(log.steps) + ": " + e.what());
      }

      ArrayXd task_grad = p.flatten_grads();
      p.clear_grads();
      if (!task_grad.isFinite().all() || !std::isfinite(loss_value)) {
        throw DivergenceError("training diverged at task " + std::to_string(task_index) +
                              ", epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(log.steps) + ": task loss " +
                              std::to_string(loss_value) + ", non-finite gradient");
      }

      if (cfg.record_step_grads) log.step_grads.push_back(task_grad);
      if (state.regimen == Regimen::kSi) state.si.accumulate(task_grad, cfg.eta);

      const ArrayXd theta = p.flatten_params();
      double penalty_value = 0.0;
      ArrayXd applied = std::move(task_grad);
      if (state.penalty_active()) {
        penalty_value = state.penalty(theta);
        applied += state.penalty_gradient(theta);
      }
      p.unflatten_params(theta - cfg.eta * applied);

      stats.task_loss += loss_value;
      stats.penalty += penalty_value;
      stats.grad_norm += std::sqrt(applied.square().sum());
      ++batches;
      ++log.steps;
    }
    stats.task_loss /= batches;
    stats.penalty /= batches;
    stats.grad_norm /= batches;
    log.epochs.push_back(stats);
  }

  log.theta_end = p.flatten_params();
  if (state.regimen == Regimen::kEwc) {
    state.bank.register_task(log.theta_end, compute_fisher_diag(p, dataset));
    if (cfg.consolidate_ewc) state.bank.consolidate();
  } else if (state.regimen == Regimen::kSi) {
    state.si.end_task(log.theta_end);
  }
  return log;
}

double eval_nmse(const Predictor& p, const TaskDataset& dataset) {
  if (dataset.samples.empty()) throw std::invalid_argument("eval_nmse: empty dataset");
  std::vector<std::size_t> all(dataset.samples.size());
  std::iota(all.begin(), all.end(), 0);
  return nmse(p.forward(pack_frames(dataset, all)), pack_targets(dataset, all));
}

EvalMatrix::EvalMatrix(int task_count) : k_(task_count) {
  if (task_count < 1) throw std::invalid_argument("EvalMatrix: task count must be >= 1");
  values_.assign(static_cast<std::size_t>(task_count) * static_cast<std::size_t>(task_count),
                 std::numeric_limits<double>::quiet_NaN());
}

std::size_t EvalMatrix::index(int task, int after_task) const {
  if (task < 0 || after_task < task || after_task >= k_) {
    throw std::invalid_argument("EvalMatrix: entry (" + std::to_string(task) + ", " +
                                std::to_string(after_task) + ") outside the lower triangle of " +
                                std::to_string(k_) + " tasks");
  }
  return static_cast<std::size_t>(task) * static_cast<std::size_t>(k_) +
         static_cast<std::size_t>(after_task);
}

double EvalMatrix::nmse(int task, int after_task) const { return values_[index(task, after_task)]; }

double EvalMatrix::nmse_db(int task, int after_task) const {
  return chanpred::nmse_db(nmse(task, after_task));
}

void EvalMatrix::set(int task, int after_task, double value) {
  if (!(value >= 0.0)) {
    throw std::invalid_argument("EvalMatrix: NMSE must be >= 0, got " + std::to_string(value));
  }
  values_[index(task, after_task)] = value;
}

SequenceResult run_sequence(const std::vector<TaskDataset>& train_tasks,
                            const std::vector<TaskDataset>& eval_tasks, const TrainConfig& cfg,
                            const TaskBoundaryHook& on_task_end) {
  cfg.validate();
  if (train_tasks.empty() || train_tasks.size() != eval_tasks.size()) {
    throw std::invalid_argument("run_sequence: need equally many train and eval tasks (>= 1)");
  }
  const int width = train_tasks[0].input_width();
  const int history = train_tasks[0].history;
  for (std::size_t i = 0; i < train_tasks.size(); ++i) {
    if (train_tasks[i].input_width() != width || eval_tasks[i].input_width() != width ||
        train_tasks[i].history != history || eval_tasks[i].history != history) {
      throw std::invalid_argument("run_sequence: task " + std::to_string(i) +
                                  " disagrees on sample shapes");
    }
  }

  PredictorDims dims;
  dims.input = width;
  dims.output = width;
  dims.hidden = cfg.hidden;
  dims.history = history;

  SequenceResult result;
  result.predictor = Predictor::init(cfg.backbone, dims, cfg.seed);
  result.state = RegimenState::init(cfg, result.predictor.flatten_params());
  result.matrix = EvalMatrix(static_cast<int>(train_tasks.size()));

  for (int k = 0; k < static_cast<int>(train_tasks.size()); ++k) {
    result.logs.push_back(train_task(result.predictor, train_tasks[static_cast<std::size_t>(k)],
                                     result.state, cfg, k));
    for (int j = 0; j <= k; ++j) {
      result.matrix.set(j, k,
                        eval_nmse(result.predictor, eval_tasks[static_cast<std::size_t>(j)]));
    }
    if (on_task_end) on_task_end(k, result.predictor, result.state);
  }
  return result;
}

ForgettingMetrics forgetting_metrics(const EvalMatrix& matrix) {
  const int k = matrix.task_count();
  if (k < 2) {
    throw std::invalid_argument("forgetting_metrics: at least 2 tasks required, got " +
                                std::to_string(k));
  }
  ForgettingMetrics metrics;
  for (int j = 0; j < k - 1; ++j) {
    const double first = matrix.nmse(j, j);
    const double last = matrix.nmse(j, k - 1);
    metrics.abs.push_back(last - first);
    metrics.rel.push_back((last - first) / first);
    metrics.db_delta.push_back(nmse_db(last) - nmse_db(first));
  }
  const double count = static_cast<double>(metrics.abs.size());
  for (double v : metrics.abs) metrics.mean_abs += v / count;
  for (double v : metrics.rel) metrics.mean_rel += v / count;
  for (double v : metrics.db_delta) metrics.mean_db_delta += v / count;
  return metrics;
}

std::vector<SnrPoint> evaluate_nmse_vs_snr(const Predictor& p, const ScenarioConfig& scenario,
                                           const std::vector<double>& snr_list_db, int n_eval,
                                           std::uint64_t seed) {
  if (snr_list_db.empty()) {
    throw std::invalid_argument("evaluate_nmse_vs_snr: empty SNR list");
  }
  if (n_eval < 100) {
    throw std::invalid_argument("evaluate_nmse_vs_snr: n_eval must be >= 100");
  }
  ScenarioConfig clean = scenario;
  clean.snr_db_train = kCleanSnrDb;
  const TaskDataset base =
      build_task_dataset(clean, n_eval, p.dims().history, Rng::derive(seed, {kSnrEvalSalt}));

  std::vector<SnrPoint> curve;
  curve.reserve(snr_list_db.size());
  for (std::size_t i = 0; i < snr_list_db.size(); ++i) {
    TaskDataset noisy = base;
    if (!is_clean_snr(snr_list_db[i])) {
      for (std::size_t s = 0; s < noisy.samples.size(); ++s) {
        noisy.samples[s].x = add_awgn(base.samples[s].x, snr_list_db[i],
                                      Rng::derive(seed, {kSnrNoiseSalt, static_cast<std::uint64_t>(i),
                                                         static_cast<std::uint64_t>(s)}));
      }
    }
    SnrPoint point;
    point.snr_db = snr_list_db[i];
    point.nmse = eval_nmse(p, noisy);
    point.nmse_db = nmse_db(point.nmse);
    curve.push_back(point);
  }
  return curve;
}

MemoryAccounting memory_accounting(const RegimenState& state, Index model_floats) {
  MemoryAccounting acc;
  acc.model_floats = model_floats;
  switch (state.regimen) {
    case Regimen::kNaive:
      break;
    case Regimen::kEwc:
      acc.regimen_extra_floats = state.bank.extra_floats();
      acc.fisher_transient_floats = 2 * model_floats;
      break;
    case Regimen::kSi:
      acc.regimen_extra_floats = state.si.extra_floats();
      break;
  }
  return acc;
}

}  // namespace chanpred
