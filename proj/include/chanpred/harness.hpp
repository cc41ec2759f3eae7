#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chanpred/channel.hpp"
#include "chanpred/predictor.hpp"
#include "chanpred/regularizers.hpp"
#include "chanpred/tensor.hpp"

namespace chanpred {

enum class Regimen { kNaive, kEwc, kSi };

std::string regimen_name(Regimen regimen);
Regimen regimen_from_name(const std::string& name);  // throws on unknown name

struct TrainConfig {
  Regimen regimen = Regimen::kNaive;
  Backbone backbone = Backbone::kGru;
  int hidden = 32;
  int epochs = 30;  // per task
  int batch = 32;
  double eta = 1e-2;
  double alpha = 0.5;                  // anchor-penalty strength (EWC)
  double beta = 0.5;                   // importance-penalty strength (SI)
  double xi = 1e-4;                    // SI displacement damping
  double snr_db_train = kCleanSnrDb;   // SNR applied to training inputs
  std::uint64_t seed = 1;
  bool consolidate_ewc = false;        // merge the bank to one entry per task end
  bool record_step_grads = false;      // keep per-step task gradients in the log

  void validate() const;  // throws std::invalid_argument naming "train.<field>"
};

/// Per-regimen side state owned by one training sequence.
struct RegimenState {
  Regimen regimen = Regimen::kNaive;
  EwcBank bank{0.0};
  SiState si;

  static RegimenState init(const TrainConfig& cfg, const ArrayXd& theta_initial);

  /// True when the penalty term can contribute a nonzero gradient; when
  /// false the update is skipped entirely so disabled regimens follow the
  /// unregularized trajectory bit for bit.
  bool penalty_active() const;
  double penalty(const ArrayXd& theta) const;
  ArrayXd penalty_gradient(const ArrayXd& theta) const;
};

/// Raised when a training step produces a non-finite loss or gradient.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  double task_loss = 0.0;  // epoch mean of batch losses
  double penalty = 0.0;    // epoch mean of the regimen penalty
  double grad_norm = 0.0;  // epoch mean L2 norm of the applied gradient
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::vector<ArrayXd> step_grads;  // task-loss gradients, only when requested
  ArrayXd theta_end;
  int steps = 0;
};

/// One pass of the per-task loop: epochs of shuffled mini-batch SGD on
/// task loss + regimen penalty, online importance accumulation for SI, and
/// the end-of-task hook (importance estimation / anchor update) exactly
/// once. Batch order depends only on (seed, task_index, epoch), never on
/// the regimen, so regimens are trajectory-comparable per seed.
TrainLog train_task(Predictor& p, const TaskDataset& dataset, RegimenState& state,
                    const TrainConfig& cfg, int task_index);

/// NMSE of the predictor over a full dataset (no graph recording).
double eval_nmse(const Predictor& p, const TaskDataset& dataset);

/// Lower-triangular task-by-checkpoint error matrix: entry (j, k) is the
/// NMSE on task j's held-out set after finishing training on task k, j <= k.
class EvalMatrix {
 public:
  EvalMatrix() = default;
  explicit EvalMatrix(int task_count);

  int task_count() const { return k_; }
  double nmse(int task, int after_task) const;
  double nmse_db(int task, int after_task) const;
  void set(int task, int after_task, double value);

 private:
  int k_ = 0;
  std::vector<double> values_;

  std::size_t index(int task, int after_task) const;
};

struct SequenceResult {
  EvalMatrix matrix;
  RegimenState state;
  Predictor predictor;
  std::vector<TrainLog> logs;
};

/// Called after each task finishes (post end-of-task hook and evaluation).
using TaskBoundaryHook =
    std::function<void(int task_index, const Predictor& p, const RegimenState& state)>;

/// Trains the tasks in order and fills the evaluation matrix. train_tasks
/// and eval_tasks pair up by index and must agree on shapes.
SequenceResult run_sequence(const std::vector<TaskDataset>& train_tasks,
                            const std::vector<TaskDataset>& eval_tasks, const TrainConfig& cfg,
                            const TaskBoundaryHook& on_task_end = nullptr);

struct ForgettingMetrics {
  std::vector<double> abs;       // nmse[j][K-1] - nmse[j][j] per past task j
  std::vector<double> rel;       // abs / nmse[j][j]
  std::vector<double> db_delta;  // dB view of the same movement
  double mean_abs = 0.0;
  double mean_rel = 0.0;
  double mean_db_delta = 0.0;
};

/// Requires at least 2 tasks; negative values mean backward transfer.
ForgettingMetrics forgetting_metrics(const EvalMatrix& matrix);

struct SnrPoint {
  double snr_db = 0.0;  // the clean sentinel marks the noiseless point
  double nmse = 0.0;
  double nmse_db = 0.0;
};

/// NMSE versus input SNR on a fresh held-out set: inputs are corrupted with
/// white noise at each listed SNR, targets stay clean. Deterministic in seed.
std::vector<SnrPoint> evaluate_nmse_vs_snr(const Predictor& p, const ScenarioConfig& scenario,
                                           const std::vector<double>& snr_list_db, int n_eval,
                                           std::uint64_t seed);

struct MemoryAccounting {
  Index model_floats = 0;             // M
  Index regimen_extra_floats = 0;     // persistent side state
  Index fisher_transient_floats = 0;  // peak extra during importance estimation
};

MemoryAccounting memory_accounting(const RegimenState& state, Index model_floats);

}  // namespace chanpred
