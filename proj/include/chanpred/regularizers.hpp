#pragma once

#include <string>
#include <vector>

#include "chanpred/channel.hpp"
#include "chanpred/predictor.hpp"
#include "chanpred/tensor.hpp"

namespace chanpred {

/// Quadratic-penalty regimen anchored at per-task parameter snapshots,
/// weighted elementwise by importance (curvature) estimates. One entry per
/// completed task unless consolidated.
class EwcBank {
 public:
  struct Entry {
    ArrayXd theta_star;
    ArrayXd fisher;  // elementwise >= 0
  };

  explicit EwcBank(double alpha = 0.5);

  double alpha() const { return alpha_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Appends one (snapshot, importance) entry. Importances must be
  /// nonnegative and both vectors must share the bank's parameter length.
  void register_task(ArrayXd theta_star, ArrayXd fisher);

  /// Merges all entries into one: snapshot = most recent, importance = sum.
  void consolidate();

  /// (alpha/2) * sum_entries sum_i fisher_i * (theta_i - theta_star_i)^2
  double penalty(const ArrayXd& theta) const;

  /// alpha * sum_entries fisher (.*) (theta - theta_star)
  ArrayXd penalty_gradient(const ArrayXd& theta) const;

  /// Persistent floats held beyond the model itself: 2M per entry.
  Index extra_floats() const;

 private:
  double alpha_;
  std::vector<Entry> entries_;
};

/// Empirical curvature diagonal: per-sample loss gradients (batch size 1),
/// squared, averaged over the dataset. Always elementwise >= 0.
ArrayXd compute_fisher_diag(Predictor& p, const TaskDataset& dataset);

/// Online path-integral regimen: accumulates squared task-loss gradients
/// scaled by the step size while training, then converts the accumulated
/// work into per-parameter importances at each task boundary.
class SiState {
 public:
  SiState() = default;
  SiState(const ArrayXd& theta_initial, double beta, double xi);

  double beta() const { return beta_; }
  double xi() const { return xi_; }
  const ArrayXd& omega() const { return omega_; }
  const ArrayXd& omega_tilde() const { return omega_tilde_; }
  const ArrayXd& theta_ref() const { return theta_ref_; }
  /// True once any importance is positive (i.e. the penalty can be nonzero).
  bool active() const { return active_; }
  Index param_count() const { return omega_.size(); }

  /// One training step's worth of work: omega_tilde += task_grad^2 * eta.
  /// task_grad is the gradient of the task loss alone (no penalty term).
  void accumulate(const ArrayXd& task_grad, double eta);

  /// Task boundary: omega += omega_tilde / ((theta - theta_ref)^2 + xi),
  /// then omega_tilde := 0 and theta_ref := theta.
  void end_task(const ArrayXd& theta);

  /// (beta/2) * sum_i omega_i * (theta_i - theta_ref_i)^2
  double penalty(const ArrayXd& theta) const;

  /// beta * omega (.*) (theta - theta_ref)
  ArrayXd penalty_gradient(const ArrayXd& theta) const;

  /// Persistent floats held beyond the model itself: 3M, independent of the
  /// number of tasks seen.
  Index extra_floats() const;

  /// Deserialization hook: installs previously saved importance vectors
  /// (both must be elementwise >= 0) and recomputes the active flag.
  void restore(ArrayXd omega, ArrayXd omega_tilde);

 private:
  double beta_ = 0.5;
  double xi_ = 1e-4;
  ArrayXd omega_;
  ArrayXd omega_tilde_;
  ArrayXd theta_ref_;
  bool active_ = false;

  void require_length(const ArrayXd& v, const char* what) const;
};

void save_ewc_bank(const EwcBank& bank, const std::string& path);
EwcBank load_ewc_bank(const std::string& path);

void save_si_state(const SiState& state, const std::string& path);
SiState load_si_state(const std::string& path);

}  // namespace chanpred
