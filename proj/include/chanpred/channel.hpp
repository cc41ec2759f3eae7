#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "chanpred/tensor.hpp"

namespace chanpred {

/// SNR sentinel meaning "no noise at all".
inline constexpr double kCleanSnrDb = std::numeric_limits<double>::infinity();

inline bool is_clean_snr(double snr_db) { return std::isinf(snr_db) && snr_db > 0; }

/// Generative parameters of one network configuration (one task).
struct ScenarioConfig {
  std::string name = "umi-standard";
  double doppler_hz = 60.0;          // max Doppler shift f_D
  double sample_interval_s = 1e-3;   // time between channel snapshots
  int n_paths = 9;                   // sum-of-sinusoids rays per antenna pair
  int n_tx = 2;
  int n_rx = 2;
  double spatial_corr = 0.45;        // exponential antenna correlation, [0, 1)
  double path_gain_spread_db = 3.0;  // std-dev of per-ray log-gains
  double snr_db_train = kCleanSnrDb; // SNR applied to training inputs

  void validate() const;  // throws std::invalid_argument naming the field
};

ScenarioConfig scenario_preset(const std::string& name);
const std::vector<std::string>& scenario_preset_names();

/// Zeroth-order Bessel function of the first kind, |error| < 1e-8 on the
/// real line: power series for small |x|, Hankel asymptotic form beyond.
double bessel_j0(double x);

/// Channel staleness correlation rho(dt) = J0(2*pi*f_D*dt).
double temporal_correlation(double doppler_hz, double dt_s);

/// One (history, target) pair. x is [2, T, n_tx, n_rx] with the leading
/// axis = (real, imag); h is [2, n_tx, n_rx], the snapshot one
/// sample_interval after the last history frame.
struct ChannelSample {
  Tensor x;
  Tensor h;
};

struct TaskDataset {
  ScenarioConfig scenario;
  std::vector<ChannelSample> samples;
  std::uint64_t seed = 0;
  int history = 0;  // T

  int input_width() const { return 2 * scenario.n_tx * scenario.n_rx; }
};

/// Time-correlated Rayleigh sequence, one complex n_tx x n_rx matrix per
/// step. Jakes-style sum of sinusoids per antenna pair, Kronecker-mixed for
/// spatial correlation, unit average power per element. Deterministic in
/// (cfg, seed).
std::vector<Eigen::MatrixXcd> generate_channel_sequence(const ScenarioConfig& cfg, int n_steps,
                                                        std::uint64_t seed);

/// n_samples windows, each cut from its own independently generated
/// sequence: x = steps [0, T), h = step T. The scenario's snr_db_train is
/// applied to x (targets stay clean). Deterministic in (cfg, seed).
TaskDataset build_task_dataset(const ScenarioConfig& cfg, int n_samples, int history,
                               std::uint64_t seed);

/// x + white Gaussian noise with per-element variance
/// mean-power(x) / 10^(snr_db/10). The clean sentinel returns x unchanged.
Tensor add_awgn(const Tensor& x, double snr_db, std::uint64_t seed);

/// Per-snapshot channel gain ||H||_F, n_samples independent draws.
std::vector<double> sample_channel_gains(const ScenarioConfig& cfg, int n_samples,
                                         std::uint64_t seed);

void save_dataset(const TaskDataset& dataset, const std::string& path);
TaskDataset load_dataset(const std::string& path);

}  // namespace chanpred
