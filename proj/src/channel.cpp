#include "chanpred/channel.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

#include "chanpred/rng.hpp"
#include "container_io.hpp"

namespace chanpred {

namespace {

constexpr std::uint64_t kSequenceSalt = 0x5e91;
constexpr std::uint64_t kSampleSalt = 0x5a3f;
constexpr std::uint64_t kNoiseSalt = 0xa362;
constexpr std::uint64_t kGainSalt = 0x6a1e;

void require(bool cond, const char* field, const char* msg) {
  if (!cond) throw std::invalid_argument(std::string(field) + " " + msg);
}

Eigen::MatrixXd spatial_mixing(int n, double corr) {
  Eigen::MatrixXd r(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) r(i, j) = std::pow(corr, std::abs(i - j));
  }
  return Eigen::LLT<Eigen::MatrixXd>(r).matrixL();
}

detail::json snr_to_json(double snr_db) {
  if (is_clean_snr(snr_db)) return "clean";
  return snr_db;
}

double snr_from_json(const detail::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "clean") return kCleanSnrDb;
    throw std::runtime_error("unknown SNR sentinel: " + j.get<std::string>());
  }
  return j.get<double>();
}

}  // namespace

void ScenarioConfig::validate() const {
  require(doppler_hz >= 0.0, "scenario.doppler_hz", "must be >= 0");
  require(sample_interval_s > 0.0, "scenario.sample_interval_s", "must be > 0");
  require(n_paths >= 1, "scenario.n_paths", "must be >= 1");
  require(n_tx >= 1, "scenario.n_tx", "must be >= 1");
  require(n_rx >= 1, "scenario.n_rx", "must be >= 1");
  require(spatial_corr >= 0.0 && spatial_corr < 1.0, "scenario.spatial_corr",
          "must lie in [0, 1)");
  require(path_gain_spread_db >= 0.0, "scenario.path_gain_spread_db", "must be >= 0");
  require(!std::isnan(snr_db_train), "scenario.snr_db_train", "must not be NaN");
}

const std::vector<std::string>& scenario_preset_names() {
  static const std::vector<std::string> names = {"umi-compact", "umi-dense", "umi-standard"};
  return names;
}

ScenarioConfig scenario_preset(const std::string& name) {
  ScenarioConfig cfg;
  cfg.name = name;
  cfg.sample_interval_s = 1e-3;
  cfg.path_gain_spread_db = 3.0;
  cfg.n_tx = 2;
  cfg.n_rx = 2;
  if (name == "umi-compact") {
    cfg.doppler_hz = 30.0;
    cfg.n_paths = 6;
    cfg.spatial_corr = 0.3;
  } else if (name == "umi-dense") {
    cfg.doppler_hz = 100.0;
    cfg.n_paths = 12;
    cfg.spatial_corr = 0.6;
  } else if (name == "umi-standard") {
    cfg.doppler_hz = 60.0;
    cfg.n_paths = 9;
    cfg.spatial_corr = 0.45;
  } else {
    throw std::invalid_argument("unknown scenario preset: " + name);
  }
  return cfg;
}

double bessel_j0(double x) {
  x = std::abs(x);
  if (x < 10.0) {
    // ascending series: sum_k (-q)^k / (k!)^2 with q = x^2/4
    const double q = 0.25 * x * x;
    double term = 1.0;
    double acc = 1.0;
    for (int k = 1; k <= 64; ++k) {
      term *= -q / (static_cast<double>(k) * static_cast<double>(k));
      acc += term;
      if (std::abs(term) < 1e-18 * std::abs(acc) + 1e-300) break;
    }
    return acc;
  }
  // Hankel asymptotic form: sqrt(2/(pi x)) [P cos(x - pi/4) - Q sin(x - pi/4)]
  // with a_m = ((2m-1)!!)^2 / (m! 8^m); truncated before divergence.
  double p = 1.0;
  double q = 0.0;
  double a = 1.0;
  double inv = 1.0;
  double prev = 1.0;
  for (int m = 1; m <= 40; ++m) {
    a *= (2.0 * m - 1.0) * (2.0 * m - 1.0) / (8.0 * m);
    inv /= x;
    const double t = a * inv;
    if (t >= prev) break;
    prev = t;
    const int sign = (((m + 1) / 2) % 2 == 0) ? 1 : -1;
    if (m % 2 == 0) {
      p += sign * t;
    } else {
      q += sign * t;
    }
    if (t < 1e-18) break;
  }
  const double chi = x - 0.25 * std::numbers::pi;
  return std::sqrt(2.0 / (std::numbers::pi * x)) * (p * std::cos(chi) - q * std::sin(chi));
}

double temporal_correlation(double doppler_hz, double dt_s) {
  return bessel_j0(2.0 * std::numbers::pi * doppler_hz * dt_s);
}

std::vector<Eigen::MatrixXcd> generate_channel_sequence(const ScenarioConfig& cfg, int n_steps,
                                                        std::uint64_t seed) {
  cfg.validate();
  if (n_steps < 1) throw std::invalid_argument("generate_channel_sequence: n_steps must be >= 1");

  Rng rng(Rng::derive(seed, {kSequenceSalt}));
  const int paths = cfg.n_paths;
  const double amp_exp = std::numbers::ln10 / 20.0;   // amplitude = e^{amp_exp * gain_db}
  const double pow_exp = std::numbers::ln10 / 10.0;   // power    = e^{pow_exp * gain_db}
  const double spread = cfg.path_gain_spread_db;
  // E[a^2] for lognormal ray amplitudes; dividing by it fixes unit power.
  const double mean_sq_gain = std::exp(0.5 * pow_exp * pow_exp * spread * spread);
  const double scale = 1.0 / std::sqrt(static_cast<double>(paths) * mean_sq_gain);

  struct Ray {
    double omega;
    double psi;
    double amp;
  };
  std::vector<Ray> rays(static_cast<std::size_t>(cfg.n_tx * cfg.n_rx * paths));
  for (auto& ray : rays) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    ray.omega = 2.0 * std::numbers::pi * cfg.doppler_hz * std::cos(angle);
    ray.psi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    ray.amp = scale * std::exp(amp_exp * spread * rng.gaussian());
  }

  const bool mix = cfg.spatial_corr > 0.0 && (cfg.n_tx > 1 || cfg.n_rx > 1);
  Eigen::MatrixXd mix_tx, mix_rx;
  if (mix) {
    mix_tx = spatial_mixing(cfg.n_tx, cfg.spatial_corr);
    mix_rx = spatial_mixing(cfg.n_rx, cfg.spatial_corr);
  }

  std::vector<Eigen::MatrixXcd> steps(static_cast<std::size_t>(n_steps));
  for (int t = 0; t < n_steps; ++t) {
    const double time_s = t * cfg.sample_interval_s;
    Eigen::MatrixXcd h(cfg.n_tx, cfg.n_rx);
    std::size_t r = 0;
    for (int i = 0; i < cfg.n_tx; ++i) {
      for (int j = 0; j < cfg.n_rx; ++j) {
        std::complex<double> acc(0.0, 0.0);
        for (int p = 0; p < paths; ++p, ++r) {
          acc += std::polar(rays[r].amp, rays[r].omega * time_s + rays[r].psi);
        }
        h(i, j) = acc;
      }
    }
    steps[static_cast<std::size_t>(t)] = mix ? Eigen::MatrixXcd(mix_tx * h * mix_rx.transpose())
                                             : std::move(h);
  }
  return steps;
}

namespace {

// Row-major [2, n_tx, n_rx] flattening of one complex snapshot.
void write_snapshot(const Eigen::MatrixXcd& h, double* out) {
  const Index n_tx = h.rows(), n_rx = h.cols();
  for (Index i = 0; i < n_tx; ++i) {
    for (Index j = 0; j < n_rx; ++j) {
      out[i * n_rx + j] = h(i, j).real();
      out[n_tx * n_rx + i * n_rx + j] = h(i, j).imag();
    }
  }
}

}  // namespace

TaskDataset build_task_dataset(const ScenarioConfig& cfg, int n_samples, int history,
                               std::uint64_t seed) {
  cfg.validate();
  if (n_samples < 1) throw std::invalid_argument("build_task_dataset: n_samples must be >= 1");
  if (history < 1) throw std::invalid_argument("build_task_dataset: history must be >= 1");

  TaskDataset dataset;
  dataset.scenario = cfg;
  dataset.seed = seed;
  dataset.history = history;
  dataset.samples.reserve(static_cast<std::size_t>(n_samples));

  const Index frame = static_cast<Index>(cfg.n_tx) * cfg.n_rx;
  for (int s = 0; s < n_samples; ++s) {
    const auto seq =
        generate_channel_sequence(cfg, history + 1, Rng::derive(seed, {kSampleSalt, static_cast<std::uint64_t>(s)}));
    ArrayXd x(2 * history * frame);
    for (int t = 0; t < history; ++t) {
      const auto& h = seq[static_cast<std::size_t>(t)];
      // x layout [2, T, n_tx, n_rx]: real plane then imaginary plane
      for (Index i = 0; i < cfg.n_tx; ++i) {
        for (Index j = 0; j < cfg.n_rx; ++j) {
          x(t * frame + i * cfg.n_rx + j) = h(i, j).real();
          x(history * frame + t * frame + i * cfg.n_rx + j) = h(i, j).imag();
        }
      }
    }
    ArrayXd target(2 * frame);
    write_snapshot(seq[static_cast<std::size_t>(history)], target.data());

    Tensor xt(Shape{2, history, cfg.n_tx, cfg.n_rx}, std::move(x));
    if (!is_clean_snr(cfg.snr_db_train)) {
      xt = add_awgn(xt, cfg.snr_db_train,
                    Rng::derive(seed, {kNoiseSalt, static_cast<std::uint64_t>(s)}));
    }
    dataset.samples.push_back(
        ChannelSample{std::move(xt), Tensor(Shape{2, cfg.n_tx, cfg.n_rx}, std::move(target))});
  }
  return dataset;
}

Tensor add_awgn(const Tensor& x, double snr_db, std::uint64_t seed) {
  if (std::isnan(snr_db)) throw std::invalid_argument("add_awgn: snr_db must not be NaN");
  if (is_clean_snr(snr_db)) return Tensor(x.shape(), x.values());
  const double mean_power = x.values().square().mean();
  const double sigma = std::sqrt(mean_power * std::pow(10.0, -snr_db / 10.0));
  Rng rng(Rng::derive(seed, {kNoiseSalt}));
  ArrayXd noisy = x.values();
  for (Index i = 0; i < noisy.size(); ++i) noisy(i) += sigma * rng.gaussian();
  return Tensor(x.shape(), std::move(noisy));
}

std::vector<double> sample_channel_gains(const ScenarioConfig& cfg, int n_samples,
                                         std::uint64_t seed) {
  std::vector<double> gains(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    const auto seq = generate_channel_sequence(
        cfg, 1, Rng::derive(seed, {kGainSalt, static_cast<std::uint64_t>(s)}));
    gains[static_cast<std::size_t>(s)] = seq[0].norm();
  }
  return gains;
}

void save_dataset(const TaskDataset& dataset, const std::string& path) {
  detail::json header;
  header["format"] = "chanpred-dataset";
  header["version"] = 1;
  header["scenario"] = {{"name", dataset.scenario.name},
                        {"doppler_hz", dataset.scenario.doppler_hz},
                        {"sample_interval_s", dataset.scenario.sample_interval_s},
                        {"n_paths", dataset.scenario.n_paths},
                        {"n_tx", dataset.scenario.n_tx},
                        {"n_rx", dataset.scenario.n_rx},
                        {"spatial_corr", dataset.scenario.spatial_corr},
                        {"path_gain_spread_db", dataset.scenario.path_gain_spread_db},
                        {"snr_db_train", snr_to_json(dataset.scenario.snr_db_train)}};
  header["n_samples"] = dataset.samples.size();
  header["history"] = dataset.history;
  header["seed"] = dataset.seed;

  const Index x_len = dataset.samples.empty() ? 0 : dataset.samples[0].x.size();
  const Index h_len = dataset.samples.empty() ? 0 : dataset.samples[0].h.size();
  std::vector<double> payload;
  payload.reserve(dataset.samples.size() * static_cast<std::size_t>(x_len + h_len));
  for (const auto& sample : dataset.samples) {
    payload.insert(payload.end(), sample.x.values().data(),
                   sample.x.values().data() + sample.x.size());
    payload.insert(payload.end(), sample.h.values().data(),
                   sample.h.values().data() + sample.h.size());
  }
  detail::write_container(path, "CPDS1", header, payload);
}

TaskDataset load_dataset(const std::string& path) {
  const auto c = detail::read_container(path, "CPDS1");
  TaskDataset dataset;
  const auto& sc = c.header.at("scenario");
  dataset.scenario.name = sc.at("name").get<std::string>();
  dataset.scenario.doppler_hz = sc.at("doppler_hz").get<double>();
  dataset.scenario.sample_interval_s = sc.at("sample_interval_s").get<double>();
  dataset.scenario.n_paths = sc.at("n_paths").get<int>();
  dataset.scenario.n_tx = sc.at("n_tx").get<int>();
  dataset.scenario.n_rx = sc.at("n_rx").get<int>();
  dataset.scenario.spatial_corr = sc.at("spatial_corr").get<double>();
  dataset.scenario.path_gain_spread_db = sc.at("path_gain_spread_db").get<double>();
  dataset.scenario.snr_db_train = snr_from_json(sc.at("snr_db_train"));
  dataset.history = c.header.at("history").get<int>();
  dataset.seed = c.header.at("seed").get<std::uint64_t>();
  const std::size_t n_samples = c.header.at("n_samples").get<std::size_t>();

  const Index frame = static_cast<Index>(dataset.scenario.n_tx) * dataset.scenario.n_rx;
  const Index x_len = 2 * dataset.history * frame;
  const Index h_len = 2 * frame;
  if (c.payload.size() != n_samples * static_cast<std::size_t>(x_len + h_len)) {
    throw std::runtime_error("dataset payload size mismatch in " + path);
  }
  dataset.samples.reserve(n_samples);
  const double* p = c.payload.data();
  for (std::size_t s = 0; s < n_samples; ++s) {
    ArrayXd x = Eigen::Map<const ArrayXd>(p, x_len);
    p += x_len;
    ArrayXd h = Eigen::Map<const ArrayXd>(p, h_len);
    p += h_len;
    dataset.samples.push_back(ChannelSample{
        Tensor(Shape{2, dataset.history, dataset.scenario.n_tx, dataset.scenario.n_rx},
               std::move(x)),
        Tensor(Shape{2, dataset.scenario.n_tx, dataset.scenario.n_rx}, std::move(h))});
  }
  return dataset;
}

}  // namespace chanpred
