#include "chanpred/regularizers.hpp"

#include <stdexcept>
#include <utility>

#include "container_io.hpp"

namespace chanpred {

EwcBank::EwcBank(double alpha) : alpha_(alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("EwcBank: alpha must be >= 0");
}

void EwcBank::register_task(ArrayXd theta_star, ArrayXd fisher) {
  if (theta_star.size() != fisher.size()) {
    throw std::invalid_argument("EwcBank::register_task: snapshot and importance lengths differ");
  }
  if (!entries_.empty() && theta_star.size() != entries_.front().theta_star.size()) {
    throw std::invalid_argument("EwcBank::register_task: parameter length changed");
  }
  if ((fisher < 0.0).any()) {
    throw std::invalid_argument("EwcBank::register_task: negative importance entry");
  }
  entries_.push_back(Entry{std::move(theta_star), std::move(fisher)});
}

void EwcBank::consolidate() {
  if (entries_.size() <= 1) return;
  Entry merged;
  merged.theta_star = entries_.back().theta_star;
  merged.fisher = ArrayXd::Zero(merged.theta_star.size());
  for (const Entry& e : entries_) merged.fisher += e.fisher;
  entries_.clear();
  entries_.push_back(std::move(merged));
}

double EwcBank::penalty(const ArrayXd& theta) const {
  double acc = 0.0;
  for (const Entry& e : entries_) {
    if (theta.size() != e.theta_star.size()) {
      throw std::invalid_argument("EwcBank::penalty: theta length mismatch");
    }
    acc += (e.fisher * (theta - e.theta_star).square()).sum();
  }
  return 0.5 * alpha_ * acc;
}

ArrayXd EwcBank::penalty_gradient(const ArrayXd& theta) const {
  ArrayXd grad = ArrayXd::Zero(theta.size());
  for (const Entry& e : entries_) {
    if (theta.size() != e.theta_star.size()) {
      throw std::invalid_argument("EwcBank::penalty_gradient: theta length mismatch");
    }
    grad += e.fisher * (theta - e.theta_star);
  }
  return alpha_ * grad;
}

Index EwcBank::extra_floats() const {
  Index acc = 0;
  for (const Entry& e : entries_) acc += 2 * e.theta_star.size();
  return acc;
}

ArrayXd compute_fisher_diag(Predictor& p, const TaskDataset& dataset) {
  if (dataset.samples.empty()) {
    throw std::invalid_argument("compute_fisher_diag: empty dataset");
  }
  ArrayXd fisher = ArrayXd::Zero(p.param_count());
  for (std::size_t s = 0; s < dataset.samples.size(); ++s) {
    Graph graph;
    Tensor loss;
    {
      Graph::Scope scope(graph);
      const std::vector<std::size_t> one{s};
      loss = nmse_loss(p.forward(pack_frames(dataset, one)), pack_targets(dataset, one));
    }
    graph.backward(loss);
    fisher += p.flatten_grads().square();
    p.clear_grads();
  }
  return fisher / static_cast<double>(dataset.samples.size());
}

SiState::SiState(const ArrayXd& theta_initial, double beta, double xi) : beta_(beta), xi_(xi) {
  if (!(beta >= 0.0)) throw std::invalid_argument("SiState: beta must be >= 0");
  if (!(xi > 0.0)) throw std::invalid_argument("SiState: xi must be > 0");
  omega_ = ArrayXd::Zero(theta_initial.size());
  omega_tilde_ = ArrayXd::Zero(theta_initial.size());
  theta_ref_ = theta_initial;
}

void SiState::require_length(const ArrayXd& v, const char* what) const {
  if (v.size() != omega_.size()) {
    throw std::invalid_argument(std::string(what) + ": expected length " +
                                std::to_string(omega_.size()) + ", got " +
                                std::to_string(v.size()));
  }
}

void SiState::accumulate(const ArrayXd& task_grad, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("SiState::accumulate: eta must be > 0");
  require_length(task_grad, "SiState::accumulate");
  omega_tilde_ += task_grad.square() * eta;
}

void SiState::end_task(const ArrayXd& theta) {
  require_length(theta, "SiState::end_task");
  omega_ += omega_tilde_ / ((theta - theta_ref_).square() + xi_);
  omega_tilde_.setZero();
  theta_ref_ = theta;
  active_ = active_ || (omega_ > 0.0).any();
}

double SiState::penalty(const ArrayXd& theta) const {
  require_length(theta, "SiState::penalty");
  if (!active_) return 0.0;
  return 0.5 * beta_ * (omega_ * (theta - theta_ref_).square()).sum();
}

ArrayXd SiState::penalty_gradient(const ArrayXd& theta) const {
  require_length(theta, "SiState::penalty_gradient");
  return beta_ * omega_ * (theta - theta_ref_);
}

Index SiState::extra_floats() const { return 3 * omega_.size(); }

void SiState::restore(ArrayXd omega, ArrayXd omega_tilde) {
  require_length(omega, "SiState::restore");
  require_length(omega_tilde, "SiState::restore");
  if ((omega < 0.0).any() || (omega_tilde < 0.0).any()) {
    throw std::invalid_argument("SiState::restore: negative importance entry");
  }
  omega_ = std::move(omega);
  omega_tilde_ = std::move(omega_tilde);
  active_ = (omega_ > 0.0).any();
}

namespace {

constexpr const char* kRegimenMagic = "CPRG1";

}  // namespace

void save_ewc_bank(const EwcBank& bank, const std::string& path) {
  detail::json header;
  header["format"] = "chanpred-regimen";
  header["version"] = 1;
  header["kind"] = "ewc";
  header["alpha"] = bank.alpha();
  header["entries"] = bank.size();
  const Index m = bank.empty() ? 0 : bank.entries().front().theta_star.size();
  header["m"] = m;
  std::vector<double> payload;
  payload.reserve(static_cast<std::size_t>(bank.extra_floats()));
  for (const auto& e : bank.entries()) {
    payload.insert(payload.end(), e.theta_star.data(), e.theta_star.data() + m);
    payload.insert(payload.end(), e.fisher.data(), e.fisher.data() + m);
  }
  detail::write_container(path, kRegimenMagic, header, payload);
}

EwcBank load_ewc_bank(const std::string& path) {
  const auto c = detail::read_container(path, kRegimenMagic);
  if (c.header.at("kind").get<std::string>() != "ewc") {
    throw std::runtime_error("regimen state in " + path + " is not an EWC bank");
  }
  EwcBank bank(c.header.at("alpha").get<double>());
  const auto n_entries = c.header.at("entries").get<std::size_t>();
  const auto m = c.header.at("m").get<Index>();
  if (c.payload.size() != n_entries * static_cast<std::size_t>(2 * m)) {
    throw std::runtime_error("EWC bank payload size mismatch in " + path);
  }
  const double* ptr = c.payload.data();
  for (std::size_t i = 0; i < n_entries; ++i) {
    ArrayXd theta_star = Eigen::Map<const ArrayXd>(ptr, m);
    ptr += m;
    ArrayXd fisher = Eigen::Map<const ArrayXd>(ptr, m);
    ptr += m;
    bank.register_task(std::move(theta_star), std::move(fisher));
  }
  return bank;
}

void save_si_state(const SiState& state, const std::string& path) {
  detail::json header;
  header["format"] = "chanpred-regimen";
  header["version"] = 1;
  header["kind"] = "si";
  header["beta"] = state.beta();
  header["xi"] = state.xi();
  header["m"] = state.param_count();
  const Index m = state.param_count();
  std::vector<double> payload;
  payload.reserve(static_cast<std::size_t>(3 * m));
  payload.insert(payload.end(), state.omega().data(), state.omega().data() + m);
  payload.insert(payload.end(), state.omega_tilde().data(), state.omega_tilde().data() + m);
  payload.insert(payload.end(), state.theta_ref().data(), state.theta_ref().data() + m);
  detail::write_container(path, kRegimenMagic, header, payload);
}

SiState load_si_state(const std::string& path) {
  const auto c = detail::read_container(path, kRegimenMagic);
  if (c.header.at("kind").get<std::string>() != "si") {
    throw std::runtime_error("regimen state in " + path + " is not an SI state");
  }
  const auto m = c.header.at("m").get<Index>();
  if (c.payload.size() != static_cast<std::size_t>(3 * m)) {
    throw std::runtime_error("SI state payload size mismatch in " + path);
  }
  SiState state(Eigen::Map<const ArrayXd>(c.payload.data() + 2 * m, m),
                c.header.at("beta").get<double>(), c.header.at("xi").get<double>());
  state.restore(Eigen::Map<const ArrayXd>(c.payload.data(), m),
                Eigen::Map<const ArrayXd>(c.payload.data() + m, m));
  return state;
}

}  // namespace chanpred
