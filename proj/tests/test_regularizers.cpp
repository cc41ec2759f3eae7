#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <vector>

#include "chanpred/channel.hpp"
#include "chanpred/predictor.hpp"
#include "chanpred/regularizers.hpp"
#include "chanpred/rng.hpp"

using namespace chanpred;

namespace {

bool bitwise_equal(const ArrayXd& a, const ArrayXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) ==
             0;
}

ArrayXd random_vector(Index n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  ArrayXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

// Per-sample task-loss gradient at the predictor's current parameters,
// computed with a throwaway graph (the brute-force inner step of the
// importance estimators).
ArrayXd sample_gradient(Predictor& p, const TaskDataset& d, std::size_t s) {
  Graph graph;
  Tensor loss;
  {
    Graph::Scope scope(graph);
    loss = nmse_loss(p.forward(pack_frames(d, {s})), pack_targets(d, {s}));
  }
  graph.backward(loss);
  ArrayXd g = p.flatten_grads();
  p.clear_grads();
  return g;
}

// A linear predictor that reproduces the last input frame exactly. On a
// frozen (zero-Doppler) clean dataset this is a perfect fit.
Predictor exact_last_frame_predictor(const TaskDataset& d) {
  const PredictorDims dims{d.input_width(), 1, d.input_width(), d.history};
  Predictor p = Predictor::init(Backbone::kLinear, dims, 1);
  ArrayXd flat = ArrayXd::Zero(p.param_count());
  // Weight matrix is [T*input, output] row-major; the block of rows for the
  // last frame gets the identity.
  const Index in = dims.input, out = dims.output;
  const Index last_rows = static_cast<Index>(dims.history - 1) * in;
  for (Index i = 0; i < in; ++i) flat((last_rows + i) * out + i) = 1.0;
  p.unflatten_params(flat);
  return p;
}

}  // namespace

TEST_CASE("fisher diagonal is exactly zero on a perfectly fit task") {
  ScenarioConfig cfg = scenario_preset("umi-compact");
  cfg.doppler_hz = 0.0;
  const TaskDataset d = build_task_dataset(cfg, 6, 3, 17);
  Predictor p = exact_last_frame_predictor(d);
  REQUIRE(nmse(p.forward(pack_frames(d, {0, 1, 2, 3, 4, 5})),
               pack_targets(d, {0, 1, 2, 3, 4, 5})) == 0.0);
  const ArrayXd fisher = compute_fisher_diag(p, d);
  CHECK((fisher == 0.0).all());
}

TEST_CASE("fisher with one sample is the squared gradient, bit for bit") {
  const ScenarioConfig cfg = scenario_preset("umi-standard");
  const TaskDataset d = build_task_dataset(cfg, 1, 4, 23);
  Predictor p = Predictor::init(Backbone::kGru, PredictorDims{8, 6, 8, 4}, 3);
  const ArrayXd g = sample_gradient(p, d, 0);
  const ArrayXd fisher = compute_fisher_diag(p, d);
  CHECK(bitwise_equal(fisher, ArrayXd(g.square())));
}

TEST_CASE("fisher over a dataset is the mean of per-sample squared gradients") {
  const ScenarioConfig cfg = scenario_preset("umi-dense");
  const TaskDataset d = build_task_dataset(cfg, 5, 4, 29);
  Predictor p = Predictor::init(Backbone::kLstm, PredictorDims{8, 5, 8, 4}, 9);
  ArrayXd oracle = ArrayXd::Zero(p.param_count());
  for (std::size_t s = 0; s < d.samples.size(); ++s) {
    oracle += sample_gradient(p, d, s).square();
  }
  oracle /= static_cast<double>(d.samples.size());
  const ArrayXd fisher = compute_fisher_diag(p, d);
  CHECK(bitwise_equal(fisher, oracle));
  CHECK((fisher >= 0.0).all());
}

TEST_CASE("fisher rejects an empty dataset and leaves parameters untouched") {
  TaskDataset empty;
  empty.scenario = scenario_preset("umi-compact");
  empty.history = 4;
  Predictor p = Predictor::init(Backbone::kGru, PredictorDims{8, 4, 8, 4}, 5);
  const ArrayXd before = p.flatten_params();
  CHECK_THROWS_AS(compute_fisher_diag(p, empty), std::invalid_argument);
  const ScenarioConfig cfg = scenario_preset("umi-compact");
  const TaskDataset d = build_task_dataset(cfg, 2, 4, 3);
  (void)compute_fisher_diag(p, d);
  CHECK(bitwise_equal(p.flatten_params(), before));
}

TEST_CASE("quadratic anchor penalty evaluates its closed forms") {
  SUBCASE("zero at the anchor") {
    EwcBank bank(0.7);
    const ArrayXd anchor = random_vector(6, 31);
    bank.register_task(anchor, ArrayXd(random_vector(6, 32, 0.0, 2.0)));
    CHECK(bank.penalty(anchor) == 0.0);
    CHECK((bank.penalty_gradient(anchor) == 0.0).all());
  }
  SUBCASE("one-parameter example: alpha=1, F=2, displacement 3 scores 9") {
    EwcBank bank(1.0);
    bank.register_task(ArrayXd::Zero(1), ArrayXd::Constant(1, 2.0));
    CHECK(bank.penalty(ArrayXd::Constant(1, 3.0)) == 9.0);
    CHECK(bank.penalty_gradient(ArrayXd::Constant(1, 3.0))(0) == 6.0);
  }
  SUBCASE("multi-entry penalty is the sum of single-entry penalties") {
    const ArrayXd a1 = random_vector(8, 41), f1 = random_vector(8, 42, 0.0, 3.0);
    const ArrayXd a2 = random_vector(8, 43), f2 = random_vector(8, 44, 0.0, 3.0);
    const ArrayXd theta = random_vector(8, 45);
    EwcBank both(0.5), first(0.5), second(0.5);
    both.register_task(a1, f1);
    both.register_task(a2, f2);
    first.register_task(a1, f1);
    second.register_task(a2, f2);
    CHECK(both.penalty(theta) == first.penalty(theta) + second.penalty(theta));
    CHECK(bitwise_equal(both.penalty_gradient(theta),
                        ArrayXd(first.penalty_gradient(theta) +
                                second.penalty_gradient(theta))));
  }
  SUBCASE("penalty is nonnegative and strictly increasing in alpha off-anchor") {
    const ArrayXd anchor = random_vector(8, 51);
    const ArrayXd fisher = random_vector(8, 52, 0.1, 2.0);
    const ArrayXd theta = random_vector(8, 53) + 1.5;
    EwcBank weak(0.25), strong(0.75);
    weak.register_task(anchor, fisher);
    strong.register_task(anchor, fisher);
    CHECK(weak.penalty(theta) > 0.0);
    CHECK(strong.penalty(theta) > weak.penalty(theta));
  }
}

TEST_CASE("anchor bank bookkeeping: growth, consolidation, and validation") {
  const Index m = 10;
  EwcBank bank(0.5);
  CHECK(bank.empty());
  CHECK(bank.extra_floats() == 0);
  CHECK(bank.penalty(random_vector(m, 1)) == 0.0);
  CHECK((bank.penalty_gradient(random_vector(m, 1)) == 0.0).all());

  for (int k = 1; k <= 4; ++k) {
    bank.register_task(random_vector(m, 100 + k), random_vector(m, 200 + k, 0.0, 1.0));
    CHECK(bank.size() == static_cast<std::size_t>(k));
    CHECK(bank.extra_floats() == 2 * m * k);
  }

  SUBCASE("consolidation keeps the last anchor and sums importances") {
    ArrayXd fisher_sum = ArrayXd::Zero(m);
    for (const auto& e : bank.entries()) fisher_sum += e.fisher;
    const ArrayXd last_anchor = bank.entries().back().theta_star;
    bank.consolidate();
    REQUIRE(bank.size() == 1);
    CHECK(bank.extra_floats() == 2 * m);
    CHECK(bitwise_equal(bank.entries()[0].theta_star, last_anchor));
    CHECK(bitwise_equal(bank.entries()[0].fisher, fisher_sum));
  }
  SUBCASE("consolidating a single entry does not change the penalty") {
    EwcBank single(0.5);
    single.register_task(random_vector(m, 61), random_vector(m, 62, 0.0, 1.0));
    const ArrayXd theta = random_vector(m, 63);
    const double before = single.penalty(theta);
    single.consolidate();
    CHECK(single.penalty(theta) == before);
  }
  SUBCASE("consolidation changes the function when anchors differ") {
    // Entries (anchor 0, F=1) and (anchor 1, F=1) with alpha=1: at theta=1 the
    // multi-entry penalty is 0.5, but after consolidation the anchor moves to
    // 1 and the penalty there collapses to 0.
    EwcBank crafted(1.0);
    crafted.register_task(ArrayXd::Zero(1), ArrayXd::Ones(1));
    crafted.register_task(ArrayXd::Ones(1), ArrayXd::Ones(1));
    const ArrayXd at_one = ArrayXd::Ones(1);
    CHECK(crafted.penalty(at_one) == 0.5);
    crafted.consolidate();
    CHECK(crafted.penalty(at_one) == 0.0);
  }
  SUBCASE("invalid inputs are rejected") {
    CHECK_THROWS_AS(EwcBank(-0.1), std::invalid_argument);
    ArrayXd bad_fisher = random_vector(m, 71, 0.0, 1.0);
    bad_fisher(3) = -1e-9;
    CHECK_THROWS_AS(bank.register_task(random_vector(m, 72), bad_fisher),
                    std::invalid_argument);
    CHECK_THROWS_AS(bank.register_task(random_vector(m + 1, 73),
                                       random_vector(m + 1, 74, 0.0, 1.0)),
                    std::invalid_argument);
    CHECK_THROWS_AS(bank.penalty(random_vector(m + 2, 75)), std::invalid_argument);
    CHECK_THROWS_AS(bank.penalty_gradient(random_vector(m - 1, 76)),
                    std::invalid_argument);
  }
}

TEST_CASE("anchor-penalty gradient passes tight finite differences") {
  const Index m = 12;
  EwcBank bank(0.6);
  bank.register_task(random_vector(m, 81), random_vector(m, 82, 0.0, 2.0));
  bank.register_task(random_vector(m, 83), random_vector(m, 84, 0.0, 2.0));
  const auto report = finite_difference_check(
      [&bank](const ArrayXd& theta) { return bank.penalty(theta); },
      [&bank](const ArrayXd& theta) { return bank.penalty_gradient(theta); },
      random_vector(m, 85), 1e-5);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("path-integral accumulation follows the discrete work sum") {
  const Index m = 7;
  const ArrayXd theta0 = random_vector(m, 90);
  SiState state(theta0, 0.5, 1e-4);
  CHECK(state.param_count() == m);
  CHECK_FALSE(state.active());
  CHECK((state.omega() == 0.0).all());
  CHECK((state.omega_tilde() == 0.0).all());
  CHECK(bitwise_equal(state.theta_ref(), theta0));

  SUBCASE("single step: gradient 0.5 at step size 0.1 accumulates 0.025") {
    SiState s(ArrayXd::Zero(1), 1.0, 1e-3);
    s.accumulate(ArrayXd::Constant(1, 0.5), 0.1);
    CHECK(s.omega_tilde()(0) == doctest::Approx(0.025).epsilon(1e-14));
  }
  SUBCASE("zero gradients accumulate nothing") {
    state.accumulate(ArrayXd::Zero(m), 0.1);
    CHECK((state.omega_tilde() == 0.0).all());
  }
  SUBCASE("n identical steps match the loop oracle bit for bit") {
    const ArrayXd g = random_vector(m, 91);
    ArrayXd oracle = ArrayXd::Zero(m);
    for (int t = 0; t < 9; ++t) {
      state.accumulate(g, 0.05);
      oracle += g.square() * 0.05;
    }
    CHECK(bitwise_equal(state.omega_tilde(), oracle));
    CHECK((state.omega_tilde() - 9.0 * g.square() * 0.05).abs().maxCoeff() < 1e-15);
    CHECK((state.omega_tilde() >= 0.0).all());
  }
  SUBCASE("invalid steps are rejected") {
    CHECK_THROWS_AS(state.accumulate(random_vector(m, 92), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(state.accumulate(random_vector(m, 92), -0.1), std::invalid_argument);
    CHECK_THROWS_AS(state.accumulate(random_vector(m + 1, 93), 0.1),
                    std::invalid_argument);
  }
}

TEST_CASE("task boundaries convert accumulated work into importances") {
  SUBCASE("no accumulated work: importances unchanged, reference moves") {
    SiState state(ArrayXd::Zero(3), 0.5, 1e-4);
    const ArrayXd theta = random_vector(3, 95);
    state.end_task(theta);
    CHECK((state.omega() == 0.0).all());
    CHECK(bitwise_equal(state.theta_ref(), theta));
    CHECK_FALSE(state.active());
    CHECK(state.penalty(random_vector(3, 96)) == 0.0);
  }
  SUBCASE("one-parameter example: 0.025 work over a 0.5 move at xi=1e-3") {
    SiState state(ArrayXd::Zero(1), 1.0, 1e-3);
    state.accumulate(ArrayXd::Constant(1, 0.5), 0.1);
    state.end_task(ArrayXd::Constant(1, 0.5));
    CHECK(state.omega()(0) == doctest::Approx(0.0996).epsilon(1e-3));
    CHECK(state.omega()(0) == doctest::Approx(0.025 / 0.251).epsilon(1e-12));
    CHECK((state.omega_tilde() == 0.0).all());
    CHECK(state.theta_ref()(0) == 0.5);
    CHECK(state.active());
  }
  SUBCASE("zero parameter motion divides by the damping alone") {
    SiState state(ArrayXd::Zero(2), 0.5, 1e-4);
    const ArrayXd g = (ArrayXd(2) << 0.2, -0.4).finished();
    state.accumulate(g, 0.5);
    const ArrayXd work = state.omega_tilde();
    state.end_task(ArrayXd::Zero(2));
    CHECK(bitwise_equal(state.omega(), ArrayXd(work / 1e-4)));
  }
  SUBCASE("importances never decrease across boundaries") {
    SiState state(random_vector(4, 97), 0.5, 1e-4);
    ArrayXd prev = state.omega();
    for (int task = 0; task < 3; ++task) {
      for (int t = 0; t < 5; ++t) {
        state.accumulate(random_vector(4, 1000 + 10 * task + t), 0.1);
      }
      state.end_task(random_vector(4, 2000 + task));
      CHECK((state.omega() >= prev).all());
      CHECK((state.omega() >= 0.0).all());
      prev = state.omega();
    }
    CHECK(state.active());
  }
}

TEST_CASE("path-integral penalty evaluates its closed forms") {
  SUBCASE("one-parameter example: beta=0.5, omega=2, displacement 1 scores 0.5") {
    SiState state(ArrayXd::Zero(1), 0.5, 1e-4);
    state.restore(ArrayXd::Constant(1, 2.0), ArrayXd::Zero(1));
    CHECK(state.active());
    CHECK(state.penalty(ArrayXd::Ones(1)) == 0.5);
    CHECK(state.penalty_gradient(ArrayXd::Ones(1))(0) == 1.0);  // beta*omega*dtheta
    CHECK(state.penalty(ArrayXd::Zero(1)) == 0.0);
  }
  SUBCASE("first task has nothing to protect") {
    SiState state(random_vector(5, 98), 0.9, 1e-4);
    for (int i = 0; i < 3; ++i) {
      CHECK(state.penalty(random_vector(5, 300 + i)) == 0.0);
    }
  }
  SUBCASE("strictly increasing in beta off-reference") {
    const ArrayXd theta0 = ArrayXd::Zero(6);
    const ArrayXd omega = random_vector(6, 99, 0.5, 1.5);
    const ArrayXd theta = random_vector(6, 101) + 2.0;
    SiState weak(theta0, 0.2, 1e-4), strong(theta0, 0.8, 1e-4);
    weak.restore(omega, ArrayXd::Zero(6));
    strong.restore(omega, ArrayXd::Zero(6));
    CHECK(weak.penalty(theta) > 0.0);
    CHECK(strong.penalty(theta) > weak.penalty(theta));
  }
  SUBCASE("gradient passes tight finite differences") {
    SiState state(random_vector(9, 102), 0.7, 1e-4);
    for (int t = 0; t < 4; ++t) state.accumulate(random_vector(9, 110 + t), 0.1);
    state.end_task(random_vector(9, 115));
    const auto report = finite_difference_check(
        [&state](const ArrayXd& theta) { return state.penalty(theta); },
        [&state](const ArrayXd& theta) { return state.penalty_gradient(theta); },
        random_vector(9, 116), 1e-5);
    CHECK(report.max_rel_error < 1e-6);
  }
  SUBCASE("construction and restore validate their inputs") {
    CHECK_THROWS_AS(SiState(ArrayXd::Zero(2), -0.1, 1e-4), std::invalid_argument);
    CHECK_THROWS_AS(SiState(ArrayXd::Zero(2), 0.5, 0.0), std::invalid_argument);
    SiState state(ArrayXd::Zero(2), 0.5, 1e-4);
    CHECK_THROWS_AS(state.restore(ArrayXd::Constant(2, -1.0), ArrayXd::Zero(2)),
                    std::invalid_argument);
    CHECK_THROWS_AS(state.restore(ArrayXd::Zero(3), ArrayXd::Zero(3)),
                    std::invalid_argument);
    CHECK_THROWS_AS(state.penalty(ArrayXd::Zero(5)), std::invalid_argument);
  }
}

TEST_CASE("extra-float accounting: 3M flat for the path integral, 2M per anchor") {
  const Index m = 6;
  SiState state(ArrayXd::Zero(m), 0.5, 1e-4);
  for (int task = 1; task <= 8; task *= 2) {
    state.accumulate(random_vector(m, 120 + task), 0.1);
    state.end_task(random_vector(m, 130 + task));
    CHECK(state.extra_floats() == 3 * m);
  }
}

TEST_CASE("regimen state serialization round-trips bit for bit") {
  const Index m = 14;
  SUBCASE("anchor bank") {
    const std::string path = "test_reg_bank.bin";
    EwcBank bank(0.625);
    bank.register_task(random_vector(m, 140), random_vector(m, 141, 0.0, 2.0));
    bank.register_task(random_vector(m, 142), random_vector(m, 143, 0.0, 2.0));
    save_ewc_bank(bank, path);
    const EwcBank loaded = load_ewc_bank(path);
    CHECK(loaded.alpha() == 0.625);
    REQUIRE(loaded.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(bitwise_equal(loaded.entries()[k].theta_star, bank.entries()[k].theta_star));
      CHECK(bitwise_equal(loaded.entries()[k].fisher, bank.entries()[k].fisher));
    }
    const ArrayXd probe = random_vector(m, 144);
    CHECK(loaded.penalty(probe) == bank.penalty(probe));
    std::filesystem::remove(path);
  }
  SUBCASE("path-integral state, including the active flag") {
    const std::string path = "test_reg_si.bin";
    SiState state(random_vector(m, 150), 0.5, 2e-4);
    for (int t = 0; t < 3; ++t) state.accumulate(random_vector(m, 151 + t), 0.1);
    state.end_task(random_vector(m, 155));
    state.accumulate(random_vector(m, 156), 0.1);  // mid-task leftovers persist
    save_si_state(state, path);
    const SiState loaded = load_si_state(path);
    CHECK(loaded.beta() == 0.5);
    CHECK(loaded.xi() == 2e-4);
    CHECK(bitwise_equal(loaded.omega(), state.omega()));
    CHECK(bitwise_equal(loaded.omega_tilde(), state.omega_tilde()));
    CHECK(bitwise_equal(loaded.theta_ref(), state.theta_ref()));
    CHECK(loaded.active() == state.active());
    const ArrayXd probe = random_vector(m, 157);
    CHECK(loaded.penalty(probe) == state.penalty(probe));
    std::filesystem::remove(path);
  }
  SUBCASE("kind confusion is rejected") {
    const std::string bank_path = "test_reg_kind_a.bin";
    const std::string si_path = "test_reg_kind_b.bin";
    EwcBank bank(0.5);
    bank.register_task(random_vector(m, 160), random_vector(m, 161, 0.0, 1.0));
    save_ewc_bank(bank, bank_path);
    SiState state(random_vector(m, 162), 0.5, 1e-4);
    save_si_state(state, si_path);
    CHECK_THROWS_AS(load_si_state(bank_path), std::runtime_error);
    CHECK_THROWS_AS(load_ewc_bank(si_path), std::runtime_error);
    std::filesystem::remove(bank_path);
    std::filesystem::remove(si_path);
  }
}
