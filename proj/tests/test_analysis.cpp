#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fms/analysis.hpp"
#include "fms/errors.hpp"
#include "fms/federation.hpp"
#include "fms/rng.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fms;

namespace {

const ModelSpec kMlp{8, {16, 4}, Activation::tanh, Loss::softmax_cross_entropy};

RoundTrace traced_round(RoundConfig cfg, std::uint64_t seed, const FederatedDataset& ds) {
  cfg.trace = true;
  const ParamVector theta = initial_params_for(kMlp, seed);
  return run_round(kMlp, theta, ds, cfg, ServerOptimizerState::fresh({}, theta.dim()), seed, 1).trace;
}

EvalSnapshot snap(std::size_t round, double initial, double personalized = 0.0) {
  EvalSnapshot s;
  s.round = round;
  s.mean_initial = initial;
  s.mean_personalized = personalized;
  return s;
}

template <class F>
void check_message(F&& f, const std::string& needle) {
  try {
    f();
    FAIL("expected PreconditionError");
  } catch (const PreconditionError& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("decomposition of a traced round") {
  const FederatedDataset ds = split_train_eval(testing::small_dataset(4, 30, 8, 4, 42), 0.0, 1);

  SUBCASE("T = 3, K = 4: residual within tolerance") {
    const auto d = decompose_round(traced_round(RoundConfig::reptile(3, 4, {0.05, 6}), 42, ds));
    CHECK(d.clients == 3);
    CHECK(d.steps == 4);
    CHECK(d.g_fomaml_by_j.size() == 3);
    CHECK(d.residual_norm <= kDecompositionTolerance);
  }
  SUBCASE("uniform FedAvg over equal clients decomposes the same way") {
    RoundConfig cfg = RoundConfig::fedavg(4, 2, {0.05, 6});
    cfg.weighting = Weighting::uniform;
    const auto d = decompose_round(traced_round(cfg, 3, ds));
    CHECK(d.steps == 8);
    CHECK(d.residual_norm <= kDecompositionTolerance);
  }
  SUBCASE("K = 1: FedAvg is FedSGD, no FOMAML terms") {
    const auto d = decompose_round(traced_round(RoundConfig::reptile(2, 1, {0.05, 6}), 5, ds));
    CHECK(d.g_fomaml_by_j.empty());
    CHECK(d.residual_norm <= kDecompositionTolerance);
  }
  SUBCASE("beta = 0: every term vanishes") {
    const auto d = decompose_round(traced_round(RoundConfig::reptile(3, 4, {0.0, 6}), 5, ds));
    CHECK(vec::norm(d.g_fedavg) == 0.0);
    CHECK(vec::norm(d.g_fedsgd) == 0.0);
    for (const auto& g : d.g_fomaml_by_j) CHECK(vec::norm(g) == 0.0);
  }
  SUBCASE("FedSGD and FOMAML(j) terms match their own definitions") {
    const RoundTrace t = traced_round(RoundConfig::reptile(3, 4, {0.05, 6}), 8, ds);
    const auto d = decompose_round(t);
    CHECK(d.g_fedsgd == fomaml_update(t.clients, 0));
    for (std::size_t j = 1; j < 4; ++j) CHECK(d.g_fomaml_by_j[j - 1] == fomaml_update(t.clients, j));
  }
  SUBCASE("random rounds across seeds") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto d = decompose_round(traced_round(RoundConfig::reptile(3, 2 + s % 5, {0.1, 5}), s, ds));
      CHECK(d.residual_norm <= kDecompositionTolerance);
    }
  }
  SUBCASE("data-proportional weights with unequal clients are refused") {
    FederatedDataset uneven = ds;
    uneven.clients[{2}].train.resize(11);
    check_message([&] { decompose_round(traced_round(RoundConfig::fedavg(4, 1, {0.05, 6}), 1, uneven)); },
                  "weight");
  }
  SUBCASE("FOMAML rounds are refused") {
    CHECK_THROWS_AS(decompose_round(traced_round(RoundConfig::fomaml(2, 2, {0.05, 6}), 1, ds)),
                    PreconditionError);
  }
  SUBCASE("untraced rounds are refused") {
    const ParamVector theta = initial_params_for(kMlp, 1);
    const RoundTrace t = run_round(kMlp, theta, ds, RoundConfig::reptile(2, 3, {0.05, 6}),
                                   ServerOptimizerState::fresh({}, theta.dim()), 1, 1)
                             .trace;
    check_message([&] { decompose_round(t); }, "tracing");
  }
}

TEST_CASE("FOMAML-MAML gap against the quadratic closed form") {
  const ModelSpec spec{3, {2}, Activation::identity, Loss::quadratic};
  const auto ex = testing::random_examples(3, 2, 30, 61);
  const oracle::Quadratic q(spec, ex);
  const ParamVector theta = testing::random_params(spec, 61);
  const Eigen::VectorXd t = oracle::to_eigen(theta.values);
  const Batch batch(ex);
  const double beta = 0.5 / q.lambda_max();

  auto gap_at = [&](double b, int k) {
    const std::vector<Batch> steps(static_cast<std::size_t>(k), batch);
    return fomaml_maml_gap(spec, theta, steps, batch, b);
  };

  SUBCASE("both gradients match their closed forms") {
    for (int k : {1, 3, 5}) {
      const GapResult g = gap_at(beta, k);
      CHECK(oracle::rel_diff(oracle::to_eigen(g.maml.values), q.maml_gradient(t, beta, k)) < 1e-6);
      CHECK(oracle::rel_diff(oracle::to_eigen(g.fomaml.values), q.fomaml_gradient(t, beta, k)) < 1e-12);
      const double closed = (q.maml_gradient(t, beta, k) - q.fomaml_gradient(t, beta, k)).norm();
      CHECK(g.gap_norm == doctest::Approx(closed).epsilon(1e-4));
    }
  }
  SUBCASE("gap halves with beta for small steps") {
    const double small = 0.05 / q.lambda_max();
    const double ratio = gap_at(small / 2, 3).gap_norm / gap_at(small, 3).gap_norm;
    CHECK(ratio >= 0.3);
    CHECK(ratio <= 0.7);
    const double tiny = 0.002 / q.lambda_max();
    CHECK(gap_at(tiny / 2, 3).gap_norm / gap_at(tiny, 3).gap_norm == doctest::Approx(0.5).epsilon(0.01));
  }
  SUBCASE("K = 0: no adaptation, no gap") {
    const GapResult g = gap_at(beta, 0);
    CHECK(g.gap_norm < 1e-6 * vec::norm(g.fomaml.values));
  }
  SUBCASE("tiny beta: tiny gap") {
    CHECK(gap_at(1e-6, 3).gap_norm < 1e-4 * vec::norm(gap_at(1e-6, 3).fomaml.values));
  }
}

TEST_CASE("rounds to threshold") {
  const std::vector<EvalSnapshot> s{snap(1, 0.2), snap(2, 0.5), snap(7, 0.81), snap(9, 0.79), snap(12, 0.9)};
  CHECK(rounds_to_threshold(s, Metric::initial, 0.8) == 7u);
  CHECK(rounds_to_threshold(s, Metric::initial, 0.1) == 1u);
  CHECK_FALSE(rounds_to_threshold(s, Metric::initial, 0.95).has_value());
  CHECK_FALSE(rounds_to_threshold(s, Metric::personalized, 0.5).has_value());
  CHECK_THROWS_AS(rounds_to_threshold(std::span<const EvalSnapshot>{}, Metric::initial, 0.5), ContractViolation);

  SUBCASE("monotone in the threshold") {
    RngStream rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<EvalSnapshot> t;
      for (std::size_t r = 1; r <= 20; ++r) t.push_back(snap(r * 5, rng.uniform()));
      const double lo = rng.uniform(), hi = lo + (1 - lo) * rng.uniform();
      const auto a = rounds_to_threshold(t, Metric::initial, lo);
      const auto b = rounds_to_threshold(t, Metric::initial, hi);
      if (b) {
        REQUIRE(a.has_value());
        CHECK(*a <= *b);
      }
    }
  }
}

TEST_CASE("threshold formatting") {
  const std::vector<std::optional<std::size_t>> all{130, 140, 142};
  const auto s = threshold_stats(all, 0.8);
  CHECK(s.reached_count == 3);
  CHECK(format_threshold(s) == "137.3(3)");
  const std::vector<std::optional<std::size_t>> some{100, std::nullopt};
  CHECK(format_threshold(threshold_stats(some, 0.8)) == "100.0(1)");
  const std::vector<std::optional<std::size_t>> none{std::nullopt, std::nullopt};
  CHECK(format_threshold(threshold_stats(none, 0.8)) == "Never");
}

TEST_CASE("replica statistics") {
  SUBCASE("three values") {
    const auto r = replica_stats("acc", {0.78, 0.80, 0.82});
    CHECK(r.mean == doctest::Approx(0.80));
    CHECK(r.std == doctest::Approx(0.0163299316));
    CHECK(r.count == 3);
  }
  SUBCASE("one run has zero spread") {
    CHECK(replica_stats("acc", {0.7}).std == 0.0);
  }
  SUBCASE("identical runs") {
    const auto r = replica_stats("acc", {0.6, 0.6});
    CHECK(r.mean == 0.6);
    CHECK(r.std == 0.0);
  }
  SUBCASE("formatting") {
    CHECK(format_mean_std(0.78794, 0.03162) == "0.7879 (0.0316)");
    CHECK(format_mean_std(0.5, 0.0, 2) == "0.50 (0.00)");
  }
  SUBCASE("run order does not matter") {
    RngStream rng(5);
    std::vector<std::vector<EvalSnapshot>> runs(6);
    for (auto& r : runs)
      for (std::size_t k = 1; k <= 4; ++k) r.push_back(snap(k * 10, rng.uniform(), rng.uniform()));
    const auto a = aggregate_replicas(runs, Metric::personalized);
    std::reverse(runs.begin(), runs.end());
    std::swap(runs[1], runs[4]);
    const auto b = aggregate_replicas(runs, Metric::personalized);
    CHECK(a.rounds == std::vector<std::size_t>{10, 20, 30, 40});
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(a.per_snapshot[i].mean == b.per_snapshot[i].mean);
      CHECK(a.per_snapshot[i].std == b.per_snapshot[i].std);
    }
    CHECK(a.final.mean == a.per_snapshot.back().mean);
  }
  SUBCASE("mismatched schedules") {
    std::vector<std::vector<EvalSnapshot>> runs{{snap(10, 0.5)}, {snap(20, 0.5)}};
    CHECK_THROWS(aggregate_replicas(runs, Metric::initial));
  }
}

}  // TEST_SUITE
