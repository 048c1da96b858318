#include <doctest.h>

#include <algorithm>

#include "fms/errors.hpp"
#include "fms/federation.hpp"
#include "fms/personalization.hpp"
#include "fms/rng.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fms;

namespace {

ClientOutcome outcome(std::uint64_t id, double initial, double personalized) {
  ClientOutcome o;
  o.client = ClientId{static_cast<std::uint32_t>(id)};
  o.initial_acc = initial;
  o.personalized_acc = personalized;
  return o;
}

}  // namespace

TEST_SUITE("personalization") {

TEST_CASE("accuracy") {
  const ModelSpec spec{4, {3}, Activation::identity, Loss::softmax_cross_entropy};
  const auto ex = testing::random_examples(4, 3, 200, 3);

  SUBCASE("a model that always says class 0") {
    ParamVector p = ParamVector::zeros(spec.param_count());
    p.values[12] = 5.0;  // bias of class 0
    const double zeros = static_cast<double>(std::count_if(ex.begin(), ex.end(), [](const Example& e) { return e.label == 0; }));
    CHECK(evaluate_accuracy(spec, p, ex) == doctest::Approx(zeros / 200.0));
  }
  SUBCASE("all-zero parameters tie and resolve to class 0") {
    const ParamVector p = ParamVector::zeros(spec.param_count());
    for (const auto& e : ex) CHECK(predict_class(spec, p, e.features) == 0);
  }
  SUBCASE("matches a brute-force argmax over logits") {
    const ParamVector p = testing::random_params(spec, 9);
    std::size_t hits = 0;
    for (const auto& e : ex) {
      std::uint32_t best = 0;
      double best_v = -1e300;
      for (std::uint32_t c = 0; c < 3; ++c) {
        double v = p.values[12 + c];
        for (std::size_t i = 0; i < 4; ++i) v += p.values[c * 4 + i] * e.features[i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      hits += best == e.label;
    }
    CHECK(evaluate_accuracy(spec, p, ex) == doctest::Approx(static_cast<double>(hits) / 200.0));
  }
  SUBCASE("empty set has no accuracy") {
    CHECK_THROWS_AS(evaluate_accuracy(spec, ParamVector::zeros(15), {}), ContractViolation);
  }
}

TEST_CASE("personalize") {
  const ModelSpec spec{5, {6, 3}, Activation::tanh, Loss::softmax_cross_entropy};
  const FederatedDataset ds = testing::small_dataset(1, 40, 5, 3, 12);
  const ClientDataset& c = ds.client({0});
  const ParamVector theta = testing::random_params(spec, 12);

  SUBCASE("zero epochs returns theta exactly") {
    PersonalizationConfig cfg;
    cfg.epochs = 0;
    RngStream rng(1);
    CHECK(personalize(spec, theta, c, cfg, rng).params == theta);
  }
  SUBCASE("lr 0 leaves theta unchanged") {
    PersonalizationConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 7;
    RngStream rng(1);
    CHECK(personalize(spec, theta, c, cfg, rng).params == theta);
  }
  SUBCASE("divergence keeps the last finite iterate") {
    PersonalizationConfig cfg;
    cfg.lr = 1e308;
    cfg.epochs = 5;
    RngStream rng(1);
    const auto r = personalize(spec, theta, c, cfg, rng);
    CHECK(r.diverged);
    CHECK(r.params.all_finite());
  }
}

TEST_CASE("quadratic personalization over one full-batch epoch is one gradient step") {
  const ModelSpec spec{3, {2}, Activation::identity, Loss::quadratic};
  const FederatedDataset ds = testing::small_dataset(1, 25, 3, 2, 13);
  const ClientDataset& c = ds.client({0});
  const oracle::Quadratic q(spec, c.train);
  const ParamVector theta = testing::random_params(spec, 13);
  PersonalizationConfig cfg;
  cfg.lr = 0.1;
  cfg.epochs = 1;
  cfg.batch_size = 1000;
  RngStream rng(1);
  const auto got = personalize(spec, theta, c, cfg, rng).params;
  CHECK(oracle::rel_diff(oracle::to_eigen(got.values), q.trajectory(oracle::to_eigen(theta.values), 0.1, 1)) <
        1e-12);
}

TEST_CASE("report aggregates") {
  SUBCASE("population std and negative fraction") {
    const auto r = make_report({outcome(0, 0.5, 0.7), outcome(1, 0.6, 0.5), outcome(2, 0.7, 0.7)});
    CHECK(r.mean_initial == doctest::Approx(0.6));
    CHECK(r.std_initial == doctest::Approx(0.0816496580927726));
    CHECK(r.negative_fraction == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("identical clients give std 0") {
    const auto r = make_report({outcome(0, 0.4, 0.9), outcome(1, 0.4, 0.9), outcome(2, 0.4, 0.9)});
    CHECK(r.std_initial == 0.0);
    CHECK(r.std_personalized == 0.0);
    CHECK(r.negative_fraction == 0.0);
  }
  SUBCASE("client order does not matter") {
    std::vector<ClientOutcome> o;
    RngStream rng(4);
    for (std::uint64_t i = 0; i < 17; ++i) o.push_back(outcome(i, rng.uniform(), rng.uniform()));
    const auto a = make_report(o);
    std::reverse(o.begin(), o.end());
    std::swap(o[3], o[11]);
    const auto b = make_report(o);
    CHECK(a.mean_initial == b.mean_initial);
    CHECK(a.std_personalized == b.std_personalized);
    CHECK(a.negative_fraction == b.negative_fraction);
  }
  SUBCASE("empty population") {
    CHECK_THROWS_AS(make_report({}), ContractViolation);
  }
}

TEST_CASE("population evaluation") {
  const ModelSpec spec{5, {6, 3}, Activation::tanh, Loss::softmax_cross_entropy};
  const FederatedDataset ds = split_train_eval(testing::small_dataset(8, 30, 5, 3, 14), 0.5, 1);
  const ParamVector theta = testing::random_params(spec, 14);
  PersonalizationConfig cfg;
  cfg.lr = 0.05;
  cfg.batch_size = 8;

  SUBCASE("zero epochs: personalized equals initial") {
    cfg.epochs = 0;
    const auto r = eval_population(spec, theta, ds, Population::eval_clients, cfg, 3);
    CHECK(r.mean_personalized == r.mean_initial);
    CHECK(r.negative_fraction == 0.0);
  }
  SUBCASE("scores only the requested population") {
    const auto r = eval_population(spec, theta, ds, Population::eval_clients, cfg, 3);
    REQUIRE(r.outcomes.size() == ds.eval_client_ids.size());
    for (std::size_t i = 0; i < r.outcomes.size(); ++i) CHECK(r.outcomes[i].client == ds.eval_client_ids[i]);
  }
  SUBCASE("same seed and tag, same report") {
    cfg.epochs = 2;
    const auto a = eval_population(spec, theta, ds, Population::eval_clients, cfg, 3, 5);
    const auto b = eval_population(spec, theta, ds, Population::eval_clients, cfg, 3, 5);
    CHECK(a.mean_personalized == b.mean_personalized);
    CHECK(a.std_personalized == b.std_personalized);
  }
}

TEST_CASE("epochs sweep") {
  const ModelSpec spec{5, {6, 3}, Activation::tanh, Loss::softmax_cross_entropy};
  const FederatedDataset ds = split_train_eval(testing::small_dataset(6, 30, 5, 3, 15), 0.5, 1);
  const ParamVector theta = testing::random_params(spec, 15);
  PersonalizationConfig sgd;
  sgd.lr = 0.05;
  sgd.batch_size = 8;
  const std::vector<NamedPersonalizer> opts{{"sgd", sgd}, {"adam", PersonalizationConfig::adam_defaults(0, 8)}};
  const auto rows = epochs_sweep(spec, theta, ds, Population::eval_clients, opts, 4, 9, 2, true);
  REQUIRE(rows.size() == 10);

  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t k = 0; k <= 4; ++k) {
      const SweepRow& row = rows[o * 5 + k];
      CHECK(row.optimizer == opts[o].name);
      CHECK(row.epochs == k);
      PersonalizationConfig cfg = opts[o].config;
      cfg.epochs = k;
      const auto direct = eval_population(spec, theta, ds, Population::eval_clients, cfg, 9, 2);
      CHECK(row.mean_personalized == direct.mean_personalized);
      CHECK(row.std_personalized == direct.std_personalized);
      if (k == 0) CHECK(row.mean_personalized == direct.mean_initial);
    }
  }
}

TEST_CASE("personalizing a federated model helps on skewed clients") {
  SyntheticParams p;
  p.seed = 21;
  p.num_clients = 12;
  p.classes_per_client = 2;
  p.examples_per_client = 60;
  p.input_dim = 6;
  p.num_classes = 5;
  p.heterogeneity = 1.0;
  const FederatedDataset ds = split_train_eval(generate_synthetic(p), 0.25, 1);
  const ModelSpec spec{6, {12, 5}, Activation::tanh, Loss::softmax_cross_entropy};
  EvalConfig eval;
  eval.eval_every = 0;
  const StageConfig s1{RoundConfig::fedavg(3, 1, {0.05, 10}), 30, {ServerOptimizerKind::momentum, 1.0, 0.9}};
  const StageConfig s2{RoundConfig::reptile(3, 1, {}), 0, {ServerOptimizerKind::adam, 0.001}};
  const TrainingRun run = run_personalized_fedavg(spec, ds, s1, s2, eval, 1);
  REQUIRE(run.ok());

  PersonalizationConfig sgd;
  sgd.lr = 0.05;
  sgd.batch_size = 10;
  sgd.epochs = 5;
  const auto r = eval_population(spec, run.final_params, ds, Population::eval_clients, sgd, 1);
  CHECK(r.mean_personalized > r.mean_initial);

  // Fixed-lr SGD beats default Adam somewhere on the epoch grid.
  const std::vector<NamedPersonalizer> opts{{"sgd", sgd}, {"adam", PersonalizationConfig::adam_defaults(0, 10)}};
  const auto rows = epochs_sweep(spec, run.final_params, ds, Population::eval_clients, opts, 5, 1);
  bool sgd_wins = false;
  for (std::size_t k = 0; k < 5; ++k) sgd_wins |= rows[k].mean_personalized > rows[5 + k].mean_personalized;
  CHECK(sgd_wins);
}

}  // TEST_SUITE
