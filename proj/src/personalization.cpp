#include "fms/personalization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fms/errors.hpp"
#include "fms/optimizers.hpp"
#include "fms/rng.hpp"

namespace fms {

std::string_view to_string(PersonalizationOptimizer o) {
  return o == PersonalizationOptimizer::sgd ? "sgd" : "adam";
}

PersonalizationOptimizer parse_personalization_optimizer(std::string_view s) {
  if (s == "sgd") return PersonalizationOptimizer::sgd;
  if (s == "adam") return PersonalizationOptimizer::adam;
  throw ContractViolation("unknown personalization optimizer '" + std::string(s) + "'");
}

PersonalizationConfig PersonalizationConfig::adam_defaults(std::size_t epochs,
                                                           std::size_t batch_size) {
  PersonalizationConfig c;
  c.optimizer = PersonalizationOptimizer::adam;
  c.lr = 1e-3;
  c.epochs = epochs;
  c.batch_size = batch_size;
  return c;
}

void PersonalizationConfig::validate() const {
  if (!(lr >= 0.0)) throw ContractViolation("personalization.lr must be non-negative");
  if (batch_size == 0) throw ContractViolation("personalization.batch_size must be positive");
}

PersonalizationReport make_report(std::vector<ClientOutcome> outcomes) {
  std::sort(outcomes.begin(), outcomes.end(),
            [](const ClientOutcome& a, const ClientOutcome& b) { return a.client < b.client; });
  PersonalizationReport r;
  r.outcomes = std::move(outcomes);
  if (r.outcomes.empty()) throw ContractViolation("make_report: no clients");
  const double n = static_cast<double>(r.outcomes.size());
  // Sums are shifted by the first client's values so that identical
  // accuracies give an exact mean and a zero spread.
  const double i0 = r.outcomes.front().initial_acc, p0 = r.outcomes.front().personalized_acc;
  double si = 0.0, sp = 0.0;
  std::size_t negative = 0;
  for (const auto& o : r.outcomes) {
    si += o.initial_acc - i0;
    sp += o.personalized_acc - p0;
    if (o.personalized_acc < o.initial_acc) ++negative;
    if (o.diverged) ++r.diverged_count;
  }
  r.mean_initial = i0 + si / n;
  r.mean_personalized = p0 + sp / n;
  double vi = 0.0, vp = 0.0;
  for (const auto& o : r.outcomes) {
    vi += (o.initial_acc - r.mean_initial) * (o.initial_acc - r.mean_initial);
    vp += (o.personalized_acc - r.mean_personalized) * (o.personalized_acc - r.mean_personalized);
  }
  r.std_initial = std::sqrt(vi / n);
  r.std_personalized = std::sqrt(vp / n);
  r.negative_fraction = static_cast<double>(negative) / n;
  return r;
}

std::uint32_t predict_class(const ModelSpec& spec, const ParamVector& params,
                            std::span<const double> features) {
  const std::vector<double> out = predict(spec, params, features);
  std::uint32_t best = 0;
  for (std::uint32_t c = 1; c < out.size(); ++c)
    if (out[c] > out[best]) best = c;
  return best;
}

double evaluate_accuracy(const ModelSpec& spec, const ParamVector& params,
                         std::span<const Example> examples) {
  if (examples.empty()) throw ContractViolation("evaluate_accuracy: empty example set");
  std::size_t correct = 0;
  for (const Example& e : examples)
    if (predict_class(spec, params, e.features) == e.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

// One personalization epoch in place. Returns false (leaving params at the
// last finite iterate) when an update diverges.
bool personalize_epoch(const ModelSpec& spec, ParamVector& params, AdamState& adam,
                       const ClientDataset& client, const PersonalizationConfig& cfg,
                       RngStream& rng) {
  const ClientOptimizerConfig batching{cfg.lr, cfg.batch_size};
  for (const Batch& b : make_client_batches(client, 1, batching, rng)) {
    Gradient g;
    try {
      g = gradient(spec, params, b);
    } catch (const NumericError&) {
      return false;
    }
    ParamVector next = params;
    if (cfg.optimizer == PersonalizationOptimizer::sgd) {
      vec::axpy(-cfg.lr, g.values, next.values);
    } else {
      AdamState trial = adam;
      adam_step(next.values, g.values, trial, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
      if (next.all_finite()) adam = std::move(trial);
    }
    if (!next.all_finite()) return false;
    params = std::move(next);
  }
  return true;
}

RngStream personalize_stream(std::uint64_t seed, std::uint64_t tag, ClientId id) {
  return RngStream::derive(seed, StreamPurpose::personalize, tag, id.value);
}

}  // namespace

PersonalizedModel personalize(const ModelSpec& spec, const ParamVector& params,
                              const ClientDataset& client, const PersonalizationConfig& cfg,
                              RngStream& rng) {
  cfg.validate();
  PersonalizedModel out{params, false};
  if (cfg.epochs == 0) return out;
  if (client.train.empty()) throw ContractViolation("personalize: client has no train data");
  AdamState adam;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    if (!personalize_epoch(spec, out.params, adam, client, cfg, rng)) {
      out.diverged = true;
      break;
    }
  }
  return out;
}

PersonalizationReport eval_population(const ModelSpec& spec, const ParamVector& params,
                                      const FederatedDataset& ds, Population which,
                                      const PersonalizationConfig& cfg, std::uint64_t seed,
                                      std::uint64_t stream_tag) {
  const auto& ids = ds.ids(which);
  if (ids.empty()) throw ContractViolation("eval_population: no clients in the selected population");
  std::vector<ClientOutcome> outcomes;
  outcomes.reserve(ids.size());
  for (ClientId id : ids) {
    const ClientDataset& c = ds.client(id);
    if (c.test.empty())
      throw ContractViolation("eval_population: client " + std::to_string(id.value) +
                              " has no test data");
    RngStream rng = personalize_stream(seed, stream_tag, id);
    ClientOutcome o;
    o.client = id;
    o.n_train = c.train.size();
    o.n_test = c.test.size();
    o.initial_acc = evaluate_accuracy(spec, params, c.test);
    if (cfg.epochs == 0) {
      o.personalized_acc = o.initial_acc;
    } else {
      PersonalizedModel pm = personalize(spec, params, c, cfg, rng);
      o.diverged = pm.diverged;
      o.personalized_acc = evaluate_accuracy(spec, pm.params, c.test);
    }
    outcomes.push_back(o);
  }
  return make_report(std::move(outcomes));
}

std::vector<SweepRow> epochs_sweep(const ModelSpec& spec, const ParamVector& params,
                                   const FederatedDataset& ds, Population which,
                                   std::span<const NamedPersonalizer> optimizers,
                                   std::size_t max_epochs, std::uint64_t seed,
                                   std::uint64_t stream_tag, bool include_zero) {
  if (max_epochs == 0) throw ContractViolation("epochs_sweep: max_epochs must be at least 1");
  const auto& ids = ds.ids(which);
  if (ids.empty()) throw ContractViolation("epochs_sweep: no clients in the selected population");

  std::vector<SweepRow> rows;
  for (const NamedPersonalizer& opt : optimizers) {
    opt.config.validate();
    // by_epoch[e][client] for e = 0..max_epochs
    std::vector<std::vector<ClientOutcome>> by_epoch(max_epochs + 1);
    for (ClientId id : ids) {
      const ClientDataset& c = ds.client(id);
      if (c.test.empty() || c.train.empty())
        throw ContractViolation("epochs_sweep: client " + std::to_string(id.value) +
                                " needs train and test data");
      RngStream rng = personalize_stream(seed, stream_tag, id);
      ParamVector p = params;
      AdamState adam;
      bool diverged = false;
      const double initial = evaluate_accuracy(spec, params, c.test);
      by_epoch[0].push_back({id, initial, initial, c.train.size(), c.test.size(), false});
      for (std::size_t e = 1; e <= max_epochs; ++e) {
        if (!diverged && !personalize_epoch(spec, p, adam, c, opt.config, rng)) diverged = true;
        by_epoch[e].push_back(
            {id, initial, evaluate_accuracy(spec, p, c.test), c.train.size(), c.test.size(), diverged});
      }
    }
    for (std::size_t e = include_zero ? 0 : 1; e <= max_epochs; ++e) {
      const PersonalizationReport r = make_report(std::move(by_epoch[e]));
      rows.push_back({opt.name, e, r.mean_personalized, r.std_personalized});
    }
  }
  return rows;
}

}  // namespace fms
