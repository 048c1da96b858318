#include "fms/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fms/errors.hpp"
#include "fms/rng.hpp"

namespace fms {

const ClientDataset& FederatedDataset::client(ClientId id) const {
  auto it = clients.find(id);
  if (it == clients.end())
    throw ContractViolation("unknown client id " + std::to_string(id.value));
  return it->second;
}

void FederatedDataset::validate() const {
  std::vector<ClientId> train = train_client_ids;
  std::vector<ClientId> eval = eval_client_ids;
  std::sort(train.begin(), train.end());
  std::sort(eval.begin(), eval.end());
  std::vector<ClientId> common;
  std::set_intersection(train.begin(), train.end(), eval.begin(), eval.end(),
                        std::back_inserter(common));
  if (!common.empty())
    throw ContractViolation("client " + std::to_string(common.front().value) +
                            " is both a train and an eval client");
  for (ClientId id : train_client_ids)
    if (client(id).train.empty())
      throw ContractViolation("training client " + std::to_string(id.value) + " has no train data");
  for (ClientId id : eval_client_ids) (void)client(id);
  for (const auto& [id, c] : clients) {
    for (const auto* split : {&c.train, &c.test}) {
      for (const Example& e : *split) {
        if (e.features.size() != input_dim)
          throw ContractViolation("client " + std::to_string(id.value) +
                                  ": feature length mismatch");
        if (e.label >= num_classes)
          throw ContractViolation("client " + std::to_string(id.value) + ": label out of range");
      }
    }
  }
}

std::size_t test_count_for(std::size_t n) {
  if (n < 2) return 0;
  return std::max<std::size_t>(1, n / 5);
}

namespace {

ClientDataset split_examples(std::vector<Example> examples) {
  const std::size_t n_test = test_count_for(examples.size());
  ClientDataset c;
  const auto cut = examples.begin() + static_cast<std::ptrdiff_t>(examples.size() - n_test);
  c.train.assign(std::make_move_iterator(examples.begin()), std::make_move_iterator(cut));
  c.test.assign(std::make_move_iterator(cut), std::make_move_iterator(examples.end()));
  return c;
}

}  // namespace

FederatedDataset generate_synthetic(const SyntheticParams& p) {
  if (p.num_clients == 0) throw ContractViolation("generate_synthetic: num_clients must be positive");
  if (p.num_classes < 2) throw ContractViolation("generate_synthetic: need at least two classes");
  if (p.classes_per_client == 0 || p.classes_per_client > p.num_classes)
    throw ContractViolation("generate_synthetic: classes_per_client must be in [1, num_classes]");
  if (p.examples_per_client < 2)
    throw ContractViolation("generate_synthetic: examples_per_client must be at least 2");
  if (p.input_dim == 0) throw ContractViolation("generate_synthetic: input_dim must be positive");
  if (!(p.heterogeneity >= 0.0 && p.heterogeneity <= 1.0))
    throw ContractViolation("generate_synthetic: heterogeneity must lie in [0, 1]");

  const std::size_t d = p.input_dim;
  const double h = p.heterogeneity;
  const double concentration = (1.0 - h) * 10.0 + 0.05;

  RngStream global = RngStream::derive(p.seed, StreamPurpose::synthetic_data, 0, 0);
  std::vector<std::vector<double>> means(p.num_classes, std::vector<double>(d));
  for (auto& m : means)
    for (double& v : m) v = p.class_separation * global.normal();

  FederatedDataset ds;
  ds.input_dim = d;
  ds.num_classes = p.num_classes;

  for (std::size_t ci = 0; ci < p.num_clients; ++ci) {
    RngStream rng = RngStream::derive(p.seed, StreamPurpose::synthetic_data, 1, ci);

    std::vector<std::uint32_t> classes(p.num_classes);
    std::iota(classes.begin(), classes.end(), 0u);
    rng.shuffle(std::span(classes));
    classes.resize(p.classes_per_client);
    std::sort(classes.begin(), classes.end());

    std::vector<double> probs(classes.size());
    for (double& q : probs) q = rng.gamma(concentration);
    double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    if (!(total > 0.0)) {
      std::fill(probs.begin(), probs.end(), 1.0);
      total = static_cast<double>(probs.size());
    }
    for (double& q : probs) q /= total;

    std::vector<double> style(d * d);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& s : style) s = p.style_scale * inv_sqrt_d * rng.normal();
    std::vector<double> shift(d);
    for (double& s : shift) s = p.style_scale * rng.normal();

    std::vector<Example> examples(p.examples_per_client);
    std::vector<double> z(d);
    for (Example& ex : examples) {
      double u = rng.uniform();
      std::size_t k = 0;
      while (k + 1 < probs.size() && u >= probs[k]) u -= probs[k++];
      ex.label = classes[k];
      for (std::size_t i = 0; i < d; ++i) z[i] = means[ex.label][i] + p.noise_scale * rng.normal();
      ex.features.resize(d);
      for (std::size_t i = 0; i < d; ++i) {
        double mixed = 0.0;
        for (std::size_t j = 0; j < d; ++j) mixed += style[i * d + j] * z[j];
        ex.features[i] = z[i] + h * mixed + h * shift[i];
      }
    }

    const ClientId id{static_cast<std::uint32_t>(ci)};
    ds.clients.emplace(id, split_examples(std::move(examples)));
    ds.train_client_ids.push_back(id);
  }
  return ds;
}

FederatedDataset load_csv_dataset(const std::filesystem::path& path, const CsvSchema& schema) {
  if (!std::filesystem::exists(path)) throw FileNotFoundError("dataset not found: " + path.string());
  if (schema.input_dim == 0 || schema.num_classes == 0)
    throw ContractViolation("csv schema needs positive input_dim and num_classes");
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());

  std::map<ClientId, std::vector<Example>> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_pending = schema.has_header;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (header_pending) {
      header_pending = false;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 3) throw ParseError("expected client_id,label,features...", line_no);

    auto parse_uint = [&](const std::string& s, const char* what) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        if (!s.empty() && s.front() == '-') throw std::invalid_argument(s);
        v = std::stoull(s, &pos);
      } catch (const std::exception&) {
        throw ParseError(std::string("malformed ") + what + " '" + s + "'", line_no);
      }
      if (pos != s.size()) throw ParseError(std::string("malformed ") + what + " '" + s + "'", line_no);
      return v;
    };
    const auto client = parse_uint(fields[0], "client id");
    const auto label = parse_uint(fields[1], "label");
    if (fields.size() - 2 != schema.input_dim)
      throw SchemaError("row " + std::to_string(line_no) + ": " + std::to_string(fields.size() - 2) +
                        " features, schema expects " + std::to_string(schema.input_dim));
    if (label >= schema.num_classes)
      throw SchemaError("row " + std::to_string(line_no) + ": label " + std::to_string(label) +
                        " >= num_classes " + std::to_string(schema.num_classes));
    Example ex;
    ex.label = static_cast<std::uint32_t>(label);
    ex.features.reserve(schema.input_dim);
    for (std::size_t i = 2; i < fields.size(); ++i) {
      std::size_t pos = 0;
      double v = 0.0;
      try {
        v = std::stod(fields[i], &pos);
      } catch (const std::exception&) {
        throw ParseError("malformed feature '" + fields[i] + "'", line_no);
      }
      if (pos != fields[i].size() || !std::isfinite(v))
        throw ParseError("malformed feature '" + fields[i] + "'", line_no);
      ex.features.push_back(v);
    }
    rows[ClientId{static_cast<std::uint32_t>(client)}].push_back(std::move(ex));
  }

  FederatedDataset ds;
  ds.input_dim = schema.input_dim;
  ds.num_classes = schema.num_classes;
  for (auto& [id, examples] : rows) {
    RngStream rng = RngStream::derive(schema.seed, StreamPurpose::csv_split, id.value);
    rng.shuffle(std::span(examples));
    ds.clients.emplace(id, split_examples(std::move(examples)));
    ds.train_client_ids.push_back(id);
  }
  return ds;
}

FederatedDataset split_train_eval(FederatedDataset ds, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0))
    throw ContractViolation("split_train_eval: eval_fraction must lie in [0, 1)");
  std::vector<ClientId> all;
  for (const auto& [id, c] : ds.clients) all.push_back(id);
  const auto n_eval =
      static_cast<std::size_t>(std::floor(eval_fraction * static_cast<double>(all.size())));
  RngStream rng = RngStream::derive(seed, StreamPurpose::train_eval_split);
  rng.shuffle(std::span(all));
  ds.eval_client_ids.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_eval));
  ds.train_client_ids.assign(all.begin() + static_cast<std::ptrdiff_t>(n_eval), all.end());
  std::sort(ds.eval_client_ids.begin(), ds.eval_client_ids.end());
  std::sort(ds.train_client_ids.begin(), ds.train_client_ids.end());
  return ds;
}

DatasetSummary summarize(const FederatedDataset& ds) {
  DatasetSummary s;
  s.num_clients = ds.clients.size();
  s.train_clients = ds.train_client_ids.size();
  s.eval_clients = ds.eval_client_ids.size();
  s.class_histogram.assign(ds.num_classes, 0);
  for (const auto& [id, c] : ds.clients) {
    s.train_examples += c.train.size();
    s.test_examples += c.test.size();
    for (const auto* split : {&c.train, &c.test})
      for (const Example& e : *split)
        if (e.label < ds.num_classes) ++s.class_histogram[e.label];
  }
  return s;
}

double label_total_variation(std::span<const Example> a, std::span<const Example> b,
                             std::size_t num_classes) {
  if (a.empty() || b.empty()) throw ContractViolation("label_total_variation: empty example set");
  std::vector<double> pa(num_classes, 0.0), pb(num_classes, 0.0);
  for (const Example& e : a) pa.at(e.label) += 1.0 / static_cast<double>(a.size());
  for (const Example& e : b) pb.at(e.label) += 1.0 / static_cast<double>(b.size());
  double tv = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) tv += std::abs(pa[c] - pb[c]);
  return 0.5 * tv;
}

}  // namespace fms
