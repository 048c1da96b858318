#include "fms/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fms/checkpoint.hpp"
#include "fms/errors.hpp"
#include "fms/personalization.hpp"

namespace fms {

namespace fs = std::filesystem;
using json = nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  model = ModelSpec{dataset.synthetic.input_dim, {dataset.synthetic.num_classes},
                    Activation::identity, Loss::softmax_cross_entropy};
  stage1.round = RoundConfig::fedavg(5, 1, ClientOptimizerConfig{});
  stage1.rounds = 100;
  stage1.server = ServerOptimizerConfig{ServerOptimizerKind::momentum, 1.0, 0.9};
  stage2.round = RoundConfig::reptile(5, 1, ClientOptimizerConfig{});
  stage2.rounds = 0;
  stage2.server = ServerOptimizerConfig{ServerOptimizerKind::adam, 1e-3};
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw ContractViolation("format_double: conversion failed");
  return std::string(buf, end);
}

namespace {

// ---- config parsing -------------------------------------------------------

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::size_t size(const std::string& key, std::size_t dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_number_unsigned()) throw SchemaError(where(key) + " must be a non-negative integer");
    return v->get<std::size_t>();
  }

  std::uint64_t u64(const std::string& key, std::uint64_t dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_number_unsigned()) throw SchemaError(where(key) + " must be a non-negative integer");
    return v->get<std::uint64_t>();
  }

  double number(const std::string& key, double dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_number()) throw SchemaError(where(key) + " must be a number");
    return v->get<double>();
  }

  bool boolean(const std::string& key, bool dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_boolean()) throw SchemaError(where(key) + " must be true or false");
    return v->get<bool>();
  }

  std::string string(const std::string& key, const std::string& dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_string()) throw SchemaError(where(key) + " must be a string");
    return v->get<std::string>();
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> dflt) {
    const json* v = take(key);
    if (!v) return dflt;
    if (!v->is_array()) throw SchemaError(where(key) + " must be an array of integers");
    std::vector<std::size_t> out;
    for (const json& e : *v) {
      if (!e.is_number_unsigned()) throw SchemaError(where(key) + " must be an array of integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  Section child(const std::string& key) {
    const json* v = take(key);
    static const json empty = json::object();
    return Section(v ? *v : empty, path_.empty() ? key : path_ + "." + key);
  }

  /// Converts enum-parsing failures into schema errors that name the key.
  template <class F>
  auto enumerated(const std::string& key, const std::string& dflt, F parse) {
    const std::string s = string(key, dflt);
    try {
      return parse(s);
    } catch (const ContractViolation& e) {
      throw SchemaError(where(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw SchemaError("unknown key '" + where(k) + "'");
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json* take(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Rethrows module contract violations as schema errors for `what`.
template <class F>
void checked(const std::string& what, F f) {
  try {
    f();
  } catch (const ContractViolation& e) {
    throw SchemaError(what + ": " + e.what());
  }
}

StageConfig parse_stage(Section s, const StageConfig& dflt) {
  StageConfig st = dflt;
  const Algorithm alg =
      s.enumerated("algorithm", std::string(to_string(dflt.round.algorithm)), parse_algorithm);
  st.rounds = s.size("rounds", dflt.rounds);
  const std::size_t clients = s.size("clients_per_round", dflt.round.clients_per_round);

  Section cs = s.child("client");
  ClientOptimizerConfig client;
  client.lr = cs.number("lr", dflt.round.client.lr);
  client.batch_size = cs.size("batch_size", dflt.round.client.batch_size);

  const bool same_alg = alg == dflt.round.algorithm;
  switch (alg) {
    case Algorithm::fedavg:
      st.round = RoundConfig::fedavg(clients, cs.size("epochs", same_alg ? dflt.round.local_count : 1), client);
      break;
    case Algorithm::reptile:
      st.round = RoundConfig::reptile(clients, cs.size("steps", same_alg ? dflt.round.local_count : 1), client);
      break;
    case Algorithm::fedsgd:
      st.round = RoundConfig::fedsgd(clients, client);
      break;
    case Algorithm::fomaml:
      st.round = RoundConfig::fomaml(clients, s.size("fomaml_k", same_alg ? dflt.round.fomaml_k : 1),
                                     client);
      break;
  }
  cs.finish();
  st.round.weighting = s.enumerated("weighting", std::string(to_string(st.round.weighting)),
                                    parse_weighting);

  Section sv = s.child("server");
  ServerOptimizerConfig server;
  server.kind = sv.enumerated("kind", std::string(to_string(dflt.server.kind)),
                              parse_server_optimizer);
  const ServerOptimizerConfig& sd = dflt.server;
  server.lr = sv.number("lr", server.kind == sd.kind ? sd.lr : (server.kind == ServerOptimizerKind::adam ? 1e-3 : 1.0));
  server.momentum = sv.number("momentum", sd.momentum);
  server.adam_beta1 = sv.number("adam_beta1", sd.adam_beta1);
  server.adam_beta2 = sv.number("adam_beta2", sd.adam_beta2);
  server.adam_eps = sv.number("adam_eps", sd.adam_eps);
  sv.finish();
  st.server = server;
  s.finish();

  checked(s.where(), [&] {
    st.round.validate();
    st.server.validate();
  });
  return st;
}

json stage_json(const StageConfig& st) {
  json j;
  j["algorithm"] = to_string(st.round.algorithm);
  j["rounds"] = st.rounds;
  j["clients_per_round"] = st.round.clients_per_round;
  j["weighting"] = to_string(st.round.weighting);
  json client = {{"lr", st.round.client.lr}, {"batch_size", st.round.client.batch_size}};
  switch (st.round.algorithm) {
    case Algorithm::fedavg: client["epochs"] = st.round.local_count; break;
    case Algorithm::reptile: client["steps"] = st.round.local_count; break;
    case Algorithm::fedsgd: break;
    case Algorithm::fomaml: j["fomaml_k"] = st.round.fomaml_k; break;
  }
  j["client"] = client;
  json sv;
  sv["kind"] = to_string(st.server.kind);
  sv["lr"] = st.server.lr;
  if (st.server.kind == ServerOptimizerKind::momentum) sv["momentum"] = st.server.momentum;
  if (st.server.kind == ServerOptimizerKind::adam) {
    sv["adam_beta1"] = st.server.adam_beta1;
    sv["adam_beta2"] = st.server.adam_beta2;
    sv["adam_eps"] = st.server.adam_eps;
  }
  j["server"] = sv;
  return j;
}

std::string_view to_string(Population p) {
  return p == Population::train_clients ? "train_clients" : "eval_clients";
}

Population parse_population(std::string_view s) {
  if (s == "train_clients") return Population::train_clients;
  if (s == "eval_clients") return Population::eval_clients;
  throw ContractViolation("unknown population '" + std::string(s) + "'");
}

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "csv") return DatasetKind::csv;
  throw ContractViolation("unknown dataset kind '" + std::string(s) + "'");
}

json config_json(const ExperimentConfig& cfg, bool with_run_fields) {
  json j;
  json d;
  d["eval_fraction"] = cfg.dataset.eval_fraction;
  d["split_seed"] = cfg.dataset.split_seed;
  if (cfg.dataset.kind == DatasetKind::synthetic) {
    const SyntheticParams& p = cfg.dataset.synthetic;
    d["kind"] = "synthetic";
    d["seed"] = p.seed;
    d["num_clients"] = p.num_clients;
    d["classes_per_client"] = p.classes_per_client;
    d["examples_per_client"] = p.examples_per_client;
    d["input_dim"] = p.input_dim;
    d["num_classes"] = p.num_classes;
    d["heterogeneity"] = p.heterogeneity;
    d["class_separation"] = p.class_separation;
    d["noise_scale"] = p.noise_scale;
    d["style_scale"] = p.style_scale;
  } else {
    d["kind"] = "csv";
    d["path"] = cfg.dataset.csv_path.generic_string();
    d["seed"] = cfg.dataset.csv.seed;
    d["input_dim"] = cfg.dataset.csv.input_dim;
    d["num_classes"] = cfg.dataset.csv.num_classes;
    d["has_header"] = cfg.dataset.csv.has_header;
  }
  j["dataset"] = d;
  j["model"] = {{"layer_dims", cfg.model.layer_dims},
                {"activation", to_string(cfg.model.activation)},
                {"loss", to_string(cfg.model.loss)}};
  j["stage1"] = stage_json(cfg.stage1);
  j["stage2"] = stage_json(cfg.stage2);
  const PersonalizationConfig& pc = cfg.eval.personalization;
  json p;
  p["optimizer"] = to_string(pc.optimizer);
  p["lr"] = pc.lr;
  p["epochs"] = pc.epochs;
  p["batch_size"] = pc.batch_size;
  if (pc.optimizer == PersonalizationOptimizer::adam) {
    p["adam_beta1"] = pc.adam_beta1;
    p["adam_beta2"] = pc.adam_beta2;
    p["adam_eps"] = pc.adam_eps;
  }
  p["eval_every"] = cfg.eval.eval_every;
  p["population"] = to_string(cfg.eval.population);
  p["checkpoint_every"] = cfg.eval.checkpoint_every;
  j["personalization"] = p;
  if (with_run_fields) {
    j["seed"] = cfg.seed;
    j["replicas"] = cfg.replicas;
    j["output_dir"] = cfg.output_dir.generic_string();
  }
  return j;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---- file helpers ----------------------------------------------------------

std::string read_text_file(const fs::path& path) {
  if (!fs::exists(path)) throw FileNotFoundError("file not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << content;
  if (!os) throw IoError("write failed: " + path.string());
}

void refuse_existing(const fs::path& path, bool force) {
  if (!force && fs::exists(path))
    throw IoError(path.string() + " already exists; pass --force to overwrite");
}

std::string padded_round(std::size_t round) {
  std::ostringstream ss;
  ss << std::setw(6) << std::setfill('0') << round;
  return ss.str();
}

double parse_number(std::string_view s, const std::string& what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw SchemaError(what + ": '" + std::string(s) + "' is not a number");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string dataset_manifest(const FederatedDataset& ds, const ExperimentConfig& cfg,
                             const std::string& hash, std::uint64_t seed) {
  const DatasetSummary sum = summarize(ds);
  std::ostringstream os;
  os << "fms-dataset/1\n"
     << "config_hash=" << hash << '\n'
     << "seed=" << seed << '\n'
     << "kind=" << (cfg.dataset.kind == DatasetKind::synthetic ? "synthetic" : "csv") << '\n'
     << "input_dim=" << ds.input_dim << '\n'
     << "num_classes=" << ds.num_classes << '\n'
     << "clients=" << sum.num_clients << '\n'
     << "train_clients=" << sum.train_clients << '\n'
     << "eval_clients=" << sum.eval_clients << '\n'
     << "train_examples=" << sum.train_examples << '\n'
     << "test_examples=" << sum.test_examples << '\n'
     << "class_histogram=";
  for (std::size_t c = 0; c < sum.class_histogram.size(); ++c)
    os << (c ? "," : "") << sum.class_histogram[c];
  os << '\n';
  const std::set<ClientId> eval(ds.eval_client_ids.begin(), ds.eval_client_ids.end());
  for (const auto& [id, c] : ds.clients)
    os << "client " << id << ' ' << (eval.count(id) ? "eval" : "train") << " train=" << c.train.size()
       << " test=" << c.test.size() << '\n';
  return os.str();
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Section root(j, "");
  cfg.seed = root.u64("seed", cfg.seed);
  cfg.replicas = root.size("replicas", cfg.replicas);
  if (cfg.replicas == 0) throw SchemaError("replicas must be at least 1");
  cfg.output_dir = root.string("output_dir", cfg.output_dir.generic_string());

  Section d = root.child("dataset");
  cfg.dataset.kind = d.enumerated("kind", "synthetic", parse_dataset_kind);
  cfg.dataset.eval_fraction = d.number("eval_fraction", cfg.dataset.eval_fraction);
  if (!(cfg.dataset.eval_fraction >= 0.0 && cfg.dataset.eval_fraction < 1.0))
    throw SchemaError("dataset.eval_fraction must be in [0, 1)");
  cfg.dataset.split_seed = d.u64("split_seed", cfg.dataset.split_seed);
  std::size_t input_dim = 0, num_classes = 0;
  if (cfg.dataset.kind == DatasetKind::synthetic) {
    SyntheticParams& p = cfg.dataset.synthetic;
    p.seed = d.u64("seed", p.seed);
    p.num_clients = d.size("num_clients", p.num_clients);
    p.classes_per_client = d.size("classes_per_client", p.classes_per_client);
    p.examples_per_client = d.size("examples_per_client", p.examples_per_client);
    p.input_dim = d.size("input_dim", p.input_dim);
    p.num_classes = d.size("num_classes", p.num_classes);
    p.heterogeneity = d.number("heterogeneity", p.heterogeneity);
    p.class_separation = d.number("class_separation", p.class_separation);
    p.noise_scale = d.number("noise_scale", p.noise_scale);
    p.style_scale = d.number("style_scale", p.style_scale);
    if (p.num_clients == 0) throw SchemaError("dataset.num_clients must be positive");
    if (p.input_dim == 0) throw SchemaError("dataset.input_dim must be positive");
    if (p.num_classes < 2) throw SchemaError("dataset.num_classes must be at least 2");
    if (p.classes_per_client == 0 || p.classes_per_client > p.num_classes)
      throw SchemaError("dataset.classes_per_client must be in [1, num_classes]");
    if (p.examples_per_client < 2) throw SchemaError("dataset.examples_per_client must be at least 2");
    if (!(p.heterogeneity >= 0.0 && p.heterogeneity <= 1.0))
      throw SchemaError("dataset.heterogeneity must be in [0, 1]");
    input_dim = p.input_dim;
    num_classes = p.num_classes;
  } else {
    const std::string path = d.string("path", "");
    if (path.empty()) throw SchemaError("dataset.path is required for csv datasets");
    cfg.dataset.csv_path = path;
    cfg.dataset.csv.seed = d.u64("seed", 0);
    cfg.dataset.csv.input_dim = d.size("input_dim", 0);
    cfg.dataset.csv.num_classes = d.size("num_classes", 0);
    cfg.dataset.csv.has_header = d.boolean("has_header", false);
    if (cfg.dataset.csv.input_dim == 0) throw SchemaError("dataset.input_dim is required");
    if (cfg.dataset.csv.num_classes < 2) throw SchemaError("dataset.num_classes must be at least 2");
    input_dim = cfg.dataset.csv.input_dim;
    num_classes = cfg.dataset.csv.num_classes;
  }
  d.finish();

  Section m = root.child("model");
  cfg.model.input_dim = input_dim;
  cfg.model.layer_dims = m.sizes("layer_dims", {num_classes});
  cfg.model.activation = m.enumerated("activation", "identity", parse_activation);
  cfg.model.loss = m.enumerated("loss", "softmax_cross_entropy", parse_loss);
  m.finish();
  checked("model", [&] { cfg.model.validate(); });
  if (cfg.model.num_classes() != num_classes)
    throw SchemaError("model.layer_dims must end in dataset.num_classes (" +
                      std::to_string(num_classes) + ")");

  cfg.stage1 = parse_stage(root.child("stage1"), cfg.stage1);
  cfg.stage2 = parse_stage(root.child("stage2"), cfg.stage2);
  if (cfg.stage1.rounds + cfg.stage2.rounds == 0)
    throw SchemaError("stage1.rounds and stage2.rounds are both zero");

  Section p = root.child("personalization");
  PersonalizationConfig& pc = cfg.eval.personalization;
  pc.optimizer = p.enumerated("optimizer", "sgd", parse_personalization_optimizer);
  pc.lr = p.number("lr", pc.optimizer == PersonalizationOptimizer::adam ? 1e-3 : pc.lr);
  pc.epochs = p.size("epochs", pc.epochs);
  pc.batch_size = p.size("batch_size", pc.batch_size);
  pc.adam_beta1 = p.number("adam_beta1", pc.adam_beta1);
  pc.adam_beta2 = p.number("adam_beta2", pc.adam_beta2);
  pc.adam_eps = p.number("adam_eps", pc.adam_eps);
  cfg.eval.eval_every = p.size("eval_every", cfg.eval.eval_every);
  cfg.eval.population = p.enumerated("population", "eval_clients", parse_population);
  cfg.eval.checkpoint_every = p.size("checkpoint_every", cfg.eval.checkpoint_every);
  p.finish();
  checked("personalization", [&] { pc.validate(); });
  if (cfg.eval.population == Population::eval_clients && cfg.dataset.eval_fraction == 0.0)
    throw SchemaError("personalization.population is eval_clients but dataset.eval_fraction is 0");

  if (cfg.dataset.kind == DatasetKind::synthetic) {
    const std::size_t n = cfg.dataset.synthetic.num_clients;
    const auto held_out = static_cast<std::size_t>(cfg.dataset.eval_fraction * static_cast<double>(n));
    if (cfg.eval.population == Population::eval_clients && held_out == 0)
      throw SchemaError("dataset.eval_fraction holds out no clients");
    for (const StageConfig* st : {&cfg.stage1, &cfg.stage2})
      if (st->rounds > 0 && st->round.clients_per_round > n - held_out)
        throw SchemaError("clients_per_round (" + std::to_string(st->round.clients_per_round) +
                          ") exceeds the " + std::to_string(n - held_out) + " training clients");
  }
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_text_file(path)); }

std::string to_json(const ExperimentConfig& cfg) { return config_json(cfg, true).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& cfg) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << fnv1a(config_json(cfg, false).dump());
  return ss.str();
}

FederatedDataset build_dataset(const ExperimentConfig& cfg) {
  FederatedDataset ds = cfg.dataset.kind == DatasetKind::synthetic
                            ? generate_synthetic(cfg.dataset.synthetic)
                            : load_csv_dataset(cfg.dataset.csv_path, cfg.dataset.csv);
  return split_train_eval(std::move(ds), cfg.dataset.eval_fraction, cfg.dataset.split_seed);
}

std::string run_mode(const ExperimentConfig& cfg) {
  const std::string a(to_string(cfg.stage1.round.algorithm));
  const std::string b(to_string(cfg.stage2.round.algorithm));
  if (cfg.stage2.rounds == 0) return a + "-only";
  if (cfg.stage1.rounds == 0) return b + "-only";
  if (a == "fedavg" && b == "reptile") return "personalized-fedavg";
  return a + "+" + b;
}

// ---- metrics CSV --------------------------------------------------------------

void write_metrics_csv(const fs::path& path, const std::string& hash, std::uint64_t seed,
                       std::span<const EvalSnapshot> snapshots) {
  std::ostringstream os;
  os << "# config_hash=" << hash << " seed=" << seed << '\n'
     << "round,mean_initial_acc,std_initial_acc,mean_personalized_acc,std_personalized_acc,"
        "wallclock_ms\n";
  for (const EvalSnapshot& s : snapshots)
    os << s.round << ',' << format_double(s.mean_initial) << ',' << format_double(s.std_initial) << ','
       << format_double(s.mean_personalized) << ',' << format_double(s.std_personalized) << ','
       << format_double(s.wallclock_ms) << '\n';
  write_text_file(path, os.str());
}

RunMetrics read_metrics_csv(const fs::path& path) {
  std::istringstream is(read_text_file(path));
  RunMetrics m;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# config_hash=", 0) != 0)
    throw SchemaError(path.string() + ": missing '# config_hash=... seed=...' line");
  {
    std::istringstream hs(line.substr(2));
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("config_hash=", 0) == 0) m.config_hash = tok.substr(12);
      if (tok.rfind("seed=", 0) == 0) m.seed = std::stoull(tok.substr(5));
    }
  }
  if (!std::getline(is, line) || line.rfind("round,", 0) != 0)
    throw SchemaError(path.string() + ": missing column header");
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 6) throw ParseError(path.string() + ": expected 6 columns", lineno);
    const std::string what = path.string() + ":" + std::to_string(lineno);
    EvalSnapshot s;
    s.round = static_cast<std::size_t>(parse_number(cols[0], what));
    s.mean_initial = parse_number(cols[1], what);
    s.std_initial = parse_number(cols[2], what);
    s.mean_personalized = parse_number(cols[3], what);
    s.std_personalized = parse_number(cols[4], what);
    s.wallclock_ms = parse_number(cols[5], what);
    m.snapshots.push_back(s);
  }
  return m;
}

// ---- traces -------------------------------------------------------------------

void save_trace(const fs::path& path, const RoundTrace& trace, const std::string& hash,
                std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write trace " + path.string());
  os << kTraceVersion << '\n'
     << "round=" << trace.round << '\n'
     << "algorithm=" << to_string(trace.algorithm) << '\n'
     << "weighting=" << to_string(trace.weighting) << '\n'
     << "beta=" << format_double(trace.beta) << '\n'
     << "clients=" << trace.clients.size() << '\n'
     << "config_hash=" << hash << '\n'
     << "seed=" << seed << '\n'
     << "end\n";
  binio::write_f64_array(os, trace.aggregate);
  for (const ClientUpdateResult& c : trace.clients) {
    binio::write_u64(os, c.client.value);
    binio::write_f64(os, c.weight);
    binio::write_f64(os, c.beta);
    binio::write_f64_array(os, c.delta);
    binio::write_u64(os, c.step_gradients.size());
    for (const Gradient& g : c.step_gradients) binio::write_f64_array(os, g.values);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

RoundTrace load_trace(const fs::path& path) {
  if (!fs::exists(path)) throw FileNotFoundError("trace not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  std::string line;
  if (!std::getline(is, line) || line != kTraceVersion)
    throw VersionError(path.string() + ": expected " + kTraceVersion);
  std::map<std::string, std::string> header;
  while (std::getline(is, line) && line != "end") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(path.string() + ": malformed header line '" + line + "'");
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (line != "end") throw IoError(path.string() + ": truncated header");
  RoundTrace t;
  try {
    t.round = std::stoul(header.at("round"));
    t.algorithm = parse_algorithm(header.at("algorithm"));
    t.weighting = parse_weighting(header.at("weighting"));
    t.beta = std::stod(header.at("beta"));
    const std::size_t n = std::stoul(header.at("clients"));
    t.aggregate = binio::read_f64_array(is);
    for (std::size_t i = 0; i < n; ++i) {
      ClientUpdateResult c;
      c.client = ClientId{static_cast<std::uint32_t>(binio::read_u64(is))};
      c.weight = binio::read_f64(is);
      c.beta = binio::read_f64(is);
      c.delta = binio::read_f64_array(is);
      const std::uint64_t k = binio::read_u64(is);
      for (std::uint64_t s = 0; s < k; ++s) c.step_gradients.emplace_back(binio::read_f64_array(is));
      t.clients.push_back(std::move(c));
    }
    t.sampled.reserve(t.clients.size());
    for (const auto& c : t.clients) t.sampled.push_back(c.client);
  } catch (const std::out_of_range&) {
    throw IoError(path.string() + ": header is missing a required key");
  } catch (const std::invalid_argument&) {
    throw IoError(path.string() + ": header has a malformed value");
  }
  return t;
}

// ---- train ------------------------------------------------------------------------

std::vector<fs::path> cmd_train(const ExperimentConfig& base, const TrainOptions& opts,
                                std::ostream& log) {
  ExperimentConfig cfg = base;
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.replicas) cfg.replicas = *opts.replicas;
  if (opts.out) cfg.output_dir = *opts.out;
  if (cfg.replicas == 0) throw ContractViolation("replicas must be at least 1");
  const std::string hash = config_hash(cfg);

  std::vector<fs::path> dirs;
  for (std::size_t r = 0; r < cfg.replicas; ++r)
    dirs.push_back(cfg.output_dir / ("run_" + std::to_string(cfg.seed + r)));
  for (const fs::path& d : dirs) refuse_existing(d, opts.force);

  const FederatedDataset ds = build_dataset(cfg);
  StageConfig s1 = cfg.stage1, s2 = cfg.stage2;
  s1.round.trace = s2.round.trace = opts.trace;
  EvalConfig eval = cfg.eval;
  eval.record_wallclock = opts.wallclock;

  for (std::size_t r = 0; r < cfg.replicas; ++r) {
    const std::uint64_t seed = cfg.seed + r;
    const fs::path& dir = dirs[r];
    const TrainingRun run = run_personalized_fedavg(cfg.model, ds, s1, s2, eval, seed);

    if (fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    ExperimentConfig run_cfg = cfg;
    run_cfg.seed = seed;
    run_cfg.replicas = 1;
    write_text_file(dir / "config.json", to_json(run_cfg));
    write_text_file(dir / "dataset.txt", dataset_manifest(ds, cfg, hash, seed));
    write_metrics_csv(dir / "metrics.csv", hash, seed, run.snapshots);

    const auto meta = [&](std::size_t round) {
      return std::map<std::string, std::string>{
          {"config_hash", hash}, {"seed", std::to_string(seed)}, {"round", std::to_string(round)}};
    };
    if (!run.checkpoints.empty()) {
      fs::create_directories(dir / "checkpoints");
      for (const auto& [round, params] : run.checkpoints)
        save_checkpoint(dir / "checkpoints" / ("round_" + padded_round(round) + ".ckpt"),
                        {cfg.model, params, meta(round)});
    }
    save_checkpoint(dir / "final.ckpt", {cfg.model, run.final_params, meta(run.completed_rounds())});
    if (opts.trace) {
      fs::create_directories(dir / "traces");
      for (const RoundTrace& t : run.rounds)
        save_trace(dir / "traces" / ("round_" + padded_round(t.round) + ".trace"), t, hash, seed);
    }

    json manifest;
    manifest["format"] = "fms-run/1";
    manifest["config_hash"] = hash;
    manifest["seed"] = seed;
    manifest["mode"] = run_mode(cfg);
    manifest["stage1_rounds"] = cfg.stage1.rounds;
    manifest["stage2_rounds"] = cfg.stage2.rounds;
    manifest["completed_rounds"] = run.completed_rounds();
    manifest["traced"] = opts.trace;
    manifest["status"] = run.ok() ? "ok" : "failed";
    if (!run.ok()) manifest["failure"] = *run.failure;
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

    if (!run.ok()) throw NumericError(dir.string() + ": " + *run.failure);
    log << dir.string() << ": " << run.completed_rounds() << " rounds";
    if (!run.snapshots.empty()) {
      const EvalSnapshot& f = run.snapshots.back();
      log << ", initial " << format_mean_std(f.mean_initial, f.std_initial) << ", personalized "
          << format_mean_std(f.mean_personalized, f.std_personalized);
    }
    log << '\n';
  }
  return dirs;
}

// ---- personalize -------------------------------------------------------------------

PersonalizationReport cmd_personalize(const ExperimentConfig& cfg, const PersonalizeOptions& opts,
                                      std::ostream& log) {
  const Checkpoint ckpt = load_checkpoint(opts.checkpoint, cfg.model);
  const auto meta = [&](const char* key) -> std::optional<std::string> {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) return std::nullopt;
    return it->second;
  };
  std::uint64_t seed = cfg.seed;
  if (auto s = meta("seed")) seed = std::stoull(*s);
  if (opts.seed) seed = *opts.seed;
  std::uint64_t tag = 0;
  if (auto r = meta("round")) tag = std::stoull(*r);

  PersonalizationConfig pc = cfg.eval.personalization;
  if (opts.epochs) pc.epochs = *opts.epochs;
  const fs::path out = opts.out ? *opts.out : opts.checkpoint.parent_path() / "personalization";
  const fs::path report_path = out / "report.csv";
  const fs::path summary_path = out / "summary.json";
  const fs::path sweep_path = out / "sweep.csv";
  refuse_existing(report_path, opts.force);
  refuse_existing(summary_path, opts.force);
  if (opts.sweep_max_epochs) refuse_existing(sweep_path, opts.force);

  const std::string hash = config_hash(cfg);
  const std::string header = "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
  const FederatedDataset ds = build_dataset(cfg);
  const PersonalizationReport rep =
      eval_population(cfg.model, ckpt.params, ds, cfg.eval.population, pc, seed, tag);

  std::ostringstream csv;
  csv << header << "client_id,n_train,n_test,initial_acc,personalized_acc,diverged\n";
  for (const ClientOutcome& o : rep.outcomes)
    csv << o.client << ',' << o.n_train << ',' << o.n_test << ',' << format_double(o.initial_acc)
        << ',' << format_double(o.personalized_acc) << ',' << (o.diverged ? 1 : 0) << '\n';

  json summary;
  summary["config_hash"] = hash;
  summary["seed"] = seed;
  summary["checkpoint"] = opts.checkpoint.generic_string();
  if (auto h = meta("config_hash")) summary["checkpoint_config_hash"] = *h;
  summary["population"] = to_string(cfg.eval.population);
  summary["clients"] = rep.outcomes.size();
  summary["epochs"] = pc.epochs;
  summary["optimizer"] = to_string(pc.optimizer);
  summary["mean_initial_acc"] = rep.mean_initial;
  summary["std_initial_acc"] = rep.std_initial;
  summary["mean_personalized_acc"] = rep.mean_personalized;
  summary["std_personalized_acc"] = rep.std_personalized;
  summary["negative_fraction"] = rep.negative_fraction;
  summary["diverged_clients"] = rep.diverged_count;

  std::string sweep_text;
  if (opts.sweep_max_epochs) {
    PersonalizationConfig adam = PersonalizationConfig::adam_defaults(0, pc.batch_size);
    PersonalizationConfig sgd = pc;
    sgd.optimizer = PersonalizationOptimizer::sgd;
    if (pc.optimizer != PersonalizationOptimizer::sgd) sgd.lr = cfg.stage1.round.client.lr;
    const std::vector<NamedPersonalizer> opt_list{{"sgd", sgd}, {"adam", adam}};
    const auto rows = epochs_sweep(cfg.model, ckpt.params, ds, cfg.eval.population, opt_list,
                                   *opts.sweep_max_epochs, seed, tag);
    std::ostringstream sw;
    sw << header << "optimizer,epochs,mean_personalized_acc,std_personalized_acc\n";
    for (const SweepRow& r : rows)
      sw << r.optimizer << ',' << r.epochs << ',' << format_double(r.mean_personalized) << ','
         << format_double(r.std_personalized) << '\n';
    sweep_text = sw.str();
  }

  fs::create_directories(out);
  write_text_file(report_path, csv.str());
  write_text_file(summary_path, summary.dump(2) + "\n");
  if (opts.sweep_max_epochs) write_text_file(sweep_path, sweep_text);
  log << rep.outcomes.size() << " clients: initial "
      << format_mean_std(rep.mean_initial, rep.std_initial) << ", personalized "
      << format_mean_std(rep.mean_personalized, rep.std_personalized) << ", negative fraction "
      << format_double(rep.negative_fraction) << '\n';
  return rep;
}

// ---- decompose ------------------------------------------------------------------------

DecompositionReport cmd_decompose(const DecomposeOptions& opts, std::ostream& log) {
  const fs::path traces = opts.run_dir / "traces";
  if (!fs::exists(opts.run_dir / "manifest.json"))
    throw FileNotFoundError(opts.run_dir.string() + " is not a run directory (no manifest.json)");
  std::vector<fs::path> files;
  if (fs::exists(traces))
    for (const auto& e : fs::directory_iterator(traces))
      if (e.path().extension() == ".trace") files.push_back(e.path());
  if (files.empty())
    throw PreconditionError(opts.run_dir.string() +
                            " has no round traces; retrain with `fms train <config> --trace` to "
                            "record per-step client gradients");
  std::sort(files.begin(), files.end());
  fs::path chosen = files.back();
  if (opts.round) {
    chosen = traces / ("round_" + padded_round(*opts.round) + ".trace");
    if (!fs::exists(chosen))
      throw PreconditionError("round " + std::to_string(*opts.round) + " was not traced in " +
                              opts.run_dir.string());
  }
  const RoundTrace trace = load_trace(chosen);
  const fs::path out = opts.run_dir / ("decompose_round_" + padded_round(trace.round) + ".txt");
  refuse_existing(out, opts.force);

  const DecompositionReport rep = decompose_round(trace);
  std::ostringstream os;
  os << std::setprecision(6) << std::scientific;
  os << "round " << rep.round << ", " << rep.clients << " clients, K=" << rep.steps
     << ", beta=" << format_double(trace.beta) << '\n';
  os << "|g_fedavg|      " << vec::norm(rep.g_fedavg) << '\n';
  os << "|g_fedsgd|      " << vec::norm(rep.g_fedsgd) << '\n';
  for (std::size_t j = 0; j < rep.g_fomaml_by_j.size(); ++j)
    os << "|g_fomaml(" << j + 1 << ")|" << std::string(j + 1 < 10 ? 4 : 3, ' ')
       << vec::norm(rep.g_fomaml_by_j[j]) << '\n';
  os << "fomaml terms    " << rep.g_fomaml_by_j.size() << '\n';
  os << "residual        " << rep.residual_norm << '\n';
  os << "status          " << (rep.residual_norm <= kDecomposeGuard ? "ok" : "FAILED") << '\n';
  write_text_file(out, os.str());
  log << os.str();
  return rep;
}

// ---- report ---------------------------------------------------------------------------

namespace {

std::string aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      line += r[c];
      if (c + 1 < r.size()) line += std::string(width[c] - r[c].size() + 2, ' ');
    }
    out += line + '\n';
  }
  return out;
}

}  // namespace

std::string cmd_report(const ReportOptions& opts, std::ostream& log) {
  if (opts.run_dirs.empty()) throw ContractViolation("report needs at least one run directory");
  if (opts.thresholds.empty()) throw ContractViolation("report needs at least one threshold");

  struct Loaded {
    fs::path dir;
    RunMetrics metrics;
  };
  std::vector<Loaded> runs;
  for (const fs::path& dir : opts.run_dirs) {
    const json manifest = json::parse(read_text_file(dir / "manifest.json"), nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("config_hash"))
      throw SchemaError((dir / "manifest.json").string() + " is not a run manifest");
    RunMetrics m = read_metrics_csv(dir / "metrics.csv");
    if (m.config_hash != manifest["config_hash"].get<std::string>())
      throw SchemaError(dir.string() + ": metrics.csv and manifest.json disagree on the config hash");
    if (m.snapshots.empty()) throw SchemaError(dir.string() + ": metrics.csv has no rows");
    runs.push_back({dir, std::move(m)});
  }
  std::sort(runs.begin(), runs.end(), [](const Loaded& a, const Loaded& b) {
    return a.metrics.seed != b.metrics.seed ? a.metrics.seed < b.metrics.seed : a.dir < b.dir;
  });
  for (const Loaded& r : runs)
    if (r.metrics.config_hash != runs.front().metrics.config_hash) {
      std::string msg = "refusing to aggregate runs from different configs:";
      for (const Loaded& x : runs) msg += "\n  " + x.dir.string() + "  config_hash=" + x.metrics.config_hash;
      throw PreconditionError(msg);
    }

  std::vector<std::vector<EvalSnapshot>> snaps;
  for (const Loaded& r : runs) snaps.push_back(r.metrics.snapshots);
  const ReplicaAggregate init = aggregate_replicas(snaps, Metric::initial);
  const ReplicaAggregate pers = aggregate_replicas(snaps, Metric::personalized);

  std::string seeds;
  for (std::size_t i = 0; i < runs.size(); ++i)
    seeds += (i ? ", " : "") + std::to_string(runs[i].metrics.seed);

  std::vector<std::vector<std::string>> table{{"round", "initial", "personalized"}};
  std::ostringstream csv;
  csv << "# config_hash=" << runs.front().metrics.config_hash << " seeds=";
  for (std::size_t i = 0; i < runs.size(); ++i) csv << (i ? ";" : "") << runs[i].metrics.seed;
  csv << '\n' << "round,mean_initial_acc,std_initial_acc,mean_personalized_acc,std_personalized_acc\n";
  for (std::size_t i = 0; i < init.rounds.size(); ++i) {
    const ReplicaStats& a = init.per_snapshot[i];
    const ReplicaStats& b = pers.per_snapshot[i];
    table.push_back({std::to_string(init.rounds[i]), format_mean_std(a.mean, a.std),
                     format_mean_std(b.mean, b.std)});
    csv << init.rounds[i] << ',' << format_double(a.mean) << ',' << format_double(a.std) << ','
        << format_double(b.mean) << ',' << format_double(b.std) << '\n';
  }

  std::vector<std::vector<std::string>> thr{{"threshold", "rounds_initial", "rounds_personalized"}};
  std::ostringstream thr_csv;
  thr_csv << "threshold,metric,mean_round,reached,per_replica\n";
  for (double t : opts.thresholds) {
    std::vector<std::string> row{format_double(t)};
    for (Metric m : {Metric::initial, Metric::personalized}) {
      std::vector<std::optional<std::size_t>> per;
      for (const auto& s : snaps) per.push_back(rounds_to_threshold(s, m, t));
      const ThresholdStats st = threshold_stats(per, t);
      row.push_back(format_threshold(st));
      thr_csv << format_double(t) << ',' << (m == Metric::initial ? "initial" : "personalized") << ','
              << (st.mean_round ? format_double(*st.mean_round) : "") << ',' << st.reached_count << ',';
      for (std::size_t i = 0; i < per.size(); ++i)
        thr_csv << (i ? ";" : "") << (per[i] ? std::to_string(*per[i]) : "never");
      thr_csv << '\n';
    }
    thr.push_back(row);
  }

  std::string text = "config_hash  " + runs.front().metrics.config_hash + "\n" + "runs         " +
                     std::to_string(runs.size()) + " (seeds " + seeds + ")\n\n" + aligned(table) +
                     "\n" + aligned(thr);

  if (opts.out) {
    refuse_existing(*opts.out / "report.txt", opts.force);
    refuse_existing(*opts.out / "report.csv", opts.force);
    fs::create_directories(*opts.out);
    write_text_file(*opts.out / "report.txt", text);
    write_text_file(*opts.out / "report.csv", csv.str() + "\n" + thr_csv.str());
  }
  log << text;
  return text;
}

}  // namespace fms
