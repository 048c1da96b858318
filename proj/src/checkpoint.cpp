#include "fms/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fms/errors.hpp"

namespace fms {

namespace binio {

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw IoError("unexpected end of binary payload");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

void write_f64_array(std::ostream& os, std::span<const double> values) {
  write_u64(os, values.size());
  for (double v : values) write_f64(os, v);
}

std::vector<double> read_f64_array(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (std::uint64_t{1} << 32)) throw IoError("implausible array length in binary payload");
  std::vector<double> out(n);
  for (auto& v : out) v = read_f64(is);
  return out;
}

}  // namespace binio

namespace {

std::string join_dims(const std::vector<std::size_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(dims[i]);
  }
  return s;
}

std::vector<std::size_t> parse_dims(const std::string& s) {
  std::vector<std::size_t> dims;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) dims.push_back(std::stoul(item));
  return dims;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.params.dim() != ckpt.spec.param_count())
    throw ContractViolation("checkpoint parameters do not match model spec");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << kCheckpointVersion << '\n'
     << "input_dim=" << ckpt.spec.input_dim << '\n'
     << "layer_dims=" << join_dims(ckpt.spec.layer_dims) << '\n'
     << "activation=" << to_string(ckpt.spec.activation) << '\n'
     << "loss=" << to_string(ckpt.spec.loss) << '\n';
  for (const auto& [k, v] : ckpt.metadata) os << k << '=' << v << '\n';
  os << "end\n";
  binio::write_f64_array(os, ckpt.params.values);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFoundError("checkpoint not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version '" + line + "' (expected " +
                       kCheckpointVersion + ")");
  Checkpoint ckpt;
  bool have_dims = false;
  bool have_layers = false;
  while (std::getline(is, line) && line != "end") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw VersionError("malformed checkpoint header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "input_dim") {
      ckpt.spec.input_dim = std::stoul(value);
      have_dims = true;
    } else if (key == "layer_dims") {
      ckpt.spec.layer_dims = parse_dims(value);
      have_layers = true;
    } else if (key == "activation") {
      ckpt.spec.activation = parse_activation(value);
    } else if (key == "loss") {
      ckpt.spec.loss = parse_loss(value);
    } else {
      ckpt.metadata[key] = value;
    }
  }
  if (line != "end" || !have_dims || !have_layers)
    throw VersionError("incomplete checkpoint header in " + path.string());
  ckpt.params = ParamVector(binio::read_f64_array(is));
  if (ckpt.params.dim() != ckpt.spec.param_count())
    throw VersionError("checkpoint payload length does not match its model spec");
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.spec == expected))
    throw VersionError("checkpoint model spec does not match the configured model");
  return ckpt;
}

}  // namespace fms
