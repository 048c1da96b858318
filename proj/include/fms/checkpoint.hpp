#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "fms/model.hpp"

namespace fms {

inline constexpr const char* kCheckpointVersion = "fms-ckpt/1";

/// Checkpoint file layout:
///
///   fms-ckpt/1
///   input_dim=<n>
///   layer_dims=<d1>,<d2>,...
///   activation=<name>
///   loss=<name>
///   [<extra key>=<value>]...
///   end
///   <u64 little-endian length><length x f64 little-endian>
struct Checkpoint {
  ModelSpec spec;
  ParamVector params;
  std::map<std::string, std::string> metadata;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FileNotFoundError, VersionError (wrong version tag or spec
/// mismatch against `expected`), or IoError on truncated payloads.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected);

namespace binio {
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void write_f64_array(std::ostream& os, std::span<const double> values);
std::vector<double> read_f64_array(std::istream& is);
}  // namespace binio

}  // namespace fms
