#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntklab/data.hpp"
#include "ntklab/experiments.hpp"
#include "ntklab/flow.hpp"
#include "ntklab/net.hpp"

namespace ntklab::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kResultsEnv = "NTKLAB_RESULTS";

enum ExitCode : int {
  exit_ok = 0,
  exit_validation = 1,
  exit_max_steps = 2,
  exit_diverged = 3,
  exit_runtime = 4,
};

/// Invalid configuration; `key()` is the offending "section.key".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message);
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Effective configuration: {section: {key: value}} with typed values.
using Config = nlohmann::json;

Config default_config();
/// Defaults overlaid with an INI file ([section] then key = value lines).
Config load_config(const std::filesystem::path& path);
Config parse_config(std::istream& in, const std::string& origin = "config");
/// Sets "section.key" from its textual form, with the same checks as the file.
void apply_override(Config& cfg, const std::string& dotted_key, const std::string& value);
/// Cross-key checks (dataset paths, grid lists).
void validate_config(const Config& cfg);
/// Every key the schema knows, as "section.key".
std::vector<std::string> known_keys();

/// Stable hash of the command and the result-relevant part of the configuration.
std::string config_hash(const Config& cfg, const std::string& command);

Architecture architecture_from(const Config& cfg, int input_dim);
FlowConfig flow_from(const Config& cfg);
Dataset dataset_from(const Config& cfg);
std::vector<GridPoint> grid_from(const Config& cfg);
SweepConfig sweep_from(const Config& cfg, std::shared_ptr<const Dataset> data);

struct RunManifest {
  std::string config_hash;
  std::string command;
  std::string tool_version = kToolVersion;
  std::uint64_t base_seed = 0;
  std::vector<std::uint64_t> member_seeds;
  nlohmann::json dataset_provenance;
  nlohmann::json config;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;  // relative to the result directory
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const RunManifest& m, const std::filesystem::path& dir);
RunManifest read_manifest(const std::filesystem::path& dir);
/// Problems found when checking a manifest against its directory; empty when valid.
std::vector<std::string> validate_manifest(const std::filesystem::path& dir);

/// Root for result directories: the environment variable, else "results".
std::filesystem::path results_root();

/// Figure ids understood by the report command.
const std::vector<std::string>& figure_ids();
/// Writes <results-dir>/figures/<id>.csv and <id>.json; returns the files written.
std::vector<std::filesystem::path> write_figure(const std::filesystem::path& results_dir,
                                                const std::string& figure_id);

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace ntklab::cli
