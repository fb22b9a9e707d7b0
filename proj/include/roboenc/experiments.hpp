#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace roboenc {

struct RunOptions {
  std::filesystem::path out_dir = "roboenc-out";
  std::optional<std::uint64_t> seed;  // replaces the config's master seed
  bool timestamp = true;
  std::filesystem::path data_dir = ".";    // root for relative dataset paths
  std::filesystem::path config_dir = ".";  // root for relative checkpoint and codebook paths
};

// codebook, train, attack, matrix, sweep, landscape, corrupt_eval, watermark.
const std::vector<std::string>& command_names();

// Checks `config` against the command schema and returns it with every default
// filled in and the seed override applied. Throws ConfigError.
nlohmann::json canonical_config(const std::string& command, const nlohmann::json& config,
                                std::optional<std::uint64_t> seed_override = std::nullopt);

// 16 hex digits of FNV-1a over the command name and the canonical config.
std::string config_hash(const std::string& command, const nlohmann::json& canonical);

// Validates, runs and writes report.json plus the command's artifacts into
// opts.out_dir. Returns the report.
nlohmann::json run_command(const std::string& command, const nlohmann::json& config,
                           const RunOptions& opts);

nlohmann::json error_report(const std::string& command, const std::string& kind,
                            const std::string& message, int exit_code);

}  // namespace roboenc
