#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 1;

int fail(const std::string& command, const fs::path& out_dir, const std::string& kind,
         const std::string& message, int code) {
  const json report = roboenc::error_report(command, kind, message, code);
  std::cerr << report.dump() << '\n';
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!ec) std::ofstream(out_dir / "error.json", std::ios::binary) << report.dump(2) << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-way output encoding experiments"};
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool no_timestamp = false;

  app.add_option("command", command, "Experiment to run")
      ->required()
      ->check(CLI::IsMember(roboenc::command_names()));
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--out", out_dir, "Output directory (default roboenc-out/<command>)");
  app.add_option("--seed", seed, "Master seed, replaces the config's seed");
  app.add_flag("--no-timestamp", no_timestamp, "Leave the timestamp out of the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  roboenc::RunOptions opts;
  opts.out_dir = out_dir.empty() ? fs::path("roboenc-out") / command : fs::path(out_dir);
  opts.seed = seed;
  opts.timestamp = !no_timestamp;
  opts.config_dir = fs::path(config_path).parent_path();
  if (opts.config_dir.empty()) opts.config_dir = ".";
  if (const char* dir = std::getenv("ROBOENC_DATA_DIR"); dir != nullptr && *dir != '\0') opts.data_dir = dir;

  json config;
  try {
    config = json::parse(roboenc::io::read_file(config_path));
  } catch (const json::parse_error& e) {
    return fail(command, opts.out_dir, "ConfigError", std::string("config is not valid JSON: ") + e.what(),
                kConfigExit);
  } catch (const std::exception& e) {
    return fail(command, opts.out_dir, "ConfigError", e.what(), kConfigExit);
  }

  try {
    roboenc::canonical_config(command, config, opts.seed);
  } catch (const roboenc::ConfigError& e) {
    return fail(command, opts.out_dir, e.kind(), e.what(), kConfigExit);
  }

  try {
    const json report = roboenc::run_command(command, config, opts);
    std::cout << json{{"status", "ok"},
                      {"command", command},
                      {"config_hash", report.at("config_hash")},
                      {"report", (opts.out_dir / "report.json").string()}}
                     .dump()
              << '\n';
    return 0;
  } catch (const roboenc::ConfigError& e) {
    return fail(command, opts.out_dir, e.kind(), e.what(), kConfigExit);
  } catch (const roboenc::Error& e) {
    return fail(command, opts.out_dir, e.kind(), e.what(), kRuntimeExit);
  } catch (const fs::filesystem_error& e) {
    return fail(command, opts.out_dir, "IOError", e.what(), kRuntimeExit);
  } catch (const std::exception& e) {
    return fail(command, opts.out_dir, "InternalError", e.what(), kRuntimeExit);
  }
}
