#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/experiments.hpp"

using namespace roboenc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_data() {
  return {{"classes", 3}, {"image_size", 10}, {"train_per_class", 4}, {"test_per_class", 2}};
}

json tiny_model(const std::string& name, const std::string& head) {
  json m{{"name", name}, {"preset", "net-c"}, {"head", head}, {"train", {{"epochs", 1}, {"batch_size", 4}}}};
  if (head != "one_hot_ce") m["l"] = 9;
  return m;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("roboenc-test-experiments-" + name);
  fs::remove_all(p);
  return p;
}

RunOptions quiet(const fs::path& out) {
  RunOptions o;
  o.out_dir = out;
  o.timestamp = false;
  o.config_dir = out.parent_path();
  return o;
}

}  // namespace

TEST_CASE("command names") {
  CHECK(command_names().size() == 8);
  CHECK(command_names().front() == "codebook");
}

TEST_CASE("canonical config fills defaults and applies the seed override") {
  const json c = canonical_config("codebook", json::object());
  CHECK(c == json{{"seed", 0}, {"k", 10}, {"l", 2000}});
  CHECK(canonical_config("codebook", {{"seed", 4}}, 9)["seed"] == 9);

  const json t = canonical_config("train", {{"model", {{"name", "m"}}}});
  CHECK(t["data"]["source"] == "synthetic");
  CHECK(t["data"]["train_per_class"] == 200);
  CHECK(t["model"]["preset"] == "net-a");
  CHECK(t["model"]["head"] == "one_hot_ce");
  CHECK_FALSE(t["model"]["train"].contains("seed"));
  CHECK(canonical_config("train", t) == t);
}

TEST_CASE("config hash depends on the command and the canonical config") {
  const json c = canonical_config("codebook", json::object());
  const std::string h = config_hash("codebook", c);
  CHECK(h.size() == 16);
  CHECK(h == config_hash("codebook", canonical_config("codebook", {{"k", 10}})));
  CHECK(h != config_hash("codebook", canonical_config("codebook", {{"k", 9}})));
  CHECK(h != config_hash("train", c));
}

TEST_CASE("schema violations are config errors") {
  CHECK_THROWS_AS(canonical_config("codebook", {{"kk", 3}}), ConfigError);
  CHECK_THROWS_AS(canonical_config("codebook", {{"k", "ten"}}), ConfigError);
  CHECK_THROWS_AS(canonical_config("codebook", {{"k", -1}}), ConfigError);
  CHECK_THROWS_AS(canonical_config("codebook", json::array()), ConfigError);
  CHECK_THROWS_AS(canonical_config("nope", json::object()), ConfigError);
  CHECK_THROWS_AS(canonical_config("train", {{"model", {{"preset", "net-a"}}}}), ConfigError);
  CHECK_THROWS_AS(canonical_config("train", {{"model", {{"name", "m"}, {"train", {{"lr", -1.0}}}}}}), ConfigError);
  CHECK_THROWS_AS(canonical_config("train", {{"data", {{"source", "tape"}}}, {"model", {{"name", "m"}}}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("matrix", {{"models", {tiny_model("a", "one_hot_ce")}},
                                              {"attack", {{"epsilon", 0.1}}}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("matrix", {{"models", {tiny_model("a", "one_hot_ce"), tiny_model("a", "one_hot_ce")}},
                                              {"attack", {{"epsilon", 0.1}}}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("sweep", {{"attack", {{"epsilon", 0.1}}}, {"substitute", tiny_model("s", "one_hot_ce")}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("landscape", {{"model", tiny_model("m", "one_hot_ce")}, {"resolution", 4}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("corrupt_eval", {{"models", {tiny_model("m", "one_hot_ce")}}, {"severities", {6}}}),
                  ConfigError);
  CHECK_THROWS_AS(canonical_config("watermark", {{"watermark", {{"source", 1}, {"target", 1}}}}), ConfigError);
}

TEST_CASE("codebook command writes a valid codebook") {
  const fs::path out = scratch_dir("codebook");
  const json r = run_command("codebook", {{"k", 4}, {"l", 40}}, quiet(out));
  CHECK(r["status"] == "ok");
  CHECK(r["results"]["valid"] == true);
  CHECK(r["results"]["max_relative_dot"].get<double>() <= 1e-9);
  CHECK_FALSE(r.contains("timestamp"));
  CHECK(fs::exists(out / "codebook.rocb"));
  CHECK(json::parse(io::read_file(out / "report.json")) == r);
  fs::remove_all(out);
}

TEST_CASE("train then attack a checkpoint, reproducibly") {
  const fs::path out = scratch_dir("train");
  const json train_cfg{{"data", tiny_data()}, {"model", tiny_model("m", "codebook_mse")}};
  const json a = run_command("train", train_cfg, quiet(out / "a"));
  const json b = run_command("train", train_cfg, quiet(out / "b"));
  CHECK(io::read_file(out / "a" / "report.json") == io::read_file(out / "b" / "report.json"));
  CHECK(io::read_file(out / "a" / "model.romd") == io::read_file(out / "b" / "model.romd"));
  CHECK(a["results"]["history"].size() == 1);

  RunOptions other = quiet(out / "c");
  other.seed = 77;
  const json c = run_command("train", train_cfg, other);
  CHECK(c["config_hash"] != a["config_hash"]);
  CHECK(c["config"]["seed"] == 77);

  const json attack_cfg{{"data", tiny_data()},
                        {"targets", {{{"name", "m"}, {"checkpoint", "a/model.romd"}}}},
                        {"attack", {{"family", "fgsm"}, {"epsilon", 0.1}}},
                        {"epsilons", {0.0, 0.3}}};
  RunOptions ao = quiet(out / "attack");
  ao.config_dir = out;
  const json r = run_command("attack", attack_cfg, ao);
  const json& target = r["results"]["targets"][0];
  CHECK(target["white_box"]["max_linf"].get<double>() <= 0.1 + 1e-12);
  CHECK(target["epsilon_curve"][0]["accuracy"] == target["clean_accuracy"]);

  json missing = attack_cfg;
  missing["targets"][0]["checkpoint"] = "nowhere.romd";
  CHECK_THROWS_AS(run_command("attack", missing, ao), FormatError);
  fs::remove_all(out);
}

TEST_CASE("idx data that is absent is a format error") {
  const fs::path out = scratch_dir("idx");
  RunOptions o = quiet(out);
  o.data_dir = out / "no-data";
  CHECK_THROWS_AS(run_command("train", {{"data", {{"source", "idx"}}}, {"model", tiny_model("m", "one_hot_ce")}}, o),
                  FormatError);
  fs::remove_all(out);
}

TEST_CASE("error report layout") {
  const json e = error_report("train", "ShapeError", "bad", 1);
  CHECK(e["status"] == "error");
  CHECK(e["exit_code"] == 1);
  CHECK(e["error"]["kind"] == "ShapeError");
}

#ifdef ROBOENC_CLI
namespace {

int run_cli(const std::string& args) {
  const int status = std::system((std::string(ROBOENC_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("cli exit codes") {
  const fs::path dir = scratch_dir("cli");
  fs::create_directories(dir);
  const auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  };
  const std::string out = " --out " + (dir / "out").string();

  CHECK(run_cli("codebook --config " + write("ok.json", R"({"k": 3, "l": 9})") + out + " --no-timestamp") == 0);
  const json report = json::parse(io::read_file(dir / "out" / "report.json"));
  CHECK(report["config"]["k"] == 3);
  CHECK_FALSE(report.contains("timestamp"));
  CHECK(run_cli("codebook --config " + (dir / "ok.json").string() + out + " --seed 5") == 0);
  CHECK(json::parse(io::read_file(dir / "out" / "report.json"))["config"]["seed"] == 5);
  CHECK(json::parse(io::read_file(dir / "out" / "report.json")).contains("timestamp"));

  CHECK(run_cli("codebook --config " + write("bad.json", R"({"k": 3, "extra": 1})") + out) == 2);
  CHECK(json::parse(io::read_file(dir / "out" / "error.json"))["error"]["kind"] == "ConfigError");
  CHECK(run_cli("codebook --config " + write("broken.json", "{") + out) == 2);
  CHECK(run_cli("codebook --config " + (dir / "absent.json").string() + out) == 2);
  CHECK(run_cli("bogus --config " + (dir / "ok.json").string() + out) == 2);
  CHECK(run_cli("codebook" + out) == 2);

  const std::string missing = write(
      "missing.json",
      R"({"data": {"classes": 3, "image_size": 10, "train_per_class": 2, "test_per_class": 2},
          "model": {"name": "m", "checkpoint": "nowhere.romd"}})");
  CHECK(run_cli("landscape --config " + missing + out) == 1);
  const json err = json::parse(io::read_file(dir / "out" / "error.json"));
  CHECK(err["status"] == "error");
  CHECK(err["exit_code"] == 1);
  CHECK(err["error"]["kind"] == "FormatError");
  fs::remove_all(dir);
}
#endif

#ifdef ROBOENC_CONFIG_DIR
TEST_CASE("shipped example configs pass the schema") {
  std::size_t checked = 0;
  for (const auto& entry : fs::directory_iterator(ROBOENC_CONFIG_DIR)) {
    const std::string command = entry.path().stem().string();
    CAPTURE(command);
    CHECK_NOTHROW(canonical_config(command, json::parse(io::read_file(entry.path()))));
    ++checked;
  }
  CHECK(checked == command_names().size());
}
#endif
