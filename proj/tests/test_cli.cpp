#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "testutil.hpp"

TEST_SUITE_BEGIN("cli");

namespace {

struct CliResult {
  int exit_code;
  std::string output;
};

CliResult run_cli(const std::string &args) {
  static int counter = 0;
  const auto log = std::filesystem::temp_directory_path() /
                   ("gilab_cli_out_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
  const std::string cmd = std::string(GILAB_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  std::filesystem::remove(log);
  return {WEXITSTATUS(raw), ss.str()};
}

} // namespace

TEST_CASE("no arguments prints usage and exits 1") {
  const auto r = run_cli("");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("Usage") != std::string::npos);
}

TEST_CASE("unknown flags exit 1 and are named") {
  const auto r = run_cli("synth --out /tmp/unused --definitely-not-a-flag");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("--definitely-not-a-flag") != std::string::npos);
}

TEST_CASE("help exits 0") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("synth --help").exit_code == 0);
}

TEST_CASE("synth writes the requested number of scenes plus a manifest") {
  testutil::TempDir dir("cli_synth");
  const auto r =
      run_cli("synth --seed 7 --scenes 4 --size 32 --objects 1 --out " + dir.path().string());
  REQUIRE(r.exit_code == 0);
  int scene_dirs = 0;
  for (const auto &e : std::filesystem::directory_iterator(dir.path()))
    if (e.is_directory() && std::filesystem::exists(e.path() / "scene.json"))
      ++scene_dirs;
  CHECK(scene_dirs == 4);
  REQUIRE(std::filesystem::exists(dir.path() / "manifest.json"));
  std::ifstream is(dir.path() / "manifest.json");
  nlohmann::json manifest;
  is >> manifest;
  CHECK(manifest["command"] == "synth");
  CHECK(manifest["seed"] == 7);
  CHECK(manifest["config"]["scenes"] == 4);
}

TEST_CASE("missing checkpoint is a runtime failure with exit 2") {
  testutil::TempDir dir("cli_nockpt");
  run_cli("synth --seed 1 --scenes 1 --size 32 --out " + dir.path().string());
  const auto r = run_cli("render --scene " + (dir.path() / "scene_0000").string() +
                         " --ckpt /nonexistent.ckpt --out " + (dir.path() / "r").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("error") != std::string::npos);
}

TEST_CASE("gradcheck subcommand reports per-component errors") {
  const auto r = run_cli("gradcheck --instances 3");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("matmul") != std::string::npos);
  CHECK(r.output.find("renderer") != std::string::npos);
  CHECK(r.output.find("model_e2e") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("maskgen writes four view masks and a plan") {
  testutil::TempDir dir("cli_maskgen");
  run_cli("synth --seed 3 --scenes 1 --size 32 --objects 1 --out " + dir.path().string());
  const auto r = run_cli("maskgen --scene " + (dir.path() / "scene_0000").string() +
                         " --type random --seed 5 --out " + (dir.path() / "m").string());
  REQUIRE(r.exit_code == 0);
  for (int v = 0; v < 4; ++v)
    CHECK(std::filesystem::exists(dir.path() / "m" /
                                  ("mask_view" + std::to_string(v) + ".png")));
  CHECK(std::filesystem::exists(dir.path() / "m" / "plan.json"));
}

TEST_SUITE_END();
