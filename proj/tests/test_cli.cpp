#include "catch_amalgamated.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int sh(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + C2CSIM_BIN + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("c2csim_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(sh("") == 2);
  CHECK(sh("frobnicate") == 2);
  CHECK(sh("gen-trace --models 0") == 2);
  CHECK(sh("run --bogus-flag 1") == 2);
  CHECK(sh("run --out " + scratch("usage").string()) == 2);
  CHECK(sh("--help") == 0);
}

TEST_CASE("configuration errors exit with 3") {
  const auto out = scratch("config").string();
  CHECK(sh("run --seed 1 --duration 30 --chip nonesuch --out " + out) == 3);
  CHECK(sh("run --seed 1 --duration 30 --mig 5 --out " + out) == 3);
  CHECK(sh("run --seed 1 --duration 30 --policy fastest --out " + out) == 3);
  CHECK(sh("run --seed 1 --duration 30 --controller.eta-slow 0.5 --out " + out) == 3);
}

TEST_CASE("I/O errors exit with 4") {
  const auto out = scratch("io").string();
  CHECK(sh("run --trace /nonexistent/trace.csv --out " + out) == 4);
  CHECK(sh("run --seed 1 --duration 30 --repo /nonexistent/repo.txt --out " + out) == 4);
  CHECK(sh("calibrate --out /proc/c2csim_forbidden") == 4);
}

TEST_CASE("gen-trace is deterministic and writes statistics") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  REQUIRE(sh("gen-trace --models 10 --days 1 --seed 7 --out " + a.string()) == 0);
  REQUIRE(sh("gen-trace --models 10 --days 1 --seed 7 --out " + b.string()) == 0);
  const auto ta = slurp(a / "trace.csv");
  CHECK_FALSE(ta.empty());
  CHECK(ta == slurp(b / "trace.csv"));
  CHECK(ta.find("arrival_ms,model_id,prompt_tokens,output_tokens") != std::string::npos);
  const auto stats = slurp(a / "trace.stats.json");
  CHECK(stats.find("median_idle_fraction") != std::string::npos);
  const auto c = scratch("gen_c");
  REQUIRE(sh("gen-trace --models 10 --days 1 --seed 8 --out " + c.string()) == 0);
  CHECK(slurp(c / "trace.csv") != ta);
}

TEST_CASE("output directory defaults to the environment variable") {
  const auto dir = scratch("env");
  REQUIRE(sh("gen-trace --models 5 --days 1 --preset default", "C2CSIM_OUT=" + dir.string()) == 0);
  CHECK(fs::exists(dir / "trace.csv"));
}

TEST_CASE("calibrate and profile") {
  const auto dir = scratch("cal");
  REQUIRE(sh("calibrate --out " + dir.string()) == 0);
  REQUIRE(fs::exists(dir / "kernel_repository.txt"));
  const auto repo = (dir / "kernel_repository.txt").string();
  REQUIRE(sh("profile --mig 1,7 --repo " + repo + " --out " + dir.string()) == 0);
  const auto table = slurp(dir / "profiling_table.txt");
  CHECK(table.find("llama-8b 1 ") != std::string::npos);
  CHECK(table.find("llama-8b 7 ") != std::string::npos);
  CHECK(table.find("llama-8b 3 ") == std::string::npos);
  CHECK(sh("profile --chunk-candidates 0,256 --out " + dir.string()) == 3);
}

TEST_CASE("run writes a reproducible report") {
  const auto a = scratch("run_a"), b = scratch("run_b");
  const std::string args = "run --seed 3 --duration 60 --mig 3 --policy c2cserve --out ";
  REQUIRE(sh(args + a.string()) == 0);
  REQUIRE(sh(args + b.string()) == 0);
  for (const char* f : {"report.json", "summary.txt", "requests.csv", "utilization.csv", "trajectory.csv"})
    CHECK(fs::exists(a / f));
  CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
  CHECK(slurp(a / "requests.csv") == slurp(b / "requests.csv"));
  CHECK(slurp(a / "report.json").find("\"policy\": \"c2cserve\"") != std::string::npos);

  const auto trace_dir = scratch("run_trace");
  REQUIRE(sh("gen-trace --preset contended --days 0.001 --seed 2 --out " + trace_dir.string()) == 0);
  const auto c = scratch("run_c");
  CHECK(sh("run --trace " + (trace_dir / "trace.csv").string() +
           " --policy timeshare --no-controller --out " + c.string()) == 0);
  CHECK(fs::exists(c / "report.json"));
}

TEST_CASE("sweep tabulates every combination") {
  const auto dir = scratch("sweep");
  REQUIRE(sh("sweep --seed 1 --duration 60 --policy c2cserve,timeshare --mig 1,3 --jobs 2 "
             "--chunk-candidates 512,2048 --out " + dir.string()) == 0);
  std::ifstream f(dir / "sweep.csv");
  std::string line;
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty() && line[0] != '#') ++rows;
  // Timeshare always uses the whole GPU, so it contributes one row.
  CHECK(rows == 1 + 3);
  CHECK(fs::exists(dir / "kernel_latency.csv"));
  CHECK(sh("sweep --seed 1 --duration 60 --policy bogus --out " + dir.string()) == 3);
}
