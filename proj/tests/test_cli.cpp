#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// The binary under test and a scratch directory, both owned by the suite.
// The build bakes the binary's path in; the environment can override it.
std::string cli() {
  const char* p = std::getenv("QSR_CLI_PATH");
#ifdef QSR_CLI_PATH
  if (p == nullptr) p = QSR_CLI_PATH;
#endif
  REQUIRE_MESSAGE(p != nullptr, "QSR_CLI_PATH must point at the built binary");
  return p;
}

struct Scratch {
  fs::path root;
  Scratch() {
    root = fs::temp_directory_path() / "qsr_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
  }
  std::string dir(const std::string& name) const {
    return (root / name).string();
  }
};

Scratch& scratch() {
  static Scratch s;
  return s;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const auto out_file = scratch().root / "last_output.txt";
  const std::string cmd =
      cli() + " " + args + " > " + out_file.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream is(out_file);
  std::stringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("help and version exit cleanly") {
  CHECK(run("--help").exit_code == 0);
  const auto v = run("--version");
  CHECK(v.exit_code == 0);
  CHECK(v.out.find("qsr") != std::string::npos);
  const auto h = run("simulate --help");
  CHECK(h.exit_code == 0);
  CHECK(h.out.find("--fixture") != std::string::npos);
}

TEST_CASE("unknown flags and subcommands exit 2 with a message") {
  const auto r = run("simulate --no-such-flag");
  CHECK(r.exit_code == 2);
  CHECK(!r.out.empty());
  CHECK(run("frobnicate").exit_code == 2);
}

TEST_CASE("a missing fixture file is named in the error") {
  const auto r = run("simulate --fixture /definitely/not/here.json --out " +
                     scratch().dir("x1"));
  CHECK(r.exit_code == 2);
  CHECK(r.out.find("/definitely/not/here.json") != std::string::npos);
}

TEST_CASE("simulate writes the standard artifact set") {
  const auto dir = scratch().dir("sim");
  const auto r = run("simulate --fixture qubit --seed 5 --n-traj 20 --out " +
                     dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(fs::path(dir) / "manifest.json"));
  CHECK(fs::exists(fs::path(dir) / "report.json"));
  CHECK(fs::exists(fs::path(dir) / "trajectories.csv"));

  const auto manifest = json::parse(slurp(fs::path(dir) / "manifest.json"));
  CHECK(manifest["mode"] == "sde");
  CHECK(manifest["seed"] == 5);
  CHECK(manifest["n_trajectories"] == 20);
  CHECK(manifest["fixture"]["name"] == "qubit");
  CHECK(manifest.contains("config_hash"));

  const auto report = json::parse(slurp(fs::path(dir) / "report.json"));
  CHECK(report["config_hash"] == manifest["config_hash"]);
  CHECK(report["summary"]["n_trajectories"] == 20);

  // CSV header names the per-level weight columns
  std::ifstream csv(fs::path(dir) / "trajectories.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("traj_id,t,H,V,beta,norm_err") == 0);
  CHECK(header.find("P_1") != std::string::npos);
}

TEST_CASE("verify-all passes on the builtin fixtures and exits 0") {
  const auto dir = scratch().dir("va");
  const auto r = run("verify-all --fixture qubit --seed 11 --n-traj 200 "
                     "--out " + dir);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  const auto report = json::parse(slurp(fs::path(dir) / "report.json"));
  CHECK(report["checks"].size() >= 5);
  for (const auto& c : report["checks"]) CHECK(c["passed"] == true);
  CHECK(report["summary"].contains("calibration_note"));
}

TEST_CASE("verify-all honors a check filter and rejects unknown checks") {
  const auto dir = scratch().dir("vf");
  const auto r = run("verify-all --fixture qubit --seed 11 --n-traj 200 "
                     "--checks born_frequencies --out " + dir);
  CHECK(r.exit_code == 0);
  const auto report = json::parse(slurp(fs::path(dir) / "report.json"));
  CHECK(report["checks"].size() == 1);
  CHECK(report["checks"][0]["name"] == "born_frequencies");

  const auto bad = run("verify-all --fixture qubit --n-traj 200 "
                       "--checks no_such_check --out " + scratch().dir("vb"));
  CHECK(bad.exit_code == 2);
  CHECK(bad.out.find("no_such_check") != std::string::npos);
}

TEST_CASE("same seed twice is byte-identical; worker count is irrelevant") {
  const auto d1 = scratch().dir("det1");
  const auto d2 = scratch().dir("det2");
  const auto d3 = scratch().dir("det3");
  CHECK(run("verify-all --fixture qubit --seed 33 --n-traj 100 --workers 1 "
            "--out " + d1).exit_code == 0);
  CHECK(run("verify-all --fixture qubit --seed 33 --n-traj 100 --workers 1 "
            "--out " + d2).exit_code == 0);
  CHECK(run("verify-all --fixture qubit --seed 33 --n-traj 100 --workers 4 "
            "--out " + d3).exit_code == 0);
  const auto r1 = slurp(fs::path(d1) / "report.json");
  CHECK(r1 == slurp(fs::path(d2) / "report.json"));
  CHECK(r1 == slurp(fs::path(d3) / "report.json"));
  CHECK(slurp(fs::path(d1) / "trajectories.csv") ==
        slurp(fs::path(d3) / "trajectories.csv"));
  // the manifest never embeds the worker count or output path
  const auto manifest = slurp(fs::path(d3) / "manifest.json");
  CHECK(manifest.find("workers") == std::string::npos);
  CHECK(manifest.find("det3") == std::string::npos);
}

TEST_CASE("different seeds change the trajectories") {
  const auto a = scratch().dir("seed_a");
  const auto b = scratch().dir("seed_b");
  CHECK(run("simulate --fixture qubit --seed 1 --n-traj 10 --out " + a)
            .exit_code == 0);
  CHECK(run("simulate --fixture qubit --seed 2 --n-traj 10 --out " + b)
            .exit_code == 0);
  CHECK(slurp(fs::path(a) / "trajectories.csv") !=
        slurp(fs::path(b) / "trajectories.csv"));
}

TEST_CASE("exact subcommand runs both transformed-measure modes") {
  const auto d1 = scratch().dir("ex_scalar");
  const auto r1 = run("exact --fixture qubit --seed 6 --n-traj 50 --out " +
                      d1);
  CHECK(r1.exit_code == 0);
  const auto m1 = json::parse(slurp(fs::path(d1) / "manifest.json"));
  CHECK(m1["mode"] == "girsanov-scalar");

  const auto d2 = scratch().dir("ex_weighted");
  const auto r2 = run("exact --mode girsanov-weighted --fixture qubit "
                      "--seed 6 --n-traj 500 --out " + d2);
  CHECK(r2.exit_code == 0);
  const auto rep = json::parse(slurp(fs::path(d2) / "report.json"));
  CHECK(rep.contains("checks"));
}

TEST_CASE("lindblad subcommand writes the density series") {
  const auto dir = scratch().dir("lb");
  const auto r = run("lindblad --fixture spin-pair --out " + dir);
  CHECK(r.exit_code == 0);
  const auto rep = json::parse(slurp(fs::path(dir) / "report.json"));
  CHECK(rep["times"].size() > 10);
  CHECK(rep["summary"]["final_trace_error"].get<double>() < 1e-10);
  std::ifstream csv(fs::path(dir) / "trajectories.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("trace") != std::string::npos);
  CHECK(header.find("purity") != std::string::npos);
}

TEST_CASE("compare validates its pair and runs a supported one") {
  const auto bad = run("compare --mode sde,girsanov-weighted --fixture qubit "
                       "--out " + scratch().dir("cmp_bad"));
  CHECK(bad.exit_code == 2);
  CHECK(bad.out.find("sde") != std::string::npos);

  const auto dir = scratch().dir("cmp");
  const auto r = run("compare --mode lindblad-closed,lindblad-ode "
                     "--fixture qubit --out " + dir);
  CHECK(r.exit_code == 0);
  const auto rep = json::parse(slurp(fs::path(dir) / "report.json"));
  CHECK(rep.contains("comparison"));
  const auto manifest = json::parse(slurp(fs::path(dir) / "manifest.json"));
  CHECK(manifest["compare"]["a"] == "lindblad-closed");
  CHECK(manifest["compare"]["b"] == "lindblad-ode");
}

TEST_CASE("config files merge under explicit flags") {
  const auto cfg_path = scratch().root / "run.json";
  {
    std::ofstream os(cfg_path);
    os << R"({"fixture": "qubit", "mode": "sde", "seed": 9,
              "n_trajectories": 12})";
  }
  const auto d1 = scratch().dir("cfg1");
  const auto r1 = run("simulate --config " + cfg_path.string() + " --out " +
                      d1);
  CHECK(r1.exit_code == 0);
  auto manifest = json::parse(slurp(fs::path(d1) / "manifest.json"));
  CHECK(manifest["seed"] == 9);
  CHECK(manifest["n_trajectories"] == 12);

  // a flag wins over the file
  const auto d2 = scratch().dir("cfg2");
  const auto r2 = run("simulate --config " + cfg_path.string() +
                      " --seed 77 --out " + d2);
  CHECK(r2.exit_code == 0);
  manifest = json::parse(slurp(fs::path(d2) / "manifest.json"));
  CHECK(manifest["seed"] == 77);
  CHECK(manifest["n_trajectories"] == 12);

  // unknown keys in the config are a config error naming the key
  const auto bad_path = scratch().root / "bad.json";
  {
    std::ofstream os(bad_path);
    os << R"({"fixture": "qubit", "typo_field": 3})";
  }
  const auto r3 = run("simulate --config " + bad_path.string() + " --out " +
                      scratch().dir("cfg3"));
  CHECK(r3.exit_code == 2);
  CHECK(r3.out.find("typo_field") != std::string::npos);
}

TEST_CASE("a failing verification exits 1, not 2") {
  // A 2-tau horizon leaves almost every trajectory uncollapsed, so the
  // terminal-dependent checks fail (reported as failures, not usage errors).
  const auto r = run("verify-all --fixture qubit --seed 3 --n-traj 150 "
                     "--horizon-tau 2 --out " + scratch().dir("fail1"));
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("FAIL") != std::string::npos);
}

TEST_CASE("fixture files round-trip through the cli") {
  // save one of the builtins via a run, then load it back as a file fixture
  const auto dir = scratch().dir("roundtrip");
  CHECK(run("simulate --fixture qubit --seed 2 --n-traj 5 --out " + dir)
            .exit_code == 0);
  const auto manifest = json::parse(slurp(fs::path(dir) / "manifest.json"));
  CHECK(manifest["fixture"]["source"] == "builtin");
  CHECK(manifest["fixture"]["hash"].get<std::string>().size() == 16);
}
