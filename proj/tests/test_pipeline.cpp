// Unit tests for run configuration, command orchestration and the CLI.
//
// Properties:
//   * Configs are strict: exactly one data source, a schema for CSV input,
//     no unknown keys, a mandatory seed.
//   * Commands never clobber outputs without --force, and downstream commands
//     refuse missing or stale upstream outputs (exit 3).
//   * Identical config and seed give byte-identical outputs, whatever the
//     thread count.
//
// Failure modes guarded: silent defaults for typos in the config; wall-clock
// seeding; results that depend on scheduling; exit codes that collapse
// user errors and numerical failures.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "prepadj/pipeline.hpp"

using namespace prepadj;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("prepadj_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json small_config() {
  return json::parse(R"({
    "seed": 20240601,
    "synthetic": {"n_units": 1500, "n_strata": 6, "n_covariates": 3,
                  "truth": {"true_group_effects": [0.0, -0.2877, 0.0, 0.2]}},
    "model": {"tune": false, "params": {"max_depth": 2, "eta": 0.2, "rounds": 40}},
    "bootstrap": {"replicates": 4},
    "sensitivity": {"grid": {"alpha": [0, 0.6931471805599453], "delta": [0, 0.6931471805599453],
                             "q_step": 0.5},
                    "propensity": {"learner": "logistic"}}
  })");
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PREPADJ_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string data_error(const json& j) {
  try {
    RunConfig::from_json(j);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config validation") {
  CHECK(data_error(small_config()).empty());

  json both = small_config();
  both["input"] = {{"path", "x.csv"}, {"schema", json::object()}};
  CHECK(data_error(both).find("exactly one") != std::string::npos);

  json neither = small_config();
  neither.erase("synthetic");
  CHECK(data_error(neither).find("exactly one") != std::string::npos);

  json no_schema = small_config();
  no_schema.erase("synthetic");
  no_schema["input"] = {{"path", "x.csv"}};
  CHECK(data_error(no_schema).find("schema") != std::string::npos);

  json typo = small_config();
  typo["bootsrap"] = {{"replicates", 10}};
  CHECK(data_error(typo).find("bootsrap") != std::string::npos);

  json empty_trad = small_config();
  empty_trad["baselines"] = {{"traditional_i", json::array()}, {"traditional_ii", {"x1"}}};
  CHECK(data_error(empty_trad).find("Traditional I") != std::string::npos);

  json bad_cap = small_config();
  bad_cap["sensitivity"]["grid"]["alpha"] = {0, 2.0};
  CHECK_FALSE(data_error(bad_cap).empty());

  json no_seed = small_config();
  no_seed.erase("seed");
  const RunConfig c = RunConfig::from_json(no_seed);
  CHECK_THROWS_AS(c.master_seed(), DataError);
}

TEST_CASE("config hash ignores output and threads only") {
  json a = small_config();
  json b = a;
  b["output"] = "elsewhere";
  b["threads"] = 8;
  CHECK(RunConfig::from_json(a).hash() == RunConfig::from_json(b).hash());
  json c = a;
  c["seed"] = 1;
  CHECK(RunConfig::from_json(a).hash() != RunConfig::from_json(c).hash());
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  json negative = a;
  negative["seed"] = -1;
  CHECK_FALSE(data_error(negative).empty());
}

TEST_CASE("flags override the config") {
  RunConfig c = RunConfig::from_json(small_config());
  CommandFlags f;
  f.seed = 5;
  f.threads = 3;
  f.out = "/tmp/x";
  apply_flags(c, f);
  CHECK(c.master_seed() == 5);
  CHECK(c.threads == 3);
  CHECK(c.output_dir == "/tmp/x");
}

TEST_CASE("exit codes and table formatting") {
  CHECK(exit_code_for(DataError("x")) == 2);
  CHECK(exit_code_for(MissingArtifactError("x")) == 3);
  CHECK(exit_code_for(NumericalError("x")) == 4);
  CHECK(format_or_cell(std::log(0.76), 0.06) == "0.76 (0.06)");
  CHECK(format_or_cell(std::log(1.52), 0.04) == "1.52 (0.04)");
}

TEST_CASE("CLI: simulate, overwrite protection, missing upstream, determinism") {
  const fs::path dir = scratch("cli");
  const fs::path cfg = write_config(dir, small_config());

  SUBCASE("simulate writes the cohort and refuses to overwrite without --force") {
    const std::string out = (dir / "sim").string();
    CHECK(run_cli("simulate --config " + cfg.string() + " --out " + out) == 0);
    const std::string first = slurp(fs::path(out) / "cohort.csv");
    std::size_t lines = 0;
    for (char ch : first) lines += ch == '\n';
    CHECK(lines == 1501);
    CHECK(fs::exists(fs::path(out) / "truth.json"));
    CHECK(run_cli("simulate --config " + cfg.string() + " --out " + out) == 2);
    CHECK(run_cli("simulate --config " + cfg.string() + " --out " + out + " --force") == 0);
    CHECK(slurp(fs::path(out) / "cohort.csv") == first);

    // The simulated cohort can be fed back through the CSV path.
    json from_csv = small_config();
    from_csv.erase("synthetic");
    from_csv["input"] = {{"path", out + "/cohort.csv"}, {"schema_path", out + "/schema.json"}};
    const fs::path cfg2 = write_config(dir, from_csv, "from_csv.json");
    CHECK(run_cli("estimate --config " + cfg2.string() + " --out " + (dir / "csv_est").string()) == 0);
    json no_schema = from_csv;
    no_schema["input"].erase("schema_path");
    const fs::path cfg3 = write_config(dir, no_schema, "no_schema.json");
    CHECK(run_cli("estimate --config " + cfg3.string() + " --out " + (dir / "x").string()) == 2);
  }

  SUBCASE("user errors exit 2, missing upstream exits 3") {
    CHECK(run_cli("estimate --config " + (dir / "nope.json").string()) == 2);
    CHECK(run_cli("frobnicate --config " + cfg.string()) == 2);
    CHECK(run_cli("sensitivity --config " + cfg.string() + " --out " + (dir / "empty").string()) == 3);
    CHECK(run_cli("report --config " + cfg.string() + " --out " + (dir / "empty").string()) == 3);
  }

  SUBCASE("estimate + sensitivity + report are byte-identical across runs and threads") {
    const fs::path a = dir / "a", b = dir / "b";
    CHECK(run_cli("estimate --config " + cfg.string() + " --out " + a.string()) == 0);
    CHECK(run_cli("sensitivity --config " + cfg.string() + " --out " + a.string()) == 0);
    CHECK(run_cli("report --config " + cfg.string() + " --out " + a.string()) == 0);
    CHECK(run_cli("estimate --config " + cfg.string() + " --out " + b.string() + " --threads 3") == 0);
    CHECK(run_cli("sensitivity --config " + cfg.string() + " --out " + b.string() + " --threads 3") == 0);
    CHECK(run_cli("report --config " + cfg.string() + " --out " + b.string()) == 0);
    std::size_t compared = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
      const fs::path other = b / entry.path().filename();
      REQUIRE(fs::exists(other));
      CHECK_MESSAGE(slurp(entry.path()) == slurp(other), entry.path().filename().string());
      ++compared;
    }
    CHECK(compared >= 12);

    // Provenance on every CSV header.
    for (const auto& entry : fs::directory_iterator(a)) {
      if (entry.path().extension() != ".csv") continue;
      const std::string text = slurp(entry.path());
      const std::string header = text.substr(0, text.find('\n'));
      CHECK_MESSAGE(header.find(",config_hash,seed") != std::string::npos, entry.path().filename().string());
    }

    const json band = json::parse(slurp(a / artifacts::kBandJson));
    for (const auto& g : band.at("groups")) {
      const auto& zero = band.at("estimates").at(g.get<std::string>()).at("zero_cell");
      CHECK(zero.contains("discrepancy"));
      CHECK(zero.contains("within_2_se"));
    }
    const std::string report = slurp(a / artifacts::kReportMd);
    CHECK(report.find("out-of-sample AUC") != std::string::npos);

    // A different seed makes the estimate outputs stale for sensitivity.
    CHECK(run_cli("sensitivity --config " + cfg.string() + " --out " + a.string() + " --seed 7 --force") == 3);
    // A different seed changes the outputs.
    CHECK(run_cli("estimate --config " + cfg.string() + " --out " + b.string() + " --seed 7 --force") == 0);
    CHECK(slurp(a / artifacts::kMuCsv) != slurp(b / artifacts::kMuCsv));
  }
  fs::remove_all(dir);
}
