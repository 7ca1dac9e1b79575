#include "bdnp/cli.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace bdnp;
using namespace bdnp::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_path() {
  const char* p = std::getenv("BDNP_CLI");
  return p ? p : "";
}

int run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_config() {
  return json{{"seed", 11},
              {"data", {{"size", 8}, {"train_per_class", 30}, {"test_per_class", 20}}},
              {"train", {{"epochs", 4}, {"batch_size", 16}}},
              {"poison", {{"poison_rate", 0.1}}},
              {"prune", {{"mu", 1.0}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("pipeline equals the individual subcommands and is deterministic") {
  REQUIRE_FALSE(cli_path().empty());
  const fs::path dir = testing::temp_dir("cli_compose");
  const fs::path cfg = write_config(dir, small_config());
  const std::string c = " -c " + cfg.string();
  REQUIRE(run("pipeline" + c + " -o " + (dir / "a").string()) == 0);
  REQUIRE(run("pipeline" + c + " -o " + (dir / "b").string()) == 0);
  const std::string m = " -o " + (dir / "m").string();
  REQUIRE(run("make-data" + c + m) == 0);
  const std::string train_before = testing::slurp(dir / "m" / "train.pdst");
  REQUIRE(run("train" + c + m) == 0);
  CHECK(testing::slurp(dir / "m" / "train.pdst") == train_before);
  REQUIRE(run("score" + c + m) == 0);
  REQUIRE(run("prune" + c + m) == 0);
  REQUIRE(run("eval" + c + m + " --output " + (dir / "m" / "eval.json").string()) == 0);

  for (const char* f : {"backdoored.bdnp", "pruned.bdnp", "scores.csv", "prune_report.json", "defense.pdst"}) {
    CAPTURE(f);
    const std::string a = testing::slurp(dir / "a" / f);
    CHECK_FALSE(a.empty());
    CHECK(a == testing::slurp(dir / "b" / f));
    CHECK(a == testing::slurp(dir / "m" / f));
  }
  CHECK(testing::slurp(dir / "a" / "summary.json") == testing::slurp(dir / "b" / "summary.json"));

  const json summary = read_json(dir / "a" / "summary.json");
  const json manual = read_json(dir / "m" / "eval.json");
  CHECK(summary["pruned"]["acc"] == manual["acc"]);
  CHECK(summary["pruned"]["asr"] == manual["asr"]);
  CHECK(summary["pruned_filters"] == read_json(dir / "m" / "prune_report.json")["total_pruned"]);
  CHECK(summary["mu"] == 1.0);

  for (const char* f : {"backdoored.bdnp", "pruned.bdnp", "scores.csv", "poisoned_train.pdst"}) {
    CAPTURE(f);
    CHECK(fs::exists(sidecar_path(dir / "a" / f)));
  }
  CHECK(read_json(sidecar_path(dir / "a" / "pruned.bdnp"))["config"]["seed"] == 11);
}

TEST_CASE("score variants, sweep and Wilcoxon through the command line") {
  REQUIRE_FALSE(cli_path().empty());
  const fs::path dir = testing::temp_dir("cli_sweep");
  const fs::path cfg = write_config(dir, small_config());
  const std::string c = " -c " + cfg.string() + " -o " + (dir / "r").string();
  REQUIRE(run("make-data" + c) == 0);
  REQUIRE(run("train" + c) == 0);

  REQUIRE(run("score" + c + " --variant spectral") == 0);
  const auto rows = lines(dir / "r" / "scores.csv");
  REQUIRE(rows.size() == 1 + 112);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream ss(rows[i]);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    REQUIRE(cells.size() == 9);
    CHECK(cells[2] == cells[7]);
    CHECK(cells[8] == "spectral");
  }

  REQUIRE(run("sweep" + c) == 0);
  const auto sweep = lines(dir / "r" / "sweep.csv");
  REQUIRE(sweep.size() == 22);
  CHECK(sweep[0] == "mu,acc,asr,pruned_count");

  const fs::path out = dir / "w.json";
  CHECK(run("wilcoxon " + (dir / "r" / "sweep.csv").string() + " acc asr --output " + out.string()) == 0);
  const auto [a, b] = read_csv_columns(dir / "r" / "sweep.csv", "acc", "asr");
  const WilcoxonResult ref = wilcoxon_signed_rank(a, b);
  const json w = read_json(out);
  CHECK(w["p_value"] == ref.p_value);
  CHECK(w["statistic"] == ref.statistic);
  CHECK(run("wilcoxon " + (dir / "r" / "sweep.csv").string() + " acc nope") == 2);

  REQUIRE(run("ablate" + c) == 0);
  CHECK(lines(dir / "r" / "ablation.csv").size() == 7);
}

TEST_CASE("exit codes") {
  REQUIRE_FALSE(cli_path().empty());
  const fs::path dir = testing::temp_dir("cli_exit");
  json j = small_config();
  j["poison"]["poison_rate"] = 0.0001;
  const fs::path cfg = write_config(dir, j);
  const std::string c = " -c " + cfg.string() + " -o " + (dir / "r").string();
  REQUIRE(run("make-data" + c) == 0);
  CHECK(run("train" + c) == 3);
  CHECK_FALSE(fs::exists(dir / "r" / "backdoored.bdnp"));
  CHECK_FALSE(fs::exists(dir / "r" / "poisoned_train.pdst"));

  CHECK(run("score" + c) == 2);
  CHECK(run("eval -o " + (dir / "empty").string()) == 2);
  CHECK(run("pipeline --precision 16 -o " + (dir / "p").string()) == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("pipeline -c " + (dir / "missing.json").string() + " -o " + (dir / "q").string()) == 2);

  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK(run("make-data -c " + (dir / "bad.json").string() + " -o " + (dir / "q").string()) == 2);
}

TEST_CASE("run config round trips through JSON") {
  RunConfig c = RunConfig::from_json(small_config());
  c.resolve(3, 8, 8, 4);
  const RunConfig r = RunConfig::from_json(c.to_json());
  CHECK(r.to_json() == c.to_json());
  RunConfig d = RunConfig::from_json(small_config());
  d.resolve(3, 8, 8, 4);
  CHECK(d.poison.seed == c.poison.seed);
  CHECK(d.train.seed != d.poison.seed);
  RunConfig e = RunConfig::from_json(small_config());
  e.seed = 12;
  e.resolve(3, 8, 8, 4);
  CHECK(e.poison.seed != c.poison.seed);
}
