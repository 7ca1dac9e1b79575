#pragma once

#include "bdnp/dataset.hpp"
#include "bdnp/network.hpp"
#include "bdnp/poison.hpp"
#include "bdnp/pruner.hpp"
#include "bdnp/scorer.hpp"
#include "bdnp/trainer.hpp"
#include "bdnp/wilcoxon.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bdnp::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitTrain = 4,
  kExitScore = 5,
  kExitPrune = 6,
  kExitEval = 7,
};

/// A failure attributed to one pipeline stage; `code()` is the process exit status.
class StageError : public std::runtime_error {
 public:
  StageError(ExitCode code, std::string stage, const std::string& message)
      : std::runtime_error(stage + ": " + message), code_(code), stage_(std::move(stage)) {}
  ExitCode code() const { return code_; }
  const std::string& stage() const { return stage_; }

 private:
  ExitCode code_;
  std::string stage_;
};

struct DataSource {
  std::string kind = "synthetic";  // synthetic | cifar
  int classes = 4;
  int train_per_class = 150;
  int test_per_class = 100;
  Index size = 16;
  Index channels = 3;
  double noise = 0.06;
  Index jitter = 0;
  std::vector<std::string> cifar_train;
  std::vector<std::string> cifar_test;
};

/// Everything one run needs. A single `seed` fans out to the per-stage seeds,
/// which `resolve` writes into the nested configs.
struct RunConfig {
  std::uint64_t seed = 0;
  int precision = 32;
  DataSource data;
  std::optional<NetworkSpec> network;  // desk default sized to the data when absent
  PoisonConfig poison;
  TrainConfig train;
  ScoreVariant variant = ScoreVariant::kFull;
  double eps = kDefaultScoreEps;
  PruneConfig prune;
  std::vector<double> mu_grid;  // sweep grid; empty means the default grid
  std::uint64_t defense_seed = 0;

  /// Fills derived seeds and the network spec, then validates.
  void resolve(Index channels, Index height, Index width, int num_classes);
  void validate() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_config(const std::filesystem::path& path);

/// Standard artifact names inside a run directory.
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path train_data() const { return dir / "train.pdst"; }
  std::filesystem::path test_data() const { return dir / "test.pdst"; }
  std::filesystem::path poisoned_data() const { return dir / "poisoned_train.pdst"; }
  std::filesystem::path defense_data() const { return dir / "defense.pdst"; }
  std::filesystem::path backdoored_model() const { return dir / "backdoored.bdnp"; }
  std::filesystem::path pruned_model() const { return dir / "pruned.bdnp"; }
  std::filesystem::path history() const { return dir / "train_history.csv"; }
  std::filesystem::path scores() const { return dir / "scores.csv"; }
  std::filesystem::path prune_report() const { return dir / "prune_report.json"; }
  std::filesystem::path sweep() const { return dir / "sweep.csv"; }
  std::filesystem::path ablation() const { return dir / "ablation.csv"; }
  std::filesystem::path summary() const { return dir / "summary.json"; }
  std::filesystem::path resolved_config() const { return dir / "config.resolved.json"; }
};

/// Sidecar holding the resolved config for an artifact: `<artifact>.config.json`.
std::filesystem::path sidecar_path(const std::filesystem::path& artifact);

// Each command reads its inputs from and writes its outputs to `paths.dir`.
// `config` is resolved in place by make_data; later stages re-resolve from
// the stored datasets.
void cmd_make_data(RunConfig& config, const RunPaths& paths);
void cmd_train(RunConfig& config, const RunPaths& paths);
void cmd_score(RunConfig& config, const RunPaths& paths, const std::filesystem::path& model);
void cmd_prune(RunConfig& config, const RunPaths& paths, const std::filesystem::path& model);
nlohmann::json cmd_eval(RunConfig& config, const RunPaths& paths, const std::filesystem::path& model,
                        const std::filesystem::path& output);
void cmd_sweep(RunConfig& config, const RunPaths& paths, const std::filesystem::path& model);
void cmd_ablate(RunConfig& config, const RunPaths& paths, const std::filesystem::path& model);
WilcoxonResult cmd_wilcoxon(const std::filesystem::path& csv, const std::string& column_a,
                            const std::string& column_b, Alternative alternative,
                            const std::optional<std::filesystem::path>& output);

/// make-data, train, score, prune, eval of both models, then summary.json.
nlohmann::json cmd_pipeline(RunConfig& config, const RunPaths& paths);

/// Reads two named numeric columns from a CSV with a header row.
std::pair<std::vector<double>, std::vector<double>> read_csv_columns(const std::filesystem::path& csv,
                                                                     const std::string& a,
                                                                     const std::string& b);

}  // namespace bdnp::cli
