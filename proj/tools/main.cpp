#include "bdnp/cli.hpp"
#include "bdnp/evaluator.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace bdnp;
using namespace bdnp::cli;

namespace {

struct Overrides {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<double> mu;
  std::optional<std::string> variant;
  std::optional<double> alpha;
  std::optional<double> poison_rate;
  std::optional<int> target_label;
  std::optional<int> precision;
  std::optional<std::string> trigger;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON run config");
  cmd->add_option("-o,--out", o.out, "run directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--mu", o.mu, "pruning threshold multiplier");
  cmd->add_option("--variant", o.variant, "score variant: full, no-sqrt, spectral, saliency, activation, correlation");
  cmd->add_option("--alpha", o.alpha, "blend trigger alpha");
  cmd->add_option("--poison-rate", o.poison_rate, "fraction of training records poisoned");
  cmd->add_option("--target-label", o.target_label, "backdoor target class");
  cmd->add_option("--precision", o.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  cmd->add_option("--trigger", o.trigger, "patch or blend")->check(CLI::IsMember({"patch", "blend"}));
  cmd->add_flag("--deterministic", o.deterministic, "reference execution (always on; runs are sequential)");
}

RunConfig build_config(const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (fs::exists(RunPaths{o.out}.resolved_config())) {
    c = load_config(RunPaths{o.out}.resolved_config());
  }
  if (o.seed) c.seed = *o.seed;
  if (o.mu) c.prune.mu = *o.mu;
  if (o.variant) c.variant = parse_variant(*o.variant);
  if (o.alpha) c.poison.trigger.alpha = *o.alpha;
  if (o.poison_rate) c.poison.poison_rate = *o.poison_rate;
  if (o.target_label) c.poison.target_label = *o.target_label;
  if (o.precision) c.precision = *o.precision;
  if (o.trigger) c.poison.trigger.kind = *o.trigger == "blend" ? TriggerKind::kBlend : TriggerKind::kPatch;
  return c;
}

fs::path model_or(const std::string& model, const fs::path& fallback) {
  return model.empty() ? fallback : fs::path(model);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor filter scoring and pruning toolkit"};
  app.require_subcommand(1);

  Overrides o;
  std::string model;
  std::string output;
  auto* make_data = app.add_subcommand("make-data", "generate or import the train/test datasets");
  auto* train = app.add_subcommand("train", "poison the training set and train the backdoored model");
  auto* score = app.add_subcommand("score", "score every filter of a model on the defense set");
  auto* prune = app.add_subcommand("prune", "prune filters above mean + mu * std per layer");
  auto* eval = app.add_subcommand("eval", "clean accuracy and attack success rate of a model");
  auto* sweep = app.add_subcommand("sweep", "prune and evaluate over a grid of mu values");
  auto* ablate = app.add_subcommand("ablate", "prune and evaluate under each score variant");
  auto* pipeline = app.add_subcommand("pipeline", "make-data, train, score, prune and eval in one run");
  for (auto* cmd : {make_data, train, score, prune, eval, sweep, ablate, pipeline}) add_common(cmd, o);
  for (auto* cmd : {score, prune, eval, sweep, ablate}) cmd->add_option("--model", model, "model file");
  eval->add_option("--output", output, "result JSON (default <out>/eval_<model>.json)");

  std::string csv, col_a, col_b, alternative = "greater";
  auto* wilcoxon = app.add_subcommand("wilcoxon", "signed-rank test between two CSV columns");
  wilcoxon->add_option("csv", csv, "input CSV with a header row")->required();
  wilcoxon->add_option("column_a", col_a, "first column")->required();
  wilcoxon->add_option("column_b", col_b, "second column")->required();
  wilcoxon->add_option("--alternative", alternative, "greater or two-sided")
      ->check(CLI::IsMember({"greater", "two-sided"}))
      ->capture_default_str();
  wilcoxon->add_option("--output", output, "result JSON (printed to stdout as well)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (wilcoxon->parsed()) {
      std::optional<fs::path> out;
      if (!output.empty()) out = output;
      const auto r = cmd_wilcoxon(csv, col_a, col_b, parse_alternative(alternative), out);
      std::cout << r.to_json().dump(2) << "\n";
      return kExitOk;
    }

    RunConfig config;
    try {
      config = build_config(o);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(kExitUsage, "config", e.what());
    }
    const RunPaths paths{o.out};
    if (make_data->parsed()) {
      cmd_make_data(config, paths);
    } else if (train->parsed()) {
      cmd_train(config, paths);
    } else if (score->parsed()) {
      cmd_score(config, paths, model_or(model, paths.backdoored_model()));
    } else if (prune->parsed()) {
      cmd_prune(config, paths, model_or(model, paths.backdoored_model()));
    } else if (eval->parsed()) {
      const fs::path m = model_or(model, paths.pruned_model());
      const fs::path out = output.empty() ? paths.dir / ("eval_" + m.stem().string() + ".json") : fs::path(output);
      std::cout << cmd_eval(config, paths, m, out).dump(2) << "\n";
    } else if (sweep->parsed()) {
      cmd_sweep(config, paths, model_or(model, paths.backdoored_model()));
    } else if (ablate->parsed()) {
      cmd_ablate(config, paths, model_or(model, paths.backdoored_model()));
    } else if (pipeline->parsed()) {
      const auto summary = cmd_pipeline(config, paths);
      std::cout << "backdoored acc " << summary["backdoored"]["acc"] << " asr " << summary["backdoored"]["asr"]
                << "\npruned     acc " << summary["pruned"]["acc"] << " asr " << summary["pruned"]["asr"] << " ("
                << summary["pruned_filters"] << " filters, mu " << summary["mu"] << ")\n";
    }
  } catch (const StageError& e) {
    std::cerr << "error in " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
