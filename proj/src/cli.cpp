#include "bdnp/cli.hpp"

#include "bdnp/evaluator.hpp"
#include "bdnp/model_io.hpp"
#include "bdnp/seed.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace bdnp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename F>
auto run_stage(ExitCode code, const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(code, stage, e.what());
  }
}

void require_input(const fs::path& p) {
  if (!fs::exists(p)) throw StageError(kExitUsage, "input", "missing input file " + p.string());
}

// Writes through a temporary name so a failed stage never leaves a partial artifact.
void write_atomic(const fs::path& path, const std::function<void(const fs::path&)>& write) {
  const fs::path tmp = path.string() + ".tmp";
  try {
    write(tmp);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  write_atomic(path, [&](const fs::path& tmp) {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  });
}

void write_sidecar(const fs::path& artifact, const std::string& command, const RunConfig& config) {
  const json j = {{"artifact", artifact.filename().string()}, {"command", command}, {"config", config.to_json()}};
  write_text(sidecar_path(artifact), j.dump(2) + "\n");
}

template <typename Scalar>
void save_model_atomic(const fs::path& path, const NetworkSpec& spec, const NetworkParams<Scalar>& params) {
  write_atomic(path, [&](const fs::path& tmp) { save_model(tmp, spec, params); });
}

struct RunData {
  Dataset train;
  Dataset test;
};

// Loads the stored train/test sets and resolves `config` against them.
RunData load_run_data(RunConfig& config, const RunPaths& paths) {
  require_input(paths.train_data());
  require_input(paths.test_data());
  RunData d;
  run_stage(kExitData, "data", [&] {
    d.train = load_dataset(paths.train_data());
    d.test = load_dataset(paths.test_data(), d.train.num_classes);
  });
  run_stage(kExitUsage, "config", [&] {
    config.resolve(d.train.channels(), d.train.height(), d.train.width(), d.train.num_classes);
  });
  return d;
}

template <typename F>
void with_precision(int bits, F&& f) {
  if (bits == 32) {
    f(float{});
  } else {
    f(double{});
  }
}

int model_precision(const fs::path& model) {
  require_input(model);
  return run_stage(kExitUsage, "model", [&] { return static_cast<int>(read_model_header(model).precision_bits); });
}

template <typename Scalar>
LoadedModel<Scalar> load_checked(const fs::path& model, const RunConfig& config) {
  auto m = run_stage(kExitUsage, "model", [&] { return load_model<Scalar>(model); });
  if (m.spec.to_json() != config.network->to_json()) {
    throw StageError(kExitUsage, "model", model.string() + " does not match the configured network");
  }
  return m;
}

std::vector<double> parse_grid(const json& j) {
  std::vector<double> g;
  for (const auto& v : j) g.push_back(v.get<double>());
  return g;
}

}  // namespace

fs::path sidecar_path(const fs::path& artifact) { return fs::path(artifact.string() + ".config.json"); }

void RunConfig::resolve(Index channels, Index height, Index width, int num_classes) {
  poison.seed = derive_seed(seed, SeedStream::kPoison);
  poison.trigger.pattern_seed = derive_seed(seed, SeedStream::kBlendPattern);
  train.seed = derive_seed(seed, SeedStream::kShuffle);
  defense_seed = derive_seed(seed, SeedStream::kDefense);
  if (!network) network = NetworkSpec::desk_default(channels, height, width, num_classes);
  if (network->in_channels != channels || network->height != height || network->width != width ||
      network->num_classes != num_classes) {
    throw std::invalid_argument("network input/classes do not match the dataset");
  }
  poison.trigger.validate(height, width);
  if (poison.target_label < 0 || poison.target_label >= num_classes) {
    throw std::invalid_argument("target_label " + std::to_string(poison.target_label) + " outside [0, " +
                                std::to_string(num_classes) + ")");
  }
  validate();
}

void RunConfig::validate() const {
  if (precision != 32 && precision != 64) throw std::invalid_argument("precision must be 32 or 64");
  if (data.kind != "synthetic" && data.kind != "cifar") {
    throw std::invalid_argument("data.source must be synthetic or cifar");
  }
  if (data.kind == "cifar" && (data.cifar_train.empty() || data.cifar_test.empty())) {
    throw std::invalid_argument("cifar source needs data.cifar_train and data.cifar_test");
  }
  if (!(poison.poison_rate > 0.0 && poison.poison_rate < 1.0)) {
    throw std::invalid_argument("poison_rate must lie in (0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("score eps must be > 0");
  if (network) network->validate();
  train.validate();
  prune.validate();
  if (!std::is_sorted(mu_grid.begin(), mu_grid.end())) throw std::invalid_argument("sweep grid must be sorted");
}

json RunConfig::to_json() const {
  json d = {{"source", data.kind},
            {"classes", data.classes},
            {"train_per_class", data.train_per_class},
            {"test_per_class", data.test_per_class},
            {"size", data.size},
            {"channels", data.channels},
            {"noise", data.noise},
            {"jitter", data.jitter},
            {"cifar_train", data.cifar_train},
            {"cifar_test", data.cifar_test}};
  json j = {{"seed", seed},
            {"precision", precision},
            {"data", d},
            {"poison", poison.to_json()},
            {"train", train.to_json()},
            {"score", {{"variant", variant_name(variant)}, {"eps", eps}}},
            {"prune", {{"mu", prune.mu}}},
            {"sweep", {{"grid", mu_grid.empty() ? default_mu_grid() : mu_grid}}},
            {"defense_seed", defense_seed}};
  if (network) j["network"] = network->to_json();
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.precision = j.value("precision", c.precision);
  c.defense_seed = j.value("defense_seed", c.defense_seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.kind = d.value("source", c.data.kind);
    c.data.classes = d.value("classes", c.data.classes);
    c.data.train_per_class = d.value("train_per_class", c.data.train_per_class);
    c.data.test_per_class = d.value("test_per_class", c.data.test_per_class);
    c.data.size = d.value("size", c.data.size);
    c.data.channels = d.value("channels", c.data.channels);
    c.data.noise = d.value("noise", c.data.noise);
    c.data.jitter = d.value("jitter", c.data.jitter);
    c.data.cifar_train = d.value("cifar_train", c.data.cifar_train);
    c.data.cifar_test = d.value("cifar_test", c.data.cifar_test);
  }
  if (j.contains("network")) c.network = NetworkSpec::from_json(j.at("network"));
  if (j.contains("poison")) c.poison = PoisonConfig::from_json(j.at("poison"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("score")) {
    const auto& s = j.at("score");
    c.variant = parse_variant(s.value("variant", variant_name(c.variant)));
    c.eps = s.value("eps", c.eps);
  }
  if (j.contains("prune")) c.prune.mu = j.at("prune").value("mu", c.prune.mu);
  if (j.contains("sweep") && j.at("sweep").contains("grid")) c.mu_grid = parse_grid(j.at("sweep").at("grid"));
  return c;
}

RunConfig load_config(const fs::path& path) {
  require_input(path);
  return run_stage(kExitUsage, "config", [&] {
    std::ifstream is(path);
    return RunConfig::from_json(json::parse(is));
  });
}

void cmd_make_data(RunConfig& config, const RunPaths& paths) {
  run_stage(kExitUsage, "config", [&] { config.validate(); });
  fs::create_directories(paths.dir);
  RunData d = run_stage(kExitData, "data", [&] {
    RunData out;
    if (config.data.kind == "cifar") {
      std::vector<fs::path> tr(config.data.cifar_train.begin(), config.data.cifar_train.end());
      std::vector<fs::path> te(config.data.cifar_test.begin(), config.data.cifar_test.end());
      for (const auto& p : tr) require_input(p);
      for (const auto& p : te) require_input(p);
      out.train = load_cifar_binary(tr);
      out.test = load_cifar_binary(te);
    } else {
      SyntheticConfig sc;
      sc.classes = config.data.classes;
      sc.size = config.data.size;
      sc.channels = config.data.channels;
      sc.noise = config.data.noise;
      sc.jitter = config.data.jitter;
      sc.per_class = config.data.train_per_class;
      sc.seed = derive_seed(config.seed, SeedStream::kData);
      out.train = generate_synthetic(sc);
      sc.per_class = config.data.test_per_class;
      sc.seed = derive_seed(config.seed, SeedStream::kTestData);
      out.test = generate_synthetic(sc);
    }
    return out;
  });
  run_stage(kExitUsage, "config", [&] {
    config.resolve(d.train.channels(), d.train.height(), d.train.width(), d.train.num_classes);
  });
  run_stage(kExitData, "data", [&] {
    write_atomic(paths.train_data(), [&](const fs::path& tmp) { save_dataset(tmp, d.train); });
    write_atomic(paths.test_data(), [&](const fs::path& tmp) { save_dataset(tmp, d.test); });
    write_sidecar(paths.train_data(), "make-data", config);
    write_sidecar(paths.test_data(), "make-data", config);
    write_text(paths.resolved_config(), config.to_json().dump(2) + "\n");
  });
}

void cmd_train(RunConfig& config, const RunPaths& paths) {
  RunData d = load_run_data(config, paths);
  // Poisoning is part of the data stage: a rate that selects no record fails
  // here, before any model file exists.
  const PoisonedDataset poisoned = run_stage(kExitData, "poison", [&] { return poison_dataset(d.train, config.poison); });
  const Dataset defense =
      run_stage(kExitData, "defense", [&] { return build_defense_set(poisoned, config.defense_seed); });
  with_precision(config.precision, [&](auto tag) {
    using Scalar = decltype(tag);
    auto result = run_stage(kExitTrain, "train", [&] {
      auto init = init_params<Scalar>(*config.network, derive_seed(config.seed, SeedStream::kInit));
      return train(*config.network, std::move(init), poisoned.dataset, config.train);
    });
    run_stage(kExitTrain, "train", [&] {
      save_model_atomic(paths.backdoored_model(), *config.network, result.params);
      std::ostringstream hist;
      result.history.write_csv(hist);
      write_text(paths.history(), hist.str());
    });
  });
  run_stage(kExitData, "data", [&] {
    write_atomic(paths.poisoned_data(), [&](const fs::path& tmp) { save_dataset(tmp, poisoned.dataset); });
    write_atomic(paths.defense_data(), [&](const fs::path& tmp) { save_dataset(tmp, defense); });
  });
  for (const auto& p : {paths.backdoored_model(), paths.history(), paths.poisoned_data(), paths.defense_data()}) {
    write_sidecar(p, "train", config);
  }
}

void cmd_score(RunConfig& config, const RunPaths& paths, const fs::path& model) {
  load_run_data(config, paths);
  require_input(paths.defense_data());
  const Dataset defense = run_stage(kExitData, "data", [&] {
    return load_dataset(paths.defense_data(), static_cast<int>(config.network->num_classes));
  });
  with_precision(model_precision(model), [&](auto tag) {
    using Scalar = decltype(tag);
    const auto m = load_checked<Scalar>(model, config);
    const ScoreTable table =
        run_stage(kExitScore, "score", [&] { return score_network(m.spec, m.params, defense, config.variant, config.eps); });
    std::ostringstream os;
    table.write_csv(os);
    write_text(paths.scores(), os.str());
  });
  write_sidecar(paths.scores(), "score", config);
}

namespace {

ScoreTable load_scores(const RunConfig& config, const RunPaths& paths) {
  require_input(paths.scores());
  return run_stage(kExitUsage, "scores", [&] {
    std::ifstream is(paths.scores());
    return ScoreTable::read_csv(is, config.eps);
  });
}

struct EvalData {
  Dataset clean;
  Dataset triggered;
};

EvalData eval_data(const RunConfig& config, const RunData& d) {
  return run_stage(kExitData, "data", [&] {
    return EvalData{d.test, build_asr_eval_set(d.test, config.poison.trigger, config.poison.target_label)};
  });
}

}  // namespace

void cmd_prune(RunConfig& config, const RunPaths& paths, const fs::path& model) {
  load_run_data(config, paths);
  const ScoreTable table = load_scores(config, paths);
  with_precision(model_precision(model), [&](auto tag) {
    using Scalar = decltype(tag);
    const auto m = load_checked<Scalar>(model, config);
    const auto outcome = run_stage(kExitPrune, "prune", [&] { return prune(m.spec, m.params, table, config.prune); });
    run_stage(kExitPrune, "prune", [&] {
      save_model_atomic(paths.pruned_model(), m.spec, outcome.params);
      write_text(paths.prune_report(), outcome.report.to_json().dump(2) + "\n");
    });
  });
  write_sidecar(paths.pruned_model(), "prune", config);
  write_sidecar(paths.prune_report(), "prune", config);
}

json cmd_eval(RunConfig& config, const RunPaths& paths, const fs::path& model, const fs::path& output) {
  const RunData d = load_run_data(config, paths);
  const EvalData sets = eval_data(config, d);
  json out;
  with_precision(model_precision(model), [&](auto tag) {
    using Scalar = decltype(tag);
    const auto m = load_checked<Scalar>(model, config);
    const EvalResult r = run_stage(kExitEval, "eval", [&] {
      return evaluate(m.spec, m.params, EvalSets{sets.clean, sets.triggered, config.poison.target_label});
    });
    out = r.to_json();
    out["model"] = model.filename().string();
  });
  write_text(output, out.dump(2) + "\n");
  write_sidecar(output, "eval", config);
  return out;
}

void cmd_sweep(RunConfig& config, const RunPaths& paths, const fs::path& model) {
  const RunData d = load_run_data(config, paths);
  const EvalData sets = eval_data(config, d);
  const ScoreTable table = load_scores(config, paths);
  const auto grid = config.mu_grid.empty() ? default_mu_grid() : config.mu_grid;
  std::ostringstream os;
  os << "mu,acc,asr,pruned_count\n";
  with_precision(model_precision(model), [&](auto tag) {
    using Scalar = decltype(tag);
    const auto m = load_checked<Scalar>(model, config);
    const auto rows = run_stage(kExitEval, "sweep", [&] {
      return sweep_mu(m.spec, m.params, table, grid, EvalSets{sets.clean, sets.triggered, config.poison.target_label});
    });
    for (const auto& r : rows) {
      os << format_real(r.mu) << ',' << format_real(r.acc) << ',' << format_real(r.asr) << ',' << r.pruned_count
         << '\n';
    }
  });
  write_text(paths.sweep(), os.str());
  write_sidecar(paths.sweep(), "sweep", config);
}

void cmd_ablate(RunConfig& config, const RunPaths& paths, const fs::path& model) {
  const RunData d = load_run_data(config, paths);
  const EvalData sets = eval_data(config, d);
  require_input(paths.defense_data());
  const Dataset defense = run_stage(kExitData, "data", [&] {
    return load_dataset(paths.defense_data(), static_cast<int>(config.network->num_classes));
  });
  std::ostringstream os;
  os << "variant,acc,asr,pruned_count\n";
  with_precision(model_precision(model), [&](auto tag) {
    using Scalar = decltype(tag);
    const auto m = load_checked<Scalar>(model, config);
    const auto rows = run_stage(kExitScore, "ablate", [&] {
      return ablate(m.spec, m.params, defense, EvalSets{sets.clean, sets.triggered, config.poison.target_label},
                    config.prune.mu, config.eps);
    });
    for (const auto& r : rows) {
      os << variant_name(r.variant) << ',' << format_real(r.eval.acc) << ',' << format_real(r.eval.asr) << ','
         << r.pruned_count << '\n';
    }
  });
  write_text(paths.ablation(), os.str());
  write_sidecar(paths.ablation(), "ablate", config);
}

std::pair<std::vector<double>, std::vector<double>> read_csv_columns(const fs::path& csv, const std::string& a,
                                                                     const std::string& b) {
  require_input(csv);
  return run_stage(kExitUsage, "wilcoxon input", [&] {
    std::ifstream is(csv);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error(csv.string() + " is empty");
    auto split = [](const std::string& s) {
      std::vector<std::string> cells;
      std::stringstream ss(s);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cells.push_back(cell);
      }
      return cells;
    };
    const auto header = split(line);
    auto column = [&](const std::string& name) {
      const auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw std::runtime_error("column '" + name + "' not found in " + csv.string());
      return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ia = column(a), ib = column(b);
    std::pair<std::vector<double>, std::vector<double>> out;
    std::size_t row = 1;
    while (std::getline(is, line)) {
      ++row;
      if (line.empty() || line == "\r") continue;
      const auto cells = split(line);
      if (cells.size() != header.size()) {
        throw std::runtime_error(csv.string() + ":" + std::to_string(row) + ": wrong number of fields");
      }
      auto num = [&](const std::string& s) {
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
          throw std::runtime_error(csv.string() + ":" + std::to_string(row) + ": bad number '" + s + "'");
        }
        return v;
      };
      out.first.push_back(num(cells[ia]));
      out.second.push_back(num(cells[ib]));
    }
    return out;
  });
}

WilcoxonResult cmd_wilcoxon(const fs::path& csv, const std::string& column_a, const std::string& column_b,
                            Alternative alternative, const std::optional<fs::path>& output) {
  const auto [a, b] = read_csv_columns(csv, column_a, column_b);
  const WilcoxonResult r = run_stage(kExitEval, "wilcoxon", [&] { return wilcoxon_signed_rank(a, b, alternative); });
  if (output) {
    json j = r.to_json();
    j["input"] = {{"csv", csv.filename().string()}, {"a", column_a}, {"b", column_b}};
    write_text(*output, j.dump(2) + "\n");
  }
  return r;
}

json cmd_pipeline(RunConfig& config, const RunPaths& paths) {
  cmd_make_data(config, paths);
  cmd_train(config, paths);
  cmd_score(config, paths, paths.backdoored_model());
  cmd_prune(config, paths, paths.backdoored_model());
  const json before = cmd_eval(config, paths, paths.backdoored_model(), paths.dir / "eval_backdoored.json");
  const json after = cmd_eval(config, paths, paths.pruned_model(), paths.dir / "eval_pruned.json");
  std::ifstream rs(paths.prune_report());
  const json report = json::parse(rs);
  const Index pruned = report.at("total_pruned").get<Index>();
  const json summary = {{"config", config.to_json()},
                        {"backdoored", {{"acc", before.at("acc")}, {"asr", before.at("asr")}}},
                        {"pruned", {{"acc", after.at("acc")}, {"asr", after.at("asr")}}},
                        {"pruned_filters", pruned},
                        {"mu", config.prune.mu}};
  write_text(paths.summary(), summary.dump(2) + "\n");
  return summary;
}

}  // namespace bdnp::cli
