// Command-line front end: train, evaluate, sweep, ablate, export-trajectories.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "cemrrl/checkpoint.hpp"
#include "cemrrl/config.hpp"
#include "cemrrl/eval.hpp"
#include "cemrrl/trainer.hpp"
#include "cemrrl/trajectory_io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace cemrrl;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  std::optional<std::size_t> episodes;
  std::size_t eval_episodes = 100;
  std::string out;
  std::string checkpoint;
  std::optional<std::size_t> scenario;
  std::string ablation;
  std::string param;
  std::vector<double> values;
  std::size_t workers = 1;
};

Config resolve_config(const Options& o) {
  Config c;
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw UsageError("config file not found: " + o.config_path);
    try {
      c = load_config(o.config_path);
    } catch (const ConfigError& e) {
      throw UsageError(o.config_path + ": " + e.what());
    }
  }
  if (o.scenario) c.scenario.num_pedestrians = *o.scenario;
  if (!o.ablation.empty()) {
    const auto v = eval::parse_ablation(o.ablation);
    if (!v) throw UsageError("unknown ablation: " + o.ablation);
    c.terms = eval::apply_ablation(*v, c.terms);
  }
  return c;
}

fs::path prepare_out(const Options& o) {
  if (o.out.empty()) throw UsageError("--out is required");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + o.out + ": " + ec.message());
  return fs::path(o.out);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

LoadedLearner load_checkpoint_for(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(o.checkpoint)) throw UsageError("checkpoint not found: " + o.checkpoint);
  auto loaded = load_learner(read_checkpoint(o.checkpoint));
  if (o.scenario && *o.scenario != loaded.config.scenario.num_pedestrians)
    throw UsageError("checkpoint was trained with " + std::to_string(loaded.config.scenario.num_pedestrians) +
                     " pedestrians; actors cannot be evaluated with --scenario " + std::to_string(*o.scenario));
  return loaded;
}

int run_train(const Options& o) {
  Config c = resolve_config(o);
  const std::size_t episodes = o.episodes.value_or(c.hyper.max_episodes);
  const fs::path out = prepare_out(o);
  save_config((out / "config.resolved.json").string(), c);
  auto log = open_out(out / "metrics.jsonl");
  Trainer trainer(c, o.seed);
  for (std::size_t k = 0; k < episodes; ++k) {
    const auto e = trainer.run_episode();
    log << to_json(e).dump() << '\n';
  }
  log.flush();
  write_checkpoint((out / "final").string(), trainer.checkpoint());
  std::cout << "trained " << episodes << " episodes; checkpoint " << (out / "final").string() << '\n';
  return 0;
}

int run_evaluate(const Options& o) {
  const auto loaded = load_checkpoint_for(o);
  const auto report = eval::evaluate(eval::actor_policy_factory(*loaded.learner, loaded.config), loaded.config,
                                     o.episodes.value_or(1000), o.seed, o.workers);
  const std::vector<eval::TableRow> rows{
      {"scenario", std::to_string(loaded.config.scenario.num_pedestrians), report.metrics}};
  eval::write_table(std::cout, rows);
  if (!o.out.empty()) {
    const fs::path out = prepare_out(o);
    save_config((out / "config.resolved.json").string(), loaded.config);
    auto f = open_out(out / "metrics.json");
    f << eval::to_json(report.metrics).dump(2) << '\n';
  }
  return 0;
}

int run_sweep(const Options& o) {
  const auto param = eval::parse_sweep_param(o.param);
  if (!param) throw UsageError("--param must be alpha or lambda");
  if (o.values.empty()) throw UsageError("--values needs at least one number");
  const Config c = resolve_config(o);
  const auto rows = eval::sensitivity_sweep(c, *param, o.values, o.episodes.value_or(c.hyper.max_episodes),
                                            o.eval_episodes, o.seed, o.workers);
  eval::write_table(std::cout, rows);
  if (!o.out.empty()) {
    save_config((prepare_out(o) / "config.resolved.json").string(), c);
    auto f = open_out(prepare_out(o) / "sweep.csv");
    eval::write_table(f, rows);
  }
  return 0;
}

int run_ablate(const Options& o) {
  Options base = o;
  base.ablation.clear();
  const Config c = resolve_config(base);
  std::vector<eval::AblationVariant> variants;
  if (o.ablation.empty()) {
    variants = {eval::AblationVariant::Full, eval::AblationVariant::EB_PE, eval::AblationVariant::NF_PE,
                eval::AblationVariant::NF_EB, eval::AblationVariant::EntropyOnly};
  } else {
    const auto v = eval::parse_ablation(o.ablation);
    if (!v) throw UsageError("unknown ablation: " + o.ablation);
    variants = {*v};
  }
  const auto rows = eval::ablation_study(c, variants, o.episodes.value_or(c.hyper.max_episodes), o.eval_episodes,
                                         o.seed, o.workers);
  eval::write_table(std::cout, rows);
  if (!o.out.empty()) {
    save_config((prepare_out(o) / "config.resolved.json").string(), c);
    auto f = open_out(prepare_out(o) / "ablation.csv");
    eval::write_table(f, rows);
  }
  return 0;
}

int run_export(const Options& o) {
  const auto loaded = load_checkpoint_for(o);
  if (o.out.empty()) throw UsageError("--out is required");
  const fs::path path(o.out);
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  auto f = open_out(path);
  save_config(path.string() + ".config.json", loaded.config);
  const auto n = io::export_trajectories(*loaded.learner, loaded.config, o.episodes.value_or(1), o.seed, f);
  f.flush();
  if (!f) throw std::runtime_error("write failed: " + o.out);
  std::cout << "wrote " << n << " records to " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-robot social formation navigation: training and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON configuration file");
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("--episodes", o.episodes, "episode count");
    sub->add_option("--out", o.out, "output directory (file for export-trajectories)");
    sub->add_option("--scenario", o.scenario, "pedestrian count")->check(CLI::IsMember({5, 7, 9}));
    sub->add_option("--workers", o.workers, "evaluation worker threads")->check(CLI::PositiveNumber);
  };

  auto* train = app.add_subcommand("train", "train from scratch");
  common(train);
  train->add_option("--ablation", o.ablation, "Full, EB_PE, NF_PE, NF_EB or EntropyOnly");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  common(evaluate);
  evaluate->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();

  auto* sweep = app.add_subcommand("sweep", "alpha/lambda sensitivity sweep");
  common(sweep);
  sweep->add_option("--param", o.param, "alpha or lambda")->required();
  sweep->add_option("--values", o.values, "comma-separated values")->required()->delimiter(',');
  sweep->add_option("--eval-episodes", o.eval_episodes, "evaluation episodes per row");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
  common(ablate);
  ablate->add_option("--ablation", o.ablation, "single variant (default: all)");
  ablate->add_option("--eval-episodes", o.eval_episodes, "evaluation episodes per row");

  auto* exporter = app.add_subcommand("export-trajectories", "write per-step trajectories of a checkpoint");
  common(exporter);
  exporter->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return run_train(o);
    if (*evaluate) return run_evaluate(o);
    if (*sweep) return run_sweep(o);
    if (*ablate) return run_ablate(o);
    if (*exporter) return run_export(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
