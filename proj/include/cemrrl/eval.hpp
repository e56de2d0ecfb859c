#pragma once

// Evaluation harness: deterministic rollouts of trained actors, metric
// reduction, ablation masks, and the alpha/lambda sensitivity sweep.

#include "cemrrl/config.hpp"
#include "cemrrl/env.hpp"
#include "cemrrl/intrinsic.hpp"
#include "cemrrl/marl.hpp"
#include "cemrrl/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace cemrrl::eval {

struct Metrics {
  double success_rate = 0.0;
  double collision_rate = 0.0;
  double timeout_rate = 0.0;
  double nav_time = std::numeric_limits<double>::quiet_NaN();  // NaN when nothing succeeded
  double afe = 0.0;
  std::size_t episodes = 0;
  std::size_t successes = 0;
  std::size_t collisions = 0;
  std::size_t timeouts = 0;
};

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j = {{"success", m.success_rate},  {"collision", m.collision_rate}, {"timeout", m.timeout_rate},
                      {"afe", m.afe},               {"episodes", m.episodes},        {"successes", m.successes},
                      {"collisions", m.collisions}, {"timeouts", m.timeouts}};
  j["nav_time"] = std::isnan(m.nav_time) ? nlohmann::json(nullptr) : nlohmann::json(m.nav_time);
  return j;
}

struct EpisodeResult {
  std::size_t episode = 0;
  env::Termination termination = env::Termination::Running;
  std::size_t steps = 0;
  double nav_time = 0.0;
  double afe = 0.0;
};

/// Mean of e over every (step, follower) pair. `per_step[t][j]` is the
/// error of follower j after step t.
inline double mean_formation_error(const std::vector<std::vector<double>>& per_step) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : per_step)
    for (double e : row) {
      sum += e;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline Metrics summarize(std::span<const EpisodeResult> results) {
  require(!results.empty(), "cannot summarize an empty evaluation");
  Metrics m;
  m.episodes = results.size();
  double nav = 0.0, afe = 0.0;
  for (const auto& r : results) {
    switch (r.termination) {
      case env::Termination::GoalReached:
        ++m.successes;
        nav += r.nav_time;
        break;
      case env::Termination::Collision:
        ++m.collisions;
        break;
      case env::Termination::Timeout:
        ++m.timeouts;
        break;
      case env::Termination::Running:
        throw ContractViolation("evaluation episode ended while still running");
    }
    afe += r.afe;
  }
  const auto n = static_cast<double>(m.episodes);
  m.success_rate = static_cast<double>(m.successes) / n;
  m.collision_rate = static_cast<double>(m.collisions) / n;
  m.timeout_rate = static_cast<double>(m.timeouts) / n;
  if (m.successes) m.nav_time = nav / static_cast<double>(m.successes);
  m.afe = afe / n;
  return m;
}

// ---------------------------------------------------------------------------
// Policies.

/// A joint controller driven one step at a time. Implementations keep any
/// per-episode memory (histories) themselves.
class JointPolicy {
 public:
  virtual ~JointPolicy() = default;
  virtual void begin_episode(const JointObservation& obs) = 0;
  virtual env::JointAction act(const JointObservation& obs, Rng& rng) = 0;
};

using PolicyFactory = std::function<std::unique_ptr<JointPolicy>()>;

/// Decentralized execution of trained actors: robot i sees only
/// obs.per_robot[i] and its own past actions.
class ActorPolicy : public JointPolicy {
 public:
  ActorPolicy(std::vector<marl::Actor> actors, const ScenarioConfig& scenario, std::size_t history,
              bool deterministic = true)
      : actors_(std::move(actors)), deterministic_(deterministic) {
    for (std::size_t i = 0; i < actors_.size(); ++i) trackers_.emplace_back(history, scenario.local_obs_dim(i), 2);
  }

  void begin_episode(const JointObservation& obs) override {
    for (std::size_t i = 0; i < trackers_.size(); ++i) trackers_[i].reset(obs.per_robot.at(i).flatten());
    started_ = true;
    first_ = true;
  }

  env::JointAction act(const JointObservation& obs, Rng& rng) override {
    require(started_, "begin_episode must precede act");
    env::JointAction out(actors_.size());
    last_log_prob_ = 0.0;
    for (std::size_t i = 0; i < actors_.size(); ++i) {
      if (!first_) trackers_[i].push(last_actions_[i], obs.per_robot.at(i).flatten());
      const auto s = actors_[i].act(trackers_[i].encode(), rng, deterministic_);
      out[i] = {s.action[0], s.action[1]};
      last_log_prob_ += s.log_prob;
      if (last_actions_.size() <= i) last_actions_.resize(i + 1);
      last_actions_[i] = s.action;
    }
    first_ = false;
    return out;
  }

  /// Joint log-probability of the most recent actions.
  double last_log_prob() const { return last_log_prob_; }

 private:
  std::vector<marl::Actor> actors_;
  std::vector<marl::HistoryTracker> trackers_;
  std::vector<Vector> last_actions_;
  bool deterministic_;
  bool started_ = false;
  bool first_ = true;
  double last_log_prob_ = 0.0;
};

inline PolicyFactory actor_policy_factory(const Learner& learner, const Config& config) {
  auto actors = std::make_shared<const std::vector<marl::Actor>>(learner.actors());
  return [actors, scenario = config.scenario, h = config.hyper.history_length,
          det = !config.stochastic_eval]() -> std::unique_ptr<JointPolicy> {
    return std::make_unique<ActorPolicy>(*actors, scenario, h, det);
  };
}

// ---------------------------------------------------------------------------
// Rollouts.

/// Called after each environment step.
using StepObserver = std::function<void(std::size_t episode, std::size_t step, const env::Environment& env,
                                        const env::JointAction& action, const env::StepOutcome& outcome)>;

inline EpisodeResult run_episode(env::Environment& environment, JointPolicy& policy, Rng& env_rng, Rng& policy_rng,
                                 std::size_t episode, const StepObserver& observer = {}) {
  JointObservation obs = environment.reset(env_rng);
  policy.begin_episode(obs);
  std::vector<std::vector<double>> errors;
  env::StepOutcome outcome;
  do {
    const auto action = policy.act(obs, policy_rng);
    outcome = environment.step(action, env_rng);
    errors.push_back(outcome.formation_errors);
    if (observer) observer(episode, environment.steps() - 1, environment, action, outcome);
    obs = outcome.next_obs;
  } while (!outcome.done);
  EpisodeResult r;
  r.episode = episode;
  r.termination = outcome.termination;
  r.steps = environment.steps();
  r.nav_time = environment.elapsed();
  r.afe = mean_formation_error(errors);
  return r;
}

struct EvaluationReport {
  Metrics metrics;
  std::vector<EpisodeResult> episodes;
};

/// Episode k uses its own environment and policy streams derived from
/// (seed, k), so results do not depend on the worker count. An observer
/// forces a single worker.
inline EvaluationReport evaluate(const PolicyFactory& factory, const Config& config, std::size_t episodes,
                                 std::uint64_t seed, std::size_t workers = 1, const StepObserver& observer = {}) {
  require(episodes >= 1, "evaluate needs at least one episode");
  if (observer || workers == 0) workers = 1;
  workers = std::min(workers, episodes);
  std::vector<EpisodeResult> results(episodes);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    env::Environment environment(config.scenario, config.orca);
    auto policy = factory();
    for (std::size_t k = next++; k < episodes; k = next++) {
      Rng env_rng = make_rng(seed, Stream::Evaluation, 2 * k);
      Rng policy_rng = make_rng(seed, Stream::Evaluation, 2 * k + 1);
      results[k] = run_episode(environment, *policy, env_rng, policy_rng, k, observer);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  EvaluationReport report;
  report.metrics = summarize(results);
  report.episodes = std::move(results);
  return report;
}

inline EvaluationReport evaluate_checkpoint(const Checkpoint& ckpt, std::size_t episodes, std::uint64_t seed,
                                            std::size_t workers = 1) {
  const auto loaded = load_learner(ckpt);
  return evaluate(actor_policy_factory(*loaded.learner, loaded.config), loaded.config, episodes, seed, workers);
}

// ---------------------------------------------------------------------------
// Ablations.

enum class AblationVariant { Full, EB_PE, NF_PE, NF_EB, EntropyOnly };

inline std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::Full: return "Full";
    case AblationVariant::EB_PE: return "EB_PE";
    case AblationVariant::NF_PE: return "NF_PE";
    case AblationVariant::NF_EB: return "NF_EB";
    case AblationVariant::EntropyOnly: return "EntropyOnly";
  }
  return "?";
}

inline std::optional<AblationVariant> parse_ablation(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (auto v : {AblationVariant::Full, AblationVariant::EB_PE, AblationVariant::NF_PE, AblationVariant::NF_EB,
                 AblationVariant::EntropyOnly})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

/// EB_PE drops the novelty differential, NF_PE the episodic bonus, NF_EB
/// the entropy term; EntropyOnly drops the whole exploration product.
inline intrinsic::TermMask apply_ablation(AblationVariant v, intrinsic::TermMask mask) {
  switch (v) {
    case AblationVariant::Full: break;
    case AblationVariant::EB_PE: mask.use_novelty_differential = false; break;
    case AblationVariant::NF_PE: mask.use_episodic_bonus = false; break;
    case AblationVariant::NF_EB: mask.use_entropy = false; break;
    case AblationVariant::EntropyOnly: mask.use_exploration_term = false; break;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Tables.

struct TableRow {
  std::string param;
  std::string value;
  Metrics metrics;
};

inline void write_table(std::ostream& out, std::span<const TableRow> rows) {
  out << "param,value,success,collision,nav_time,afe\n";
  for (const auto& r : rows) {
    out << r.param << ',' << r.value << ',' << r.metrics.success_rate << ',' << r.metrics.collision_rate << ',';
    if (std::isnan(r.metrics.nav_time))
      out << "nan";
    else
      out << r.metrics.nav_time;
    out << ',' << r.metrics.afe << '\n';
  }
}

enum class SweepParam { Alpha, Lambda };

inline std::string to_string(SweepParam p) { return p == SweepParam::Alpha ? "alpha" : "lambda"; }

inline std::optional<SweepParam> parse_sweep_param(const std::string& s) {
  if (s == "alpha") return SweepParam::Alpha;
  if (s == "lambda") return SweepParam::Lambda;
  return std::nullopt;
}

/// Train from scratch, then evaluate, once per configuration.
inline Metrics train_and_evaluate(const Config& config, std::size_t train_episodes, std::size_t eval_episodes,
                                  std::uint64_t seed, std::size_t workers = 1) {
  Trainer trainer(config, seed);
  trainer.train(train_episodes);
  return evaluate(actor_policy_factory(trainer.learner(), config), config, eval_episodes, seed, workers).metrics;
}

inline std::vector<TableRow> sensitivity_sweep(const Config& base, SweepParam param, std::span<const double> values,
                                               std::size_t train_episodes, std::size_t eval_episodes,
                                               std::uint64_t seed, std::size_t workers = 1) {
  require(!values.empty(), "sweep needs at least one value");
  std::vector<TableRow> rows;
  for (double v : values) {
    Config c = base;
    (param == SweepParam::Alpha ? c.hyper.alpha_scale : c.hyper.lambda_reg) = v;
    validate(c);
    std::ostringstream label;
    label << v;
    rows.push_back({to_string(param), label.str(), train_and_evaluate(c, train_episodes, eval_episodes, seed, workers)});
  }
  return rows;
}

inline std::vector<TableRow> ablation_study(const Config& base, std::span<const AblationVariant> variants,
                                            std::size_t train_episodes, std::size_t eval_episodes,
                                            std::uint64_t seed, std::size_t workers = 1) {
  std::vector<TableRow> rows;
  for (auto v : variants) {
    Config c = base;
    c.terms = apply_ablation(v, base.terms);
    rows.push_back({"variant", to_string(v), train_and_evaluate(c, train_episodes, eval_episodes, seed, workers)});
  }
  return rows;
}

}  // namespace cemrrl::eval
