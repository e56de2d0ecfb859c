#pragma once

// Per-timestep trajectory export, one JSON object per line.
//
// Schema "cemrrl.trajectory", version 1. Each record describes the world
// after one environment step:
//   episode, step (0-based), t (elapsed seconds after the step),
//   agents[]: {kind, x, y, vx, vy, heading, radius}, leader first, then
//             followers, then pedestrians,
//   goal: [x, y] of the leader,
//   actions[]: [v, w] per robot (as commanded, before clamping and noise),
//   rewards[]: extrinsic reward per robot,
//   intrinsic: {b_s, n_d, c_s, total},
//   formation_errors[]: one per follower,
//   termination: Running | GoalReached | Collision | Timeout.

#include "cemrrl/eval.hpp"
#include "cemrrl/intrinsic.hpp"
#include "cemrrl/trainer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cemrrl::io {

inline constexpr const char* kTrajectorySchema = "cemrrl.trajectory";
inline constexpr int kTrajectoryVersion = 1;

struct AgentRecord {
  std::string kind;
  double x = 0, y = 0, vx = 0, vy = 0, heading = 0, radius = 0;
  friend bool operator==(const AgentRecord&, const AgentRecord&) = default;
};

struct TrajectoryRecord {
  std::size_t episode = 0;
  std::size_t step = 0;
  double t = 0.0;
  std::vector<AgentRecord> agents;
  std::array<double, 2> goal{0.0, 0.0};
  std::vector<std::array<double, 2>> actions;
  std::vector<double> rewards;
  intrinsic::Decomposition intrinsic;
  std::vector<double> formation_errors;
  std::string termination = "Running";
};

class TrajectoryFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const TrajectoryRecord& r) {
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : r.agents)
    agents.push_back({{"kind", a.kind},   {"x", a.x},   {"y", a.y},          {"vx", a.vx},
                      {"vy", a.vy},       {"heading", a.heading}, {"radius", a.radius}});
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : r.actions) actions.push_back({a[0], a[1]});
  return {{"schema", kTrajectorySchema},
          {"schema_version", kTrajectoryVersion},
          {"episode", r.episode},
          {"step", r.step},
          {"t", r.t},
          {"agents", agents},
          {"goal", {r.goal[0], r.goal[1]}},
          {"actions", actions},
          {"rewards", r.rewards},
          {"intrinsic",
           {{"b_s", r.intrinsic.b_s}, {"n_d", r.intrinsic.n_d}, {"c_s", r.intrinsic.c_s}, {"total", r.intrinsic.total}}},
          {"formation_errors", r.formation_errors},
          {"termination", r.termination}};
}

inline TrajectoryRecord parse_trajectory_record(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw TrajectoryFormatError(std::string("malformed trajectory line: ") + e.what());
  }
  if (j.value("schema", "") != kTrajectorySchema) throw TrajectoryFormatError("not a trajectory record");
  if (j.value("schema_version", -1) != kTrajectoryVersion)
    throw TrajectoryFormatError("unsupported trajectory schema_version " + j.value("schema_version", nlohmann::json()).dump());
  try {
    TrajectoryRecord r;
    r.episode = j.at("episode").get<std::size_t>();
    r.step = j.at("step").get<std::size_t>();
    r.t = j.at("t").get<double>();
    for (const auto& a : j.at("agents"))
      r.agents.push_back({a.at("kind").get<std::string>(), a.at("x").get<double>(), a.at("y").get<double>(),
                          a.at("vx").get<double>(), a.at("vy").get<double>(), a.at("heading").get<double>(),
                          a.at("radius").get<double>()});
    r.goal = {j.at("goal").at(0).get<double>(), j.at("goal").at(1).get<double>()};
    for (const auto& a : j.at("actions")) r.actions.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
    r.rewards = j.at("rewards").get<std::vector<double>>();
    const auto& in = j.at("intrinsic");
    r.intrinsic = {in.at("b_s").get<double>(), in.at("n_d").get<double>(), in.at("c_s").get<double>(),
                   in.at("total").get<double>()};
    r.formation_errors = j.at("formation_errors").get<std::vector<double>>();
    r.termination = j.at("termination").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw TrajectoryFormatError(std::string("trajectory record missing or mistyped field: ") + e.what());
  }
}

inline std::vector<TrajectoryRecord> read_trajectories(std::istream& in) {
  std::vector<TrajectoryRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_trajectory_record(line));
  return out;
}

inline TrajectoryRecord make_record(std::size_t episode, std::size_t step, const env::Environment& environment,
                                    const env::JointAction& action, const env::StepOutcome& outcome,
                                    const intrinsic::Decomposition& terms) {
  TrajectoryRecord r;
  r.episode = episode;
  r.step = step;
  r.t = environment.elapsed();
  for (const auto& a : environment.world())
    r.agents.push_back({to_string(a.kind), a.position.x(), a.position.y(), a.velocity.x(), a.velocity.y(), a.heading,
                        a.radius});
  const auto& goal = environment.world().front().goal;
  if (goal) r.goal = {goal->x(), goal->y()};
  for (const auto& a : action) r.actions.push_back({a.v, a.w});
  r.rewards = outcome.extrinsic_rewards;
  r.intrinsic = terms;
  r.formation_errors = outcome.formation_errors;
  r.termination = to_string(outcome.termination);
  return r;
}

/// Rolls out `episodes` evaluation episodes with the learner's actors and
/// writes one record per step. The intrinsic decomposition is evaluated
/// with the learner's frozen intrinsic networks and temperature. Returns the
/// number of records written.
inline std::size_t export_trajectories(const Learner& learner, const Config& config, std::size_t episodes,
                                       std::uint64_t seed, std::ostream& out) {
  env::Environment environment(config.scenario, config.orca);
  eval::ActorPolicy policy(learner.actors(), config.scenario, config.hyper.history_length, !config.stochastic_eval);
  intrinsic::RewardComputer rewards(config.network.embed_dim, config.hyper.lambda_reg, config.hyper.alpha_scale,
                                    config.hyper.intrinsic_scale, config.terms);
  std::size_t written = 0;
  for (std::size_t k = 0; k < episodes; ++k) {
    Rng env_rng = make_rng(seed, Stream::Evaluation, 2 * k);
    Rng policy_rng = make_rng(seed, Stream::Evaluation, 2 * k + 1);
    JointObservation obs = environment.reset(env_rng);
    policy.begin_episode(obs);
    rewards.begin_episode();
    env::StepOutcome outcome;
    do {
      const auto action = policy.act(obs, policy_rng);
      outcome = environment.step(action, env_rng);
      const auto terms = rewards.step(learner.rnd(), learner.embed(), learner.temperature().beta(), obs.flat,
                                      outcome.next_obs.flat, policy.last_log_prob());
      out << to_json(make_record(k, environment.steps() - 1, environment, action, outcome, terms)).dump() << '\n';
      ++written;
      obs = outcome.next_obs;
    } while (!outcome.done);
  }
  return written;
}

}  // namespace cemrrl::io
