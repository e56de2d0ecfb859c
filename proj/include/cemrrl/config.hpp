#pragma once

// Run configuration and its JSON form. Every key mirrors a field name;
// missing keys keep their defaults, unknown keys are rejected.

#include "cemrrl/core.hpp"
#include "cemrrl/intrinsic.hpp"
#include "cemrrl/nn.hpp"
#include "cemrrl/orca.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

namespace cemrrl {

struct NetworkConfig {
  std::vector<std::size_t> actor_hidden{256, 256};
  std::vector<std::size_t> critic_hidden{256, 256};
  std::size_t embed_hidden = 128;
  std::size_t embed_dim = 16;
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
  double log_std_min = -20.0;
  double log_std_max = 2.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  nn::NetOptions net_options() const { return {leaky_slope, norm_eps}; }
  nn::AdamConfig adam() const { return {adam_beta1, adam_beta2, adam_eps}; }
  nn::PolicyOptions policy_options() const { return {log_std_min, log_std_max}; }
};

struct Config {
  ScenarioConfig scenario;
  HyperParams hyper;
  orca::OrcaParams orca;
  NetworkConfig network;
  intrinsic::TermMask terms;
  bool stochastic_eval = false;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void validate(const Config& c) {
  validate(c.scenario);
  validate(c.hyper);
  orca::validate(c.orca);
}

namespace detail {

using nlohmann::json;

inline json vec2_to_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
inline Vec2 vec2_from_json(const json& j) { return Vec2(j.at(0).get<double>(), j.at(1).get<double>()); }

// Reads `key` into `field` when present and records it as consumed.
template <class T>
void read(const json& j, const char* key, T& field, std::set<std::string>& seen) {
  seen.insert(key);
  if (j.contains(key)) field = j.at(key).get<T>();
}

template <class T>
void read_opt(const json& j, const char* key, std::optional<T>& field, std::set<std::string>& seen) {
  seen.insert(key);
  if (j.contains(key) && !j.at(key).is_null()) field = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& section) {
  for (const auto& [k, v] : j.items())
    if (!seen.count(k)) throw ConfigError("unknown configuration key '" + section + "." + k + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const Config& c) {
  using nlohmann::json;
  const auto& s = c.scenario;
  json offsets = json::array();
  for (const auto& o : s.formation_offsets) offsets.push_back(detail::vec2_to_json(o));
  json scenario = {
      {"num_followers", s.num_followers},
      {"num_pedestrians", s.num_pedestrians},
      {"circle_radius", s.circle_radius},
      {"formation_offsets", offsets},
      {"robot_radius", s.robot_radius},
      {"pedestrian_radius", s.pedestrian_radius},
      {"robot_preferred_speed", s.robot_preferred_speed},
      {"pedestrian_preferred_speed", s.pedestrian_preferred_speed},
      {"v_max", s.v_max},
      {"w_max", s.w_max},
      {"dt", s.dt},
      {"time_limit", s.time_limit},
      {"goal_tolerance", s.goal_tolerance},
      {"noise_sigma", s.noise_sigma},
      {"leader_spawn_half_width", s.leader_spawn_half_width},
      {"follower_spawn_sigma", s.follower_spawn_sigma},
      {"pedestrian_goal_jitter", s.pedestrian_goal_jitter},
      {"follower_collision_ends_episode", s.follower_collision_ends_episode},
  };
  const auto& h = c.hyper;
  json hyper = {
      {"gamma", h.gamma},
      {"alpha_scale", h.alpha_scale},
      {"lambda_reg", h.lambda_reg},
      {"beta_init", h.beta_init},
      {"target_entropy", h.resolved_target_entropy(s)},
      {"batch_size", h.batch_size},
      {"intrinsic_batch_size", h.resolved_intrinsic_batch()},
      {"buffer_capacity", h.buffer_capacity},
      {"basic_lr", h.basic_lr},
      {"max_episodes", h.max_episodes},
      {"fast_decay_exponent", h.fast_decay_exponent},
      {"slow_decay_exponent", h.slow_decay_exponent},
      {"fast_gain", h.fast_gain},
      {"slow_gain", h.slow_gain},
      {"target_update_interval", h.target_update_interval},
      {"target_update_rate", h.target_update_rate},
      {"history_length", h.history_length},
      {"actor_baseline", h.actor_baseline},
      {"intrinsic_scale", h.intrinsic_scale},
  };
  json orca = {{"time_horizon", c.orca.time_horizon},
               {"neighbor_dist", c.orca.neighbor_dist},
               {"max_neighbors", c.orca.max_neighbors},
               {"v_max", c.orca.v_max},
               {"robot_share", c.orca.robot_share}};
  const auto& n = c.network;
  json network = {{"actor_hidden", n.actor_hidden}, {"critic_hidden", n.critic_hidden},
                  {"embed_hidden", n.embed_hidden}, {"embed_dim", n.embed_dim},
                  {"leaky_slope", n.leaky_slope},   {"norm_eps", n.norm_eps},
                  {"log_std_min", n.log_std_min},   {"log_std_max", n.log_std_max},
                  {"adam_beta1", n.adam_beta1},     {"adam_beta2", n.adam_beta2},
                  {"adam_eps", n.adam_eps}};
  json terms = {{"use_novelty_differential", c.terms.use_novelty_differential},
                {"use_episodic_bonus", c.terms.use_episodic_bonus},
                {"use_entropy", c.terms.use_entropy},
                {"use_exploration_term", c.terms.use_exploration_term}};
  return {{"scenario", scenario}, {"hyper", hyper},  {"orca", orca},
          {"network", network},   {"terms", terms}, {"stochastic_eval", c.stochastic_eval}};
}

/// Overlays `j` on `base`. Keys absent from `j` keep the base value.
inline Config config_from_json(const nlohmann::json& j, Config base = {}) {
  using detail::read;
  using detail::read_opt;
  using nlohmann::json;
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::set<std::string> top{"scenario", "hyper", "orca", "network", "terms", "stochastic_eval"};
  for (const auto& [k, v] : j.items())
    if (!top.count(k)) throw ConfigError("unknown configuration section '" + k + "'");
  if (j.contains("stochastic_eval")) base.stochastic_eval = j.at("stochastic_eval").get<bool>();

  try {
    if (j.contains("scenario")) {
      const auto& js = j.at("scenario");
      auto& s = base.scenario;
      std::set<std::string> seen;
      const bool followers_given = js.contains("num_followers");
      read(js, "num_followers", s.num_followers, seen);
      read(js, "num_pedestrians", s.num_pedestrians, seen);
      read(js, "circle_radius", s.circle_radius, seen);
      seen.insert("formation_offsets");
      if (js.contains("formation_offsets")) {
        s.formation_offsets.clear();
        for (const auto& o : js.at("formation_offsets")) s.formation_offsets.push_back(detail::vec2_from_json(o));
      } else if (followers_given && s.formation_offsets.size() != s.num_followers) {
        throw ConfigError("formation_offsets must be given when num_followers changes");
      }
      read(js, "robot_radius", s.robot_radius, seen);
      read(js, "pedestrian_radius", s.pedestrian_radius, seen);
      read(js, "robot_preferred_speed", s.robot_preferred_speed, seen);
      read(js, "pedestrian_preferred_speed", s.pedestrian_preferred_speed, seen);
      read(js, "v_max", s.v_max, seen);
      read(js, "w_max", s.w_max, seen);
      read(js, "dt", s.dt, seen);
      read(js, "time_limit", s.time_limit, seen);
      read(js, "goal_tolerance", s.goal_tolerance, seen);
      read(js, "noise_sigma", s.noise_sigma, seen);
      read(js, "leader_spawn_half_width", s.leader_spawn_half_width, seen);
      read(js, "follower_spawn_sigma", s.follower_spawn_sigma, seen);
      read(js, "pedestrian_goal_jitter", s.pedestrian_goal_jitter, seen);
      read(js, "follower_collision_ends_episode", s.follower_collision_ends_episode, seen);
      detail::reject_unknown(js, seen, "scenario");
    }
    if (j.contains("hyper")) {
      const auto& jh = j.at("hyper");
      auto& h = base.hyper;
      std::set<std::string> seen;
      read(jh, "gamma", h.gamma, seen);
      read(jh, "alpha_scale", h.alpha_scale, seen);
      read(jh, "lambda_reg", h.lambda_reg, seen);
      read(jh, "beta_init", h.beta_init, seen);
      read_opt(jh, "target_entropy", h.target_entropy, seen);
      read(jh, "batch_size", h.batch_size, seen);
      read_opt(jh, "intrinsic_batch_size", h.intrinsic_batch_size, seen);
      read(jh, "buffer_capacity", h.buffer_capacity, seen);
      read(jh, "basic_lr", h.basic_lr, seen);
      read(jh, "max_episodes", h.max_episodes, seen);
      read(jh, "fast_decay_exponent", h.fast_decay_exponent, seen);
      read(jh, "slow_decay_exponent", h.slow_decay_exponent, seen);
      read(jh, "fast_gain", h.fast_gain, seen);
      read(jh, "slow_gain", h.slow_gain, seen);
      read(jh, "target_update_interval", h.target_update_interval, seen);
      read(jh, "target_update_rate", h.target_update_rate, seen);
      read(jh, "history_length", h.history_length, seen);
      read(jh, "actor_baseline", h.actor_baseline, seen);
      read(jh, "intrinsic_scale", h.intrinsic_scale, seen);
      detail::reject_unknown(jh, seen, "hyper");
    }
    if (j.contains("orca")) {
      const auto& jo = j.at("orca");
      std::set<std::string> seen;
      read(jo, "time_horizon", base.orca.time_horizon, seen);
      read(jo, "neighbor_dist", base.orca.neighbor_dist, seen);
      read(jo, "max_neighbors", base.orca.max_neighbors, seen);
      read(jo, "v_max", base.orca.v_max, seen);
      read(jo, "robot_share", base.orca.robot_share, seen);
      detail::reject_unknown(jo, seen, "orca");
    }
    if (j.contains("network")) {
      const auto& jn = j.at("network");
      auto& n = base.network;
      std::set<std::string> seen;
      read(jn, "actor_hidden", n.actor_hidden, seen);
      read(jn, "critic_hidden", n.critic_hidden, seen);
      read(jn, "embed_hidden", n.embed_hidden, seen);
      read(jn, "embed_dim", n.embed_dim, seen);
      read(jn, "leaky_slope", n.leaky_slope, seen);
      read(jn, "norm_eps", n.norm_eps, seen);
      read(jn, "log_std_min", n.log_std_min, seen);
      read(jn, "log_std_max", n.log_std_max, seen);
      read(jn, "adam_beta1", n.adam_beta1, seen);
      read(jn, "adam_beta2", n.adam_beta2, seen);
      read(jn, "adam_eps", n.adam_eps, seen);
      detail::reject_unknown(jn, seen, "network");
    }
    if (j.contains("terms")) {
      const auto& jt = j.at("terms");
      auto& t = base.terms;
      std::set<std::string> seen;
      read(jt, "use_novelty_differential", t.use_novelty_differential, seen);
      read(jt, "use_episodic_bonus", t.use_episodic_bonus, seen);
      read(jt, "use_entropy", t.use_entropy, seen);
      read(jt, "use_exploration_term", t.use_exploration_term, seen);
      detail::reject_unknown(jt, seen, "terms");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
  try {
    validate(base);
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  return base;
}

inline Config load_config(const std::string& path, Config base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse configuration file " + path + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

inline void save_config(const std::string& path, const Config& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write configuration file: " + path);
  out << to_json(c).dump(2) << '\n';
}

}  // namespace cemrrl
