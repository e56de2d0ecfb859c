#pragma once

// Domain types shared by the simulator, the learners and the evaluation
// harness: agent states, observation layouts, scenario and learning
// configuration.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cemrrl {

using Vec2 = Eigen::Vector2d;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Raised when a caller breaks a documented precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool condition, const std::string& what) {
  if (!condition) throw ContractViolation(what);
}

inline bool is_finite(const Vec2& v) { return std::isfinite(v.x()) && std::isfinite(v.y()); }

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = a - two_pi * std::floor((a + std::numbers::pi) / two_pi);
  if (w >= std::numbers::pi) w -= two_pi;
  return w;
}

enum class AgentKind { Leader, Follower, Pedestrian };

inline const char* to_string(AgentKind k) {
  switch (k) {
    case AgentKind::Leader: return "leader";
    case AgentKind::Follower: return "follower";
    case AgentKind::Pedestrian: return "pedestrian";
  }
  return "?";
}

/// Full kinematic and hidden state of one robot or pedestrian.
///
/// The observable part is [p_x, p_y, v_x, v_y, r]. Hidden parts are
/// [goal_x, goal_y, preferred_speed, heading] for the leader and
/// [preferred_speed, heading] for followers and pedestrians.
struct AgentState {
  AgentKind kind = AgentKind::Pedestrian;
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  double radius = 0.3;
  double preferred_speed = 1.0;
  double heading = 0.0;
  std::optional<Vec2> goal;              // leader and pedestrians
  std::optional<Vec2> formation_offset;  // followers

  bool is_robot() const { return kind != AgentKind::Pedestrian; }
};

/// Checks the AgentState invariants; throws ContractViolation on failure.
inline void validate(const AgentState& s) {
  require(is_finite(s.position) && is_finite(s.velocity), "agent state must be finite");
  require(s.radius > 0.0, "agent radius must be positive");
  require(s.preferred_speed > 0.0, "preferred speed must be positive");
  require(s.heading >= -std::numbers::pi && s.heading < std::numbers::pi,
          "heading must lie in [-pi, pi)");
  if (s.kind == AgentKind::Follower) require(s.formation_offset.has_value(), "follower needs an offset");
  if (s.kind == AgentKind::Leader) require(s.goal.has_value(), "leader needs a goal");
}

using ObservableState = Eigen::Matrix<double, 5, 1>;

inline ObservableState observable(const AgentState& s) {
  ObservableState o;
  o << s.position.x(), s.position.y(), s.velocity.x(), s.velocity.y(), s.radius;
  return o;
}

/// Own full state followed by the observable state of every other agent.
struct RobotObservation {
  Vector self_full;
  std::vector<ObservableState> others_observable;

  std::size_t dim() const { return static_cast<std::size_t>(self_full.size()) + 5 * others_observable.size(); }

  /// [self_full, others_observable[0], others_observable[1], ...]
  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(dim()));
    out.head(self_full.size()) = self_full;
    Eigen::Index at = self_full.size();
    for (const auto& o : others_observable) {
      out.segment<5>(at) = o;
      at += 5;
    }
    return out;
  }
};

/// Per-robot local observations (possibly noisy) plus the compact joint
/// vector consumed by the intrinsic-reward networks and the critics.
///
/// Flat layout: [leader s_o (5), leader goal (2), follower_1 s_o (5), ...,
/// follower_n s_o (5), pedestrian_1 s_o (5), ..., pedestrian_m s_o (5)].
struct JointObservation {
  std::vector<RobotObservation> per_robot;
  Vector flat;
};

/// Simulation scenario. Defaults reproduce the one-leader, two-follower,
/// five-pedestrian circle-crossing benchmark.
struct ScenarioConfig {
  std::size_t num_followers = 2;
  std::size_t num_pedestrians = 5;
  double circle_radius = 5.0;
  std::vector<Vec2> formation_offsets{Vec2(-1.0, 0.8), Vec2(-1.0, -0.8)};
  double robot_radius = 0.3;
  double pedestrian_radius = 0.3;
  double robot_preferred_speed = 1.0;
  double pedestrian_preferred_speed = 1.0;
  double v_max = 1.0;
  double w_max = 1.0;
  double dt = 0.25;
  double time_limit = 21.0;
  double goal_tolerance = 0.3;
  double noise_sigma = 0.05;
  double leader_spawn_half_width = 0.5;  // spawn/goal jitter box half-width
  double follower_spawn_sigma = 0.1;
  double pedestrian_goal_jitter = 0.1;   // radians
  bool follower_collision_ends_episode = true;

  std::size_t num_robots() const { return num_followers + 1; }
  std::size_t num_agents() const { return num_robots() + num_pedestrians; }
  std::size_t joint_action_dim() const { return 2 * num_robots(); }
  std::size_t joint_obs_dim() const { return 7 + 5 * num_followers + 5 * num_pedestrians; }
  std::size_t local_obs_dim(std::size_t robot_index) const {
    return (robot_index == 0 ? 9 : 7) + 5 * (num_agents() - 1);
  }
  std::size_t max_steps() const {
    return static_cast<std::size_t>(std::ceil(time_limit / dt - 1e-9));
  }
};

inline void validate(const ScenarioConfig& s) {
  require(s.dt > 0.0, "dt must be positive");
  require(s.time_limit >= s.dt, "time_limit must be at least dt");
  require(s.formation_offsets.size() == s.num_followers, "one formation offset per follower");
  require(s.noise_sigma >= 0.0, "noise_sigma must be non-negative");
  require(s.robot_radius > 0.0 && s.pedestrian_radius > 0.0, "radii must be positive");
  require(s.v_max > 0.0 && s.w_max > 0.0, "velocity bounds must be positive");
  require(s.goal_tolerance > 0.0, "goal_tolerance must be positive");
}

/// Learning hyperparameters.
struct HyperParams {
  double gamma = 0.99;
  double alpha_scale = 0.5;
  double lambda_reg = 0.1;
  double beta_init = 0.01;
  std::optional<double> target_entropy;  // defaults to -joint_action_dim
  std::size_t batch_size = 256;
  std::optional<std::size_t> intrinsic_batch_size;  // defaults to batch_size
  std::size_t buffer_capacity = 200000;
  double basic_lr = 5e-4;
  std::size_t max_episodes = 80000;
  double fast_decay_exponent = 0.6;
  double slow_decay_exponent = 0.9;
  double fast_gain = 1e-3;
  double slow_gain = 1e-4;
  std::size_t target_update_interval = 1;
  double target_update_rate = 0.005;
  std::size_t history_length = 1;
  bool actor_baseline = true;
  double intrinsic_scale = 1.0;

  double resolved_target_entropy(const ScenarioConfig& s) const {
    return target_entropy.value_or(-static_cast<double>(s.joint_action_dim()));
  }
  std::size_t resolved_intrinsic_batch() const { return intrinsic_batch_size.value_or(batch_size); }
};

inline void validate(const HyperParams& h) {
  require(h.gamma > 0.0 && h.gamma < 1.0, "gamma must lie in (0, 1)");
  require(h.alpha_scale > 0.0, "alpha_scale must be positive");
  require(h.lambda_reg > 0.0, "lambda_reg must be positive");
  require(h.beta_init > 0.0, "beta_init must be positive");
  require(h.batch_size >= 1 && h.resolved_intrinsic_batch() >= 1, "batch sizes must be >= 1");
  require(h.history_length >= 1, "history_length must be >= 1");
  require(h.target_update_rate > 0.0 && h.target_update_rate <= 1.0, "target_update_rate in (0, 1]");
  require(h.target_update_interval >= 1, "target_update_interval must be >= 1");
  require(h.basic_lr > 0.0, "basic_lr must be positive");
}

/// World snapshots are ordered leader, followers, then pedestrians.
using World = std::vector<AgentState>;

inline std::size_t count_robots(std::span<const AgentState> world) {
  std::size_t n = 0;
  while (n < world.size() && world[n].is_robot()) ++n;
  for (std::size_t j = n; j < world.size(); ++j)
    require(!world[j].is_robot(), "world must list robots before pedestrians");
  return n;
}

/// Local observation o^i = [s^i, s^{-i}_o] of robot `robot_index`.
inline RobotObservation build_observation(std::span<const AgentState> world, std::size_t robot_index) {
  require(robot_index < world.size(), "robot index out of range");
  const AgentState& self = world[robot_index];
  require(self.is_robot(), "observations are built for robots only");

  RobotObservation obs;
  const ObservableState so = observable(self);
  if (self.kind == AgentKind::Leader) {
    obs.self_full.resize(9);
    obs.self_full << so, self.goal->x(), self.goal->y(), self.preferred_speed, self.heading;
  } else {
    obs.self_full.resize(7);
    obs.self_full << so, self.preferred_speed, self.heading;
  }
  obs.others_observable.reserve(world.size() - 1);
  for (std::size_t j = 0; j < world.size(); ++j)
    if (j != robot_index) obs.others_observable.push_back(observable(world[j]));
  return obs;
}

/// Compact joint vector; see JointObservation for the layout.
inline Vector build_joint_flat(std::span<const AgentState> world, const ScenarioConfig& scenario) {
  require(world.size() == scenario.num_agents(), "world size does not match the scenario");
  require(world[0].kind == AgentKind::Leader, "world[0] must be the leader");
  Vector flat(static_cast<Eigen::Index>(scenario.joint_obs_dim()));
  flat.head<5>() = observable(world[0]);
  flat.segment<2>(5) = *world[0].goal;
  Eigen::Index at = 7;
  for (std::size_t j = 1; j < world.size(); ++j, at += 5) flat.segment<5>(at) = observable(world[j]);
  return flat;
}

inline JointObservation build_joint_observation(std::span<const AgentState> world,
                                                const ScenarioConfig& scenario) {
  const std::size_t robots = count_robots(world);
  require(robots == scenario.num_robots(), "world robot count does not match the scenario");
  JointObservation jo;
  jo.per_robot.reserve(robots);
  for (std::size_t i = 0; i < robots; ++i) jo.per_robot.push_back(build_observation(world, i));
  jo.flat = build_joint_flat(world, scenario);
  return jo;
}

/// Returns v + eps with eps ~ N(0, sigma^2) i.i.d. per component.
inline Vector add_gaussian_noise(Vector v, double sigma, Rng& rng) {
  require(sigma >= 0.0, "sigma must be non-negative");
  if (sigma == 0.0) return v;
  std::normal_distribution<double> noise(0.0, sigma);
  for (Eigen::Index k = 0; k < v.size(); ++k) v[k] += noise(rng);
  return v;
}

/// Perturbs only the observable components of a local observation.
inline RobotObservation add_observation_noise(RobotObservation obs, double sigma, Rng& rng) {
  if (sigma == 0.0) return obs;
  obs.self_full.head<5>() = add_gaussian_noise(obs.self_full.head<5>(), sigma, rng);
  for (auto& o : obs.others_observable) o = add_gaussian_noise(o, sigma, rng);
  return obs;
}

// Seed splitting: every component stream is derived from one global seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t {
  Environment = 1,
  PolicySampling = 2,
  ActorCriticInit = 3,
  RndTargetInit = 4,
  IntrinsicInit = 5,
  ReplaySampling = 6,
  Evaluation = 7,
};

/// Independent generator for `stream`, optionally further indexed (e.g. by episode).
inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream)));
  s = splitmix64(s ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  return Rng(s);
}

}  // namespace cemrrl
