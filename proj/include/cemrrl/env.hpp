#pragma once

// Episode engine: unicycle robots, ORCA pedestrians, swept-separation
// collision checks, extrinsic rewards and the reset/step lifecycle.

#include "cemrrl/core.hpp"
#include "cemrrl/orca.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace cemrrl::env {

/// Linear and angular velocity command of one robot.
struct Action {
  double v = 0.0;
  double w = 0.0;
};

using JointAction = std::vector<Action>;

enum class Termination { Running, GoalReached, Collision, Timeout };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::Running: return "Running";
    case Termination::GoalReached: return "GoalReached";
    case Termination::Collision: return "Collision";
    case Termination::Timeout: return "Timeout";
  }
  return "?";
}

struct StepOutcome {
  JointObservation next_obs;
  std::vector<double> extrinsic_rewards;  // one per robot
  bool done = false;
  Termination termination = Termination::Running;
  std::vector<double> min_separations;   // one per robot
  std::vector<double> formation_errors;  // one per follower
};

struct KinematicLimits {
  double v_max = 1.0;
  double w_max = 1.0;
};

/// Explicit Euler step of the unicycle model. Out-of-range commands are
/// clamped and counted in `clamp_count` when provided.
inline AgentState step_kinematics(AgentState state, Action action, double dt, const KinematicLimits& limits,
                                  std::size_t* clamp_count = nullptr) {
  const double v = std::clamp(action.v, -limits.v_max, limits.v_max);
  const double w = std::clamp(action.w, -limits.w_max, limits.w_max);
  if (clamp_count && (v != action.v || w != action.w)) ++*clamp_count;

  const double c = std::cos(state.heading);
  const double s = std::sin(state.heading);
  state.position += dt * Vec2(c * v, s * v);
  state.velocity = Vec2(c * v, s * v);
  state.heading = wrap_angle(state.heading + dt * w);
  return state;
}

/// Closest approach of two agents moving linearly over one interval.
inline double segment_closest_distance(const Vec2& a0, const Vec2& a1, const Vec2& b0, const Vec2& b1) {
  const Vec2 d0 = b0 - a0;
  const Vec2 dd = (b1 - a1) - (b0 - a0);
  const double denom = dd.squaredNorm();
  double s = 0.0;
  if (denom > 0.0) s = std::clamp(-d0.dot(dd) / denom, 0.0, 1.0);
  return (d0 + s * dd).norm();
}

/// Minimum over all other agents of the closest approach minus both radii;
/// +infinity when there are no other agents.
inline double min_separation(std::size_t index, std::span<const AgentState> start,
                             std::span<const AgentState> end) {
  require(start.size() == end.size() && index < start.size(), "snapshots must cover all agents");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < start.size(); ++j) {
    if (j == index) continue;
    const double d = segment_closest_distance(start[index].position, end[index].position, start[j].position,
                                              end[j].position);
    best = std::min(best, d - start[index].radius - start[j].radius);
  }
  return best;
}

/// ||p_i - p_0 - f_i||
inline double formation_error(const Vec2& p_i, const Vec2& p_0, const Vec2& f_i) {
  return (p_i - p_0 - f_i).norm();
}

inline double leader_reward(double d_min, bool at_goal) {
  if (d_min < 0.0) return -0.25;
  if (d_min < 0.2) return 0.5 * d_min - 0.1;
  if (at_goal) return 100.0;
  return 0.0;
}

inline double follower_reward(double d_min, double e) {
  require(e >= 0.0, "formation error must be non-negative");
  if (d_min < 0.0) return -0.25;
  if (d_min < 0.2) return 0.5 * d_min - 0.1;
  if (e < 0.2) return 1.0;
  if (e < 1.0) return -std::tanh(7.5 * e - 3.0);
  if (e < 2.0) return -1.0;
  return -2.0;
}

class ResetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One simulation instance. Not thread-safe; independent instances are.
class Environment {
 public:
  explicit Environment(ScenarioConfig scenario, orca::OrcaParams orca_params = {})
      : scenario_(std::move(scenario)), orca_(orca_params) {
    validate(scenario_);
    orca::validate(orca_);
  }

  const ScenarioConfig& scenario() const { return scenario_; }
  const orca::OrcaParams& orca_params() const { return orca_; }
  const World& world() const { return world_; }
  std::size_t steps() const { return steps_; }
  double elapsed() const { return static_cast<double>(steps_) * scenario_.dt; }
  bool done() const { return done_; }
  std::size_t clamp_count() const { return clamp_count_; }

  /// Samples a fresh episode: pedestrians on the crossing circle with
  /// (jittered) antipodal goals, the leader near the bottom of the circle
  /// heading towards a goal near the top, followers at their offsets.
  JointObservation reset(Rng& rng) {
    constexpr int kMaxAttempts = 1000;
    const auto& sc = scenario_;
    std::uniform_real_distribution<double> box(-sc.leader_spawn_half_width, sc.leader_spawn_half_width);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> goal_jitter(-sc.pedestrian_goal_jitter, sc.pedestrian_goal_jitter);
    std::normal_distribution<double> follower_noise(0.0, sc.follower_spawn_sigma);

    world_.clear();
    const double r = sc.circle_radius;

    AgentState leader;
    leader.kind = AgentKind::Leader;
    leader.radius = sc.robot_radius;
    leader.preferred_speed = sc.robot_preferred_speed;
    leader.position = Vec2(box(rng), -r + box(rng));
    leader.goal = Vec2(box(rng), r + box(rng));
    leader.heading = wrap_angle(std::atan2(leader.goal->y() - leader.position.y(),
                                           leader.goal->x() - leader.position.x()));
    world_.push_back(leader);

    for (std::size_t i = 0; i < sc.num_followers; ++i) {
      AgentState f;
      f.kind = AgentKind::Follower;
      f.radius = sc.robot_radius;
      f.preferred_speed = sc.robot_preferred_speed;
      f.formation_offset = sc.formation_offsets[i];
      f.heading = leader.heading;
      int attempt = 0;
      do {
        if (++attempt > kMaxAttempts) throw ResetError("could not place follower without overlap");
        f.position = leader.position + sc.formation_offsets[i] + Vec2(follower_noise(rng), follower_noise(rng));
      } while (overlaps(f));
      world_.push_back(f);
    }

    for (std::size_t k = 0; k < sc.num_pedestrians; ++k) {
      AgentState p;
      p.kind = AgentKind::Pedestrian;
      p.radius = sc.pedestrian_radius;
      p.preferred_speed = sc.pedestrian_preferred_speed;
      int attempt = 0;
      do {
        if (++attempt > kMaxAttempts) throw ResetError("could not place pedestrian without overlap");
        const double a = angle(rng);
        p.position = Vec2(r * std::cos(a), r * std::sin(a));
        const double b = a + std::numbers::pi + goal_jitter(rng);
        p.goal = Vec2(r * std::cos(b), r * std::sin(b));
      } while (overlaps(p));
      p.heading = wrap_angle(std::atan2(p.goal->y() - p.position.y(), p.goal->x() - p.position.x()));
      world_.push_back(p);
    }

    steps_ = 0;
    done_ = false;
    return observe(rng);
  }

  /// Advances every agent by one interval. Action noise is added before
  /// clamping; pedestrians react to the pre-step world.
  StepOutcome step(const JointAction& joint_action, Rng& rng) {
    require(!world_.empty(), "reset() before step()");
    require(!done_, "step() after the episode has ended");
    const auto& sc = scenario_;
    const std::size_t robots = sc.num_robots();
    require(joint_action.size() == robots, "one action per robot");

    const World start = world_;
    std::normal_distribution<double> noise(0.0, sc.noise_sigma);
    const KinematicLimits limits{sc.v_max, sc.w_max};
    for (std::size_t i = 0; i < robots; ++i) {
      Action a = joint_action[i];
      if (sc.noise_sigma > 0.0) {
        a.v += noise(rng);
        a.w += noise(rng);
      }
      world_[i] = step_kinematics(start[i], a, sc.dt, limits, &clamp_count_);
    }
    for (std::size_t j = robots; j < world_.size(); ++j) {
      const Vec2 v = orca::pedestrian_policy(j, start, orca_, sc.dt);
      AgentState& p = world_[j];
      p.position = start[j].position + sc.dt * v;
      p.velocity = v;
      if (v.squaredNorm() > 1e-18) p.heading = wrap_angle(std::atan2(v.y(), v.x()));
      if ((*p.goal - p.position).norm() < sc.goal_tolerance) p.goal = -*p.goal;
    }
    ++steps_;

    StepOutcome out;
    out.min_separations.resize(robots);
    out.extrinsic_rewards.resize(robots);
    out.formation_errors.resize(sc.num_followers);
    bool collision = false;
    for (std::size_t i = 0; i < robots; ++i) {
      out.min_separations[i] = min_separation(i, start, world_);
      if (out.min_separations[i] < 0.0 && (i == 0 || sc.follower_collision_ends_episode)) collision = true;
    }
    const bool at_goal = (world_[0].position - *world_[0].goal).norm() < sc.goal_tolerance;
    out.extrinsic_rewards[0] = leader_reward(out.min_separations[0], at_goal);
    for (std::size_t i = 1; i < robots; ++i) {
      const double e = formation_error(world_[i].position, world_[0].position, *world_[i].formation_offset);
      out.formation_errors[i - 1] = e;
      out.extrinsic_rewards[i] = follower_reward(out.min_separations[i], e);
    }

    if (collision)
      out.termination = Termination::Collision;
    else if (at_goal)
      out.termination = Termination::GoalReached;
    else if (steps_ >= sc.max_steps())
      out.termination = Termination::Timeout;
    out.done = out.termination != Termination::Running;
    done_ = out.done;
    out.next_obs = observe(rng);
    return out;
  }

  /// Replaces the world (scripted scenarios and tests). Robots first.
  void set_world(World world) {
    require(world.size() == scenario_.num_agents(), "world size does not match the scenario");
    require(count_robots(world) == scenario_.num_robots(), "robot count does not match the scenario");
    for (const auto& a : world) validate(a);
    world_ = std::move(world);
    steps_ = 0;
    done_ = false;
  }

  /// Local observations carry sensor noise; the joint vector is exact.
  JointObservation observe(Rng& rng) const {
    JointObservation jo = build_joint_observation(world_, scenario_);
    for (auto& o : jo.per_robot) o = add_observation_noise(std::move(o), scenario_.noise_sigma, rng);
    return jo;
  }

 private:
  bool overlaps(const AgentState& candidate) const {
    constexpr double kMargin = 0.1;
    for (const auto& a : world_)
      if ((a.position - candidate.position).norm() < a.radius + candidate.radius + kMargin) return true;
    return false;
  }

  ScenarioConfig scenario_;
  orca::OrcaParams orca_;
  World world_;
  std::size_t steps_ = 0;
  bool done_ = false;
  std::size_t clamp_count_ = 0;
};

}  // namespace cemrrl::env
