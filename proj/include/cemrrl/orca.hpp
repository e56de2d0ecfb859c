#pragma once

// Optimal reciprocal collision avoidance for pedestrians: one velocity
// half-plane per neighbour, then a 2-D incremental linear program over the
// speed disc with a minimum-violation fallback when the constraints are
// jointly infeasible.

#include "cemrrl/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace cemrrl::orca {

/// Feasible side is { v : (v - point) . normal >= 0 }.
struct HalfPlane {
  Vec2 point = Vec2::Zero();
  Vec2 normal = Vec2::UnitY();

  /// Signed violation; positive means v lies outside the feasible side.
  double violation(const Vec2& v) const { return -(v - point).dot(normal); }
};

struct OrcaParams {
  double time_horizon = 5.0;
  double neighbor_dist = 10.0;
  std::size_t max_neighbors = 10;
  double v_max = 1.0;
  double robot_share = 0.5;  // fraction of avoidance a pedestrian takes against a robot
};

inline void validate(const OrcaParams& p) {
  require(p.time_horizon > 0.0 && p.neighbor_dist > 0.0 && p.max_neighbors > 0 && p.v_max > 0.0,
          "ORCA parameters must be positive");
  require(p.robot_share > 0.0 && p.robot_share <= 1.0, "robot_share must lie in (0, 1]");
}

namespace detail {

constexpr double kEpsilon = 1e-5;

inline double det(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Internal line form: feasible region lies to the left of `direction`.
struct Line {
  Vec2 point;
  Vec2 direction;
};

inline Line to_line(const HalfPlane& h) { return {h.point, Vec2(h.normal.y(), -h.normal.x())}; }
inline HalfPlane to_halfplane(const Line& l) { return {l.point, Vec2(-l.direction.y(), l.direction.x())}; }

// Optimises along line `line_no` subject to lines [0, line_no) and the disc.
inline bool lp1(const std::vector<Line>& lines, std::size_t line_no, double radius, const Vec2& opt,
                bool direction_opt, Vec2& result) {
  const Line& line = lines[line_no];
  const double dot = line.point.dot(line.direction);
  const double discriminant = dot * dot + radius * radius - line.point.squaredNorm();
  if (discriminant < 0.0) return false;

  const double sqrt_disc = std::sqrt(discriminant);
  double t_left = -dot - sqrt_disc;
  double t_right = -dot + sqrt_disc;

  for (std::size_t i = 0; i < line_no; ++i) {
    const double denominator = det(line.direction, lines[i].direction);
    const double numerator = det(lines[i].direction, line.point - lines[i].point);
    if (std::abs(denominator) <= kEpsilon) {
      if (numerator < 0.0) return false;
      continue;
    }
    const double t = numerator / denominator;
    if (denominator >= 0.0)
      t_right = std::min(t_right, t);
    else
      t_left = std::max(t_left, t);
    if (t_left > t_right) return false;
  }

  if (direction_opt) {
    result = line.point + (opt.dot(line.direction) > 0.0 ? t_right : t_left) * line.direction;
  } else {
    const double t = line.direction.dot(opt - line.point);
    result = line.point + std::clamp(t, t_left, t_right) * line.direction;
  }
  return true;
}

// Returns lines.size() on success, else the index of the first line that
// could not be satisfied (result then holds the best point so far).
inline std::size_t lp2(const std::vector<Line>& lines, double radius, const Vec2& opt, bool direction_opt,
                       Vec2& result) {
  if (direction_opt)
    result = opt * radius;
  else if (opt.squaredNorm() > radius * radius)
    result = opt.normalized() * radius;
  else
    result = opt;

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (det(lines[i].direction, lines[i].point - result) > 0.0) {
      const Vec2 previous = result;
      if (!lp1(lines, i, radius, opt, direction_opt, result)) {
        result = previous;
        return i;
      }
    }
  }
  return lines.size();
}

inline void lp3(const std::vector<Line>& lines, std::size_t begin_line, double radius, Vec2& result) {
  double distance = 0.0;
  for (std::size_t i = begin_line; i < lines.size(); ++i) {
    if (det(lines[i].direction, lines[i].point - result) <= distance) continue;

    std::vector<Line> projected;
    projected.reserve(i);
    for (std::size_t j = 0; j < i; ++j) {
      Line line;
      const double determinant = det(lines[i].direction, lines[j].direction);
      if (std::abs(determinant) <= kEpsilon) {
        if (lines[i].direction.dot(lines[j].direction) > 0.0) continue;  // same direction
        line.point = 0.5 * (lines[i].point + lines[j].point);
      } else {
        line.point = lines[i].point +
                     (det(lines[j].direction, lines[i].point - lines[j].point) / determinant) *
                         lines[i].direction;
      }
      line.direction = (lines[j].direction - lines[i].direction).normalized();
      projected.push_back(line);
    }

    const Vec2 previous = result;
    const Vec2 outward(-lines[i].direction.y(), lines[i].direction.x());
    if (lp2(projected, radius, outward, true, result) < projected.size()) result = previous;
    distance = det(lines[i].direction, lines[i].point - result);
  }
}

inline std::vector<Line> to_lines(std::span<const HalfPlane> planes) {
  std::vector<Line> lines;
  lines.reserve(planes.size());
  for (const auto& h : planes) lines.push_back(to_line(h));
  return lines;
}

}  // namespace detail

/// Velocity closest to `preferred` inside every half-plane and the speed
/// disc, or nullopt when that intersection is empty.
inline std::optional<Vec2> solve_lp2(std::span<const HalfPlane> planes, const Vec2& preferred, double v_max) {
  require(v_max > 0.0, "v_max must be positive");
  const auto lines = detail::to_lines(planes);
  Vec2 result;
  if (detail::lp2(lines, v_max, preferred, false, result) < lines.size()) return std::nullopt;
  return result;
}

/// Velocity in the speed disc minimising the largest half-plane violation.
inline Vec2 solve_lp3(std::span<const HalfPlane> planes, double v_max) {
  require(v_max > 0.0, "v_max must be positive");
  const auto lines = detail::to_lines(planes);
  Vec2 result;
  const std::size_t failed = detail::lp2(lines, v_max, Vec2::Zero(), false, result);
  if (failed < lines.size()) detail::lp3(lines, failed, v_max, result);
  return result;
}

/// Solves with `preferred` as objective, falling back to minimum violation.
inline Vec2 solve_velocity(std::span<const HalfPlane> planes, const Vec2& preferred, double v_max) {
  const auto lines = detail::to_lines(planes);
  Vec2 result;
  const std::size_t failed = detail::lp2(lines, v_max, preferred, false, result);
  if (failed < lines.size()) detail::lp3(lines, failed, v_max, result);
  return result;
}

/// Share of the avoidance effort `self` takes against `other`.
inline double responsibility(const AgentState& self, const AgentState& other, const OrcaParams& p) {
  return (self.kind == AgentKind::Pedestrian && other.is_robot()) ? p.robot_share : 0.5;
}

/// One ORCA half-plane per neighbour, in neighbour order.
inline std::vector<HalfPlane> orca_halfplanes(const AgentState& self, std::span<const AgentState> neighbors,
                                              const OrcaParams& params, double dt) {
  require(dt > 0.0, "dt must be positive");
  const double inv_horizon = 1.0 / params.time_horizon;
  std::vector<HalfPlane> planes;
  planes.reserve(neighbors.size());

  for (const AgentState& other : neighbors) {
    const Vec2 rel_pos = other.position - self.position;
    const Vec2 rel_vel = self.velocity - other.velocity;
    const double dist_sq = rel_pos.squaredNorm();
    const double combined_radius = self.radius + other.radius;
    const double combined_radius_sq = combined_radius * combined_radius;

    detail::Line line;
    Vec2 u;
    if (dist_sq > combined_radius_sq) {
      const Vec2 w = rel_vel - inv_horizon * rel_pos;
      const double w_length_sq = w.squaredNorm();
      const double dot1 = w.dot(rel_pos);
      if (dot1 < 0.0 && dot1 * dot1 > combined_radius_sq * w_length_sq) {
        // Project on the cut-off circle.
        const double w_length = std::sqrt(w_length_sq);
        const Vec2 unit_w = w / w_length;
        line.direction = Vec2(unit_w.y(), -unit_w.x());
        u = (combined_radius * inv_horizon - w_length) * unit_w;
      } else {
        // Project on a leg of the cone.
        const double leg = std::sqrt(dist_sq - combined_radius_sq);
        if (detail::det(rel_pos, w) > 0.0) {
          line.direction = Vec2(rel_pos.x() * leg - rel_pos.y() * combined_radius,
                                rel_pos.x() * combined_radius + rel_pos.y() * leg) /
                           dist_sq;
        } else {
          line.direction = -Vec2(rel_pos.x() * leg + rel_pos.y() * combined_radius,
                                 -rel_pos.x() * combined_radius + rel_pos.y() * leg) /
                           dist_sq;
        }
        u = rel_vel.dot(line.direction) * line.direction - rel_vel;
      }
    } else {
      // Already overlapping: escape within one step.
      const double inv_dt = 1.0 / dt;
      const Vec2 w = rel_vel - inv_dt * rel_pos;
      const double w_length = w.norm();
      Vec2 unit_w;
      if (w_length > 1e-12)
        unit_w = w / w_length;
      else if (dist_sq > 1e-24)
        unit_w = -rel_pos.normalized();
      else
        unit_w = Vec2::UnitX();
      line.direction = Vec2(unit_w.y(), -unit_w.x());
      u = (combined_radius * inv_dt - w_length) * unit_w;
    }
    line.point = self.velocity + responsibility(self, other, params) * u;
    planes.push_back(detail::to_halfplane(line));
  }
  return planes;
}

/// Neighbours of world[index] within neighbor_dist, nearest first (ties by
/// index), truncated to max_neighbors.
inline std::vector<AgentState> select_neighbors(std::span<const AgentState> world, std::size_t index,
                                                const OrcaParams& params) {
  std::vector<std::pair<double, std::size_t>> candidates;
  const double range_sq = params.neighbor_dist * params.neighbor_dist;
  for (std::size_t j = 0; j < world.size(); ++j) {
    if (j == index) continue;
    const double d = (world[j].position - world[index].position).squaredNorm();
    if (d < range_sq) candidates.emplace_back(d, j);
  }
  std::sort(candidates.begin(), candidates.end());
  if (candidates.size() > params.max_neighbors) candidates.resize(params.max_neighbors);
  std::vector<AgentState> out;
  out.reserve(candidates.size());
  for (const auto& [d, j] : candidates) out.push_back(world[j]);
  return out;
}

/// Goal-directed preferred velocity, slowed to land exactly on the goal.
inline Vec2 preferred_velocity(const AgentState& self, double dt) {
  if (!self.goal) return Vec2::Zero();
  const Vec2 to_goal = *self.goal - self.position;
  const double dist = to_goal.norm();
  if (dist < 1e-9) return Vec2::Zero();
  return to_goal / dist * std::min(self.preferred_speed, dist / dt);
}


/// ORCA velocity command for pedestrian world[index].
inline Vec2 pedestrian_policy(std::size_t index, std::span<const AgentState> world, const OrcaParams& params,
                              double dt) {
  require(index < world.size() && world[index].kind == AgentKind::Pedestrian,
          "pedestrian_policy needs a pedestrian");
  const AgentState& self = world[index];
  const auto neighbors = select_neighbors(world, index, params);
  const auto planes = orca_halfplanes(self, neighbors, params, dt);
  const double v_max = std::min(params.v_max, self.preferred_speed);
  return solve_velocity(planes, preferred_velocity(self, dt), v_max);
}

}  // namespace cemrrl::orca
