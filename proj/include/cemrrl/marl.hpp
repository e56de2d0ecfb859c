#pragma once

// Centralized-training / decentralized-execution actor-critic machinery:
// episode storage with two sampling views, history encoding, the critic
// and score-function actor updates, target syncing and step-size schedules.

#include "cemrrl/config.hpp"
#include "cemrrl/core.hpp"
#include "cemrrl/intrinsic.hpp"
#include "cemrrl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

namespace cemrrl::marl {

/// One observation as stored in the buffer, together with the exact actor
/// inputs (local histories) used when acting on it.
struct StepObservation {
  JointObservation obs;
  std::vector<Vector> local_tau;
};

using StepObservationPtr = std::shared_ptr<const StepObservation>;

struct Transition {
  StepObservationPtr o_t;
  Vector joint_action;  // [v_0, w_0, v_1, w_1, ...] as sampled by the policies
  Vector joint_raw;     // pre-squash Gaussian samples
  double r_intrinsic = 0.0;
  intrinsic::Decomposition intrinsic_terms;
  std::vector<double> r_extrinsic;
  StepObservationPtr o_next;
  bool done = false;
  bool bootstrap = true;  // false only when the episode terminated (goal or collision)
  std::size_t t_index = 0;
};

using Trajectory = std::vector<Transition>;

inline void validate(const Trajectory& traj) {
  for (std::size_t k = 0; k < traj.size(); ++k) {
    require(traj[k].t_index == k, "trajectory steps must be numbered 0, 1, 2, ...");
    require(std::isfinite(traj[k].r_intrinsic), "non-finite intrinsic reward");
    for (double r : traj[k].r_extrinsic) require(std::isfinite(r), "non-finite extrinsic reward");
  }
}

// ---------------------------------------------------------------------------
// History encoding: [o_{t-H+1}, a_{t-H+1}, ..., o_{t-1}, a_{t-1}, o_t], with
// zero slots before the start of the episode.

inline std::size_t history_dim(std::size_t obs_dim, std::size_t act_dim, std::size_t history) {
  return history * obs_dim + (history - 1) * act_dim;
}

/// `obs_at(s)` / `act_at(s)` give the slot contents for episode step s >= 0.
template <class ObsAt, class ActAt>
Vector encode_history(long end_step, std::size_t history, std::size_t obs_dim, std::size_t act_dim, ObsAt&& obs_at,
                      ActAt&& act_at) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(history_dim(obs_dim, act_dim, history)));
  const auto od = static_cast<Eigen::Index>(obs_dim);
  const auto ad = static_cast<Eigen::Index>(act_dim);
  for (std::size_t k = 0; k < history; ++k) {
    const long s = end_step - static_cast<long>(history - 1 - k);
    if (s < 0) continue;
    const Eigen::Index at = static_cast<Eigen::Index>(k) * (od + ad);
    out.segment(at, od) = obs_at(s);
    if (k + 1 < history) out.segment(at + od, ad) = act_at(s);
  }
  return out;
}

/// Rolling history of one observation stream during acting.
class HistoryTracker {
 public:
  HistoryTracker(std::size_t history, std::size_t obs_dim, std::size_t act_dim)
      : history_(history), obs_dim_(obs_dim), act_dim_(act_dim) {
    require(history >= 1, "history length must be >= 1");
  }

  void reset(const Vector& first_obs) {
    obs_.clear();
    actions_.clear();
    obs_.push_back(first_obs);
  }

  void push(const Vector& action, const Vector& next_obs) {
    actions_.push_back(action);
    obs_.push_back(next_obs);
    while (obs_.size() > history_) obs_.pop_front();
    while (actions_.size() + 1 > history_) actions_.pop_front();
  }

  Vector encode() const {
    const long n = static_cast<long>(obs_.size());
    const long end = n - 1;
    return encode_history(end, history_, obs_dim_, act_dim_, [&](long s) -> const Vector& { return obs_[s]; },
                          [&](long s) -> const Vector& { return actions_[s]; });
  }

 private:
  std::size_t history_, obs_dim_, act_dim_;
  std::deque<Vector> obs_;
  std::deque<Vector> actions_;
};

// ---------------------------------------------------------------------------
// Sampling views.

/// A single transition drawn for the intrinsic-reward learners.
struct TransitionRef {
  const Trajectory* episode = nullptr;
  std::size_t t = 0;
  const Transition& get() const { return (*episode)[t]; }
};

/// A history window ending at step t of one stored episode, drawn for the
/// actor-critic learners.
struct TrajectoryWindow {
  const Trajectory* episode = nullptr;
  std::size_t t = 0;
  std::size_t history = 1;

  const Transition& transition() const { return (*episode)[t]; }

  /// Number of leading zero slots in the window ending at t.
  std::size_t padded_slots() const { return t + 1 >= history ? 0 : history - (t + 1); }

  const JointObservation& obs_at(std::size_t s) const {
    return s < episode->size() ? (*episode)[s].o_t->obs : (*episode)[s - 1].o_next->obs;
  }

  Vector local_history(std::size_t robot, std::size_t end) const {
    const auto& first = obs_at(0).per_robot[robot];
    return encode_history(
        static_cast<long>(end), history, first.dim(), 2,
        [&](long s) { return obs_at(static_cast<std::size_t>(s)).per_robot[robot].flatten(); },
        [&](long s) -> Vector { return (*episode)[static_cast<std::size_t>(s)].joint_action.segment(2 * robot, 2); });
  }

  Vector joint_history(std::size_t end) const {
    const auto dim = static_cast<std::size_t>(obs_at(0).flat.size());
    const auto act = static_cast<std::size_t>((*episode)[0].joint_action.size());
    return encode_history(
        static_cast<long>(end), history, dim, act,
        [&](long s) -> const Vector& { return obs_at(static_cast<std::size_t>(s)).flat; },
        [&](long s) -> const Vector& { return (*episode)[static_cast<std::size_t>(s)].joint_action; });
  }

  Vector local_history(std::size_t robot) const { return local_history(robot, t); }
  Vector next_local_history(std::size_t robot) const { return local_history(robot, t + 1); }
  Vector joint_history() const { return joint_history(t); }
  Vector next_joint_history() const { return joint_history(t + 1); }
};

enum class SampleView { Transitions, Trajectories };

/// Whole-episode storage with oldest-episode-first eviction.
class ReplayBuffer {
 public:
  struct Counters {
    std::size_t transition_batches = 0;
    std::size_t trajectory_batches = 0;
    std::size_t transition_skips = 0;
    std::size_t trajectory_skips = 0;
  };

  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    require(capacity >= 1, "buffer capacity must be >= 1");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return total_; }
  std::size_t episodes() const { return episodes_.size(); }
  const Trajectory& episode(std::size_t k) const { return episodes_.at(k); }
  const Counters& counters() const { return counters_; }

  void store(Trajectory traj) {
    require(!traj.empty(), "cannot store an empty trajectory");
    require(traj.size() <= capacity_, "trajectory longer than the buffer capacity");
    validate(traj);
    while (total_ + traj.size() > capacity_) {
      total_ -= episodes_.front().size();
      episodes_.pop_front();
    }
    total_ += traj.size();
    episodes_.push_back(std::move(traj));
    prefix_.clear();
    std::size_t acc = 0;
    for (const auto& e : episodes_) {
      prefix_.push_back(acc);
      acc += e.size();
    }
  }

  /// Uniform draw without replacement over all stored transitions;
  /// nullopt (skip) when fewer than `batch` transitions are stored.
  std::optional<std::vector<TransitionRef>> sample_transitions(std::size_t batch, Rng& rng) {
    require(batch >= 1, "batch must be >= 1");
    if (total_ < batch) {
      ++counters_.transition_skips;
      return std::nullopt;
    }
    ++counters_.transition_batches;
    // Floyd's algorithm: `batch` distinct indices in [0, total_).
    std::unordered_set<std::size_t> chosen;
    std::vector<std::size_t> order;
    chosen.reserve(batch * 2);
    order.reserve(batch);
    for (std::size_t j = total_ - batch; j < total_; ++j) {
      std::uniform_int_distribution<std::size_t> pick(0, j);
      std::size_t v = pick(rng);
      if (!chosen.insert(v).second) {
        v = j;
        chosen.insert(v);
      }
      order.push_back(v);
    }
    std::vector<TransitionRef> out;
    out.reserve(batch);
    for (std::size_t flat : order) out.push_back(locate(flat));
    return out;
  }

  /// Episodes drawn uniformly, then a step uniformly within each; nullopt
  /// (skip) when no episode is stored.
  std::optional<std::vector<TrajectoryWindow>> sample_trajectories(std::size_t batch, std::size_t history, Rng& rng) {
    require(batch >= 1 && history >= 1, "batch and history must be >= 1");
    if (episodes_.empty()) {
      ++counters_.trajectory_skips;
      return std::nullopt;
    }
    ++counters_.trajectory_batches;
    std::uniform_int_distribution<std::size_t> pick_episode(0, episodes_.size() - 1);
    std::vector<TrajectoryWindow> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const Trajectory& ep = episodes_[pick_episode(rng)];
      std::uniform_int_distribution<std::size_t> pick_step(0, ep.size() - 1);
      out.push_back({&ep, pick_step(rng), history});
    }
    return out;
  }

  /// Flat transition index -> (episode, step).
  TransitionRef locate(std::size_t flat) const {
    require(flat < total_, "transition index out of range");
    const auto it = std::upper_bound(prefix_.begin(), prefix_.end(), flat);
    const auto k = static_cast<std::size_t>(it - prefix_.begin()) - 1;
    return {&episodes_[k], flat - prefix_[k]};
  }

 private:
  std::size_t capacity_;
  std::deque<Trajectory> episodes_;
  std::vector<std::size_t> prefix_;
  std::size_t total_ = 0;
  Counters counters_;
};

// ---------------------------------------------------------------------------
// Step sizes.

/// kappa_f(m) = fast_gain / (1+m)^0.6, kappa_s(m) = slow_gain / (1+m)^0.9;
/// learning rates are basic_lr + kappa.
struct StepSizes {
  double fast = 0.0;
  double slow = 0.0;
  double basic_lr = 0.0;

  double fast_lr() const { return basic_lr + fast; }
  double slow_lr() const { return basic_lr + slow; }
};

inline StepSizes step_size_schedule(std::size_t episode, const HyperParams& h) {
  const double m1 = 1.0 + static_cast<double>(episode);
  return {h.fast_gain / std::pow(m1, h.fast_decay_exponent), h.slow_gain / std::pow(m1, h.slow_decay_exponent),
          h.basic_lr};
}

// ---------------------------------------------------------------------------
// Actors and critics.

/// Decentralized policy of one robot: reads only its own history input.
class Actor {
 public:
  Actor() = default;
  Actor(std::size_t input_dim, const NetworkConfig& cfg, const Vector& bounds, Rng& rng)
      : bounds_(bounds), opts_(cfg.policy_options()) {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), cfg.actor_hidden.begin(), cfg.actor_hidden.end());
    dims.push_back(2 * static_cast<std::size_t>(bounds.size()));
    net_ = nn::Mlp(nn::make_specs(dims), rng, cfg.net_options(), cfg.adam());
  }

  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }
  const Vector& bounds() const { return bounds_; }
  const nn::PolicyOptions& policy_options() const { return opts_; }
  std::size_t input_dim() const { return net_.in_dim(); }

  nn::PolicyHead head(const Vector& tau) const { return nn::make_head(net_.forward(tau), opts_); }

  nn::PolicySample act(const Vector& tau, Rng& rng, bool deterministic = false) const {
    return nn::policy_sample(head(tau), bounds_, rng, deterministic);
  }

 private:
  nn::Mlp net_;
  Vector bounds_;
  nn::PolicyOptions opts_;
};

inline nn::Mlp make_critic(std::size_t joint_input_dim, const NetworkConfig& cfg, Rng& rng) {
  std::vector<std::size_t> dims{joint_input_dim};
  dims.insert(dims.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  dims.push_back(1);
  return nn::Mlp(nn::make_specs(dims), rng, cfg.net_options(), cfg.adam());
}

/// Per-step discount gamma^(dt * preferred_speed).
inline double step_discount(double gamma, double dt, double preferred_speed) {
  return std::pow(gamma, dt * preferred_speed);
}

/// Critic input [joint history; joint action].
inline Vector critic_input(const Vector& joint_tau, const Vector& joint_action) {
  Vector x(joint_tau.size() + joint_action.size());
  x << joint_tau, joint_action;
  return x;
}

/// y = r_int + r_ext_i + discount * Q'_i(tau_t+1, a_t+1), with a_t+1 drawn
/// from the current actors; no bootstrap on terminal transitions.
inline double critic_target(const TrajectoryWindow& w, const nn::Mlp& target_critic, std::span<const Actor> actors,
                            std::size_t robot, double discount, Rng& rng) {
  const Transition& tr = w.transition();
  double y = tr.r_intrinsic + tr.r_extrinsic.at(robot);
  if (!tr.bootstrap) return y;
  Vector next_action(static_cast<Eigen::Index>(2 * actors.size()));
  for (std::size_t j = 0; j < actors.size(); ++j)
    next_action.segment(static_cast<Eigen::Index>(2 * j), 2) = actors[j].act(w.next_local_history(j), rng).action;
  return y + discount * target_critic.forward(critic_input(w.next_joint_history(), next_action))[0];
}

struct LossAndGrad {
  double loss = 0.0;
  nn::ParamSet grad;
};

/// Mean squared TD error over the batch (columns of `inputs`).
inline LossAndGrad critic_loss(const nn::Mlp& critic, const Matrix& inputs, const Vector& targets) {
  require(inputs.cols() >= 1 && inputs.cols() == targets.size(), "critic batch mismatch");
  nn::ForwardCache cache;
  const Matrix q = critic.forward(inputs, &cache);
  const Eigen::RowVectorXd diff = q.row(0) - targets.transpose();
  const double n = static_cast<double>(inputs.cols());
  LossAndGrad out;
  out.loss = diff.squaredNorm() / n;
  out.grad = critic.backward(cache, (2.0 / n) * diff);
  return out;
}

inline double critic_update(nn::Mlp& critic, const Matrix& inputs, const Vector& targets, double lr) {
  auto l = critic_loss(critic, inputs, targets);
  critic.adam_step(l.grad, lr);
  return l.loss;
}

/// Negated score-function objective -mean_b[(Q_b - baseline) log pi(raw_b | tau_b)].
inline LossAndGrad actor_loss(const Actor& actor, const Matrix& inputs, const Matrix& raw_actions,
                              const Vector& q_values, bool subtract_baseline) {
  require(inputs.cols() >= 1 && inputs.cols() == raw_actions.cols() && inputs.cols() == q_values.size(),
          "actor batch mismatch");
  const double n = static_cast<double>(inputs.cols());
  const double baseline = subtract_baseline ? q_values.mean() : 0.0;
  nn::ForwardCache cache;
  const Matrix out = actor.net().forward(inputs, &cache);
  Matrix grad(out.rows(), out.cols());
  LossAndGrad result;
  for (Eigen::Index b = 0; b < out.cols(); ++b) {
    const double weight = q_values[b] - baseline;
    const Vector raw = raw_actions.col(b);
    const auto head = nn::make_head(out.col(b), actor.policy_options());
    result.loss -= weight * nn::squashed_log_prob(head, raw, actor.bounds()) / n;
    grad.col(b) = (-weight / n) * nn::log_prob_output_grad(out.col(b), raw, actor.policy_options());
  }
  result.grad = actor.net().backward(cache, grad);
  return result;
}

inline double actor_update(Actor& actor, const Matrix& inputs, const Matrix& raw_actions, const Vector& q_values,
                           bool subtract_baseline, double lr) {
  auto l = actor_loss(actor, inputs, raw_actions, q_values, subtract_baseline);
  actor.net().adam_step(l.grad, lr);
  return l.loss;
}

/// target <- (1 - rate) target + rate critic
inline void target_sync(const nn::Mlp& critic, nn::Mlp& target, double rate) { nn::soft_update(target, critic, rate); }

}  // namespace cemrrl::marl
