#pragma once

// The training driver. Per timestep: act, step the environment, compute
// the intrinsic reward, record the transition, then refresh the intrinsic
// learners (inverse dynamics, predictor, temperature) on a mini-batch of
// transition tuples at the fast step size. Per episode: store the
// trajectory, draw trajectory windows, update every critic and then every
// actor at the slow step size.

#include "cemrrl/checkpoint.hpp"
#include "cemrrl/config.hpp"
#include "cemrrl/env.hpp"
#include "cemrrl/intrinsic.hpp"
#include "cemrrl/marl.hpp"
#include "cemrrl/nn.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace cemrrl {

/// All trainable state of one run.
class Learner {
 public:
  Learner(const Config& config, std::uint64_t seed)
      : rnd_(make_rnd(config, seed)),
        embed_(make_embed(config, seed)),
        temperature_(config.hyper.beta_init, config.hyper.resolved_target_entropy(config.scenario),
                     config.network.adam()) {
    const auto& sc = config.scenario;
    const std::size_t h = config.hyper.history_length;
    Rng rng = make_rng(seed, Stream::ActorCriticInit);
    Vector bounds(2);
    bounds << sc.v_max, sc.w_max;
    for (std::size_t i = 0; i < sc.num_robots(); ++i)
      actors_.emplace_back(marl::history_dim(sc.local_obs_dim(i), 2, h), config.network, bounds, rng);
    const std::size_t critic_in =
        marl::history_dim(sc.joint_obs_dim(), sc.joint_action_dim(), h) + sc.joint_action_dim();
    for (std::size_t i = 0; i < sc.num_robots(); ++i) {
      critics_.push_back(marl::make_critic(critic_in, config.network, rng));
      target_critics_.push_back(critics_.back());
      target_critics_.back().reset_optimizer();
    }
  }

  std::vector<marl::Actor>& actors() { return actors_; }
  const std::vector<marl::Actor>& actors() const { return actors_; }
  std::vector<nn::Mlp>& critics() { return critics_; }
  const std::vector<nn::Mlp>& critics() const { return critics_; }
  std::vector<nn::Mlp>& target_critics() { return target_critics_; }
  const std::vector<nn::Mlp>& target_critics() const { return target_critics_; }
  intrinsic::RndPair& rnd() { return rnd_; }
  const intrinsic::RndPair& rnd() const { return rnd_; }
  intrinsic::EmbeddingNets& embed() { return embed_; }
  const intrinsic::EmbeddingNets& embed() const { return embed_; }
  intrinsic::Temperature& temperature() { return temperature_; }
  const intrinsic::Temperature& temperature() const { return temperature_; }

  void export_tensors(std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < actors_.size(); ++i) {
      actors_[i].net().export_tensors("actor." + std::to_string(i), out);
      critics_[i].export_tensors("critic." + std::to_string(i), out);
      target_critics_[i].export_tensors("target_critic." + std::to_string(i), out);
    }
    rnd_.target.export_tensors("rnd.target", out);
    rnd_.predictor.export_tensors("rnd.predictor", out);
    embed_.h.export_tensors("embed.h", out);
    embed_.g.export_tensors("embed.g", out);
    out.push_back({"temperature.log_beta", {1, 1}, {temperature_.log_beta()}});
  }

  void import_tensors(const Checkpoint& ckpt) {
    for (std::size_t i = 0; i < actors_.size(); ++i) {
      actors_[i].net().import_tensors("actor." + std::to_string(i), ckpt);
      critics_[i].import_tensors("critic." + std::to_string(i), ckpt);
      target_critics_[i].import_tensors("target_critic." + std::to_string(i), ckpt);
    }
    rnd_.target.import_tensors("rnd.target", ckpt);
    rnd_.predictor.import_tensors("rnd.predictor", ckpt);
    embed_.h.import_tensors("embed.h", ckpt);
    embed_.g.import_tensors("embed.g", ckpt);
    temperature_.set_log_beta(ckpt.get("temperature.log_beta").data.at(0));
  }

 private:
  static intrinsic::RndPair make_rnd(const Config& c, std::uint64_t seed) {
    Rng target_rng = make_rng(seed, Stream::RndTargetInit);
    Rng predictor_rng = make_rng(seed, Stream::IntrinsicInit, 1);
    return intrinsic::RndPair::make(c.scenario.joint_obs_dim(), target_rng, predictor_rng, c.network.embed_hidden,
                                    c.network.embed_dim);
  }
  static intrinsic::EmbeddingNets make_embed(const Config& c, std::uint64_t seed) {
    Rng rng = make_rng(seed, Stream::IntrinsicInit, 2);
    return intrinsic::EmbeddingNets::make(c.scenario.joint_obs_dim(), c.scenario.joint_action_dim(), rng,
                                          c.network.embed_hidden, c.network.embed_dim);
  }

  std::vector<marl::Actor> actors_;
  std::vector<nn::Mlp> critics_;
  std::vector<nn::Mlp> target_critics_;
  intrinsic::RndPair rnd_;
  intrinsic::EmbeddingNets embed_;
  intrinsic::Temperature temperature_;
};

/// Checkpoint = learner tensors + resolved configuration in the manifest.
inline Checkpoint make_checkpoint(const Learner& learner, const Config& config, std::uint64_t seed,
                                  std::size_t episodes_trained) {
  Checkpoint ckpt;
  learner.export_tensors(ckpt.tensors);
  ckpt.meta = {{"kind", "cemrrl-learner"},
               {"config", to_json(config)},
               {"seed", seed},
               {"episodes_trained", episodes_trained}};
  return ckpt;
}

struct LoadedLearner {
  Config config;
  std::unique_ptr<Learner> learner;
};

inline LoadedLearner load_learner(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "cemrrl-learner") throw CheckpointError("checkpoint does not hold a learner");
  LoadedLearner out;
  out.config = config_from_json(ckpt.meta.at("config"));
  out.learner = std::make_unique<Learner>(out.config, ckpt.meta.value("seed", std::uint64_t{0}));
  out.learner->import_tensors(ckpt);
  return out;
}

/// One record per training episode.
struct EpisodeLog {
  std::size_t episode = 0;
  std::vector<double> returns;  // per robot, sum of intrinsic + own extrinsic rewards
  double intrinsic_mean = 0.0;
  bool success = false;
  bool collision = false;
  bool timeout = false;
  double nav_time = 0.0;
  double afe = 0.0;
  double min_separation = 0.0;  // leader's smallest separation over the episode
  double beta = 0.0;
  double kappa_f = 0.0;
  double kappa_s = 0.0;
  std::size_t steps = 0;
  std::size_t intrinsic_updates = 0;
  bool actor_critic_updated = false;
};

inline nlohmann::json to_json(const EpisodeLog& e) {
  return {{"schema", "cemrrl.metrics"},
          {"schema_version", 1},
          {"episode", e.episode},
          {"returns", e.returns},
          {"intrinsic_mean", e.intrinsic_mean},
          {"success", e.success},
          {"collision", e.collision},
          {"timeout", e.timeout},
          {"nav_time", e.nav_time},
          {"afe", e.afe},
          {"min_separation", e.min_separation},
          {"beta", e.beta},
          {"kappa_f", e.kappa_f},
          {"kappa_s", e.kappa_s},
          {"steps", e.steps},
          {"intrinsic_updates", e.intrinsic_updates},
          {"actor_critic_updated", e.actor_critic_updated}};
}

/// Observer hooks for instrumentation. Default implementations do nothing.
struct TrainingProbe {
  virtual ~TrainingProbe() = default;
  /// Fired once per timestep; `updated` is false when the buffer could not
  /// yet supply a full transition batch.
  virtual void on_intrinsic_step(std::size_t /*episode*/, std::size_t /*step*/, marl::SampleView /*view*/,
                                 bool /*updated*/) {}
  virtual void on_critic_update(std::size_t /*episode*/, std::size_t /*robot*/, marl::SampleView /*view*/) {}
  virtual void on_actor_update(std::size_t /*episode*/, std::size_t /*robot*/, marl::SampleView /*view*/) {}
  virtual void on_step(std::size_t /*episode*/, const marl::Transition& /*transition*/) {}
  virtual void on_episode_end(const EpisodeLog& /*log*/) {}
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  Trainer(Config config, std::uint64_t seed, TrainingProbe* probe = nullptr)
      : config_(std::move(config)),
        seed_(seed),
        probe_(probe),
        learner_(config_, seed),
        env_(config_.scenario, config_.orca),
        buffer_(config_.hyper.buffer_capacity),
        rewards_(config_.network.embed_dim, config_.hyper.lambda_reg, config_.hyper.alpha_scale,
                 config_.hyper.intrinsic_scale, config_.terms),
        env_rng_(make_rng(seed, Stream::Environment)),
        policy_rng_(make_rng(seed, Stream::PolicySampling)),
        replay_rng_(make_rng(seed, Stream::ReplaySampling)) {
    validate(config_);
  }

  const Config& config() const { return config_; }
  const Learner& learner() const { return learner_; }
  Learner& learner() { return learner_; }
  const marl::ReplayBuffer& buffer() const { return buffer_; }
  std::size_t episodes_done() const { return episode_; }

  Checkpoint checkpoint() const { return make_checkpoint(learner_, config_, seed_, episode_); }

  std::vector<EpisodeLog> train(std::size_t episodes, std::ostream* metrics_log = nullptr) {
    std::vector<EpisodeLog> logs;
    logs.reserve(episodes);
    for (std::size_t k = 0; k < episodes; ++k) {
      logs.push_back(run_episode());
      if (metrics_log) *metrics_log << to_json(logs.back()).dump() << '\n';
    }
    return logs;
  }

  EpisodeLog run_episode() {
    try {
      return run_episode_impl();
    } catch (const nn::DivergenceError& e) {
      throw TrainingError(diagnostic(e.what()));
    }
  }

 private:
  EpisodeLog run_episode_impl() {
    const auto& sc = config_.scenario;
    const auto& hp = config_.hyper;
    const std::size_t robots = sc.num_robots();
    const std::size_t history = hp.history_length;
    const marl::StepSizes kappa = marl::step_size_schedule(episode_, hp);

    EpisodeLog log;
    log.episode = episode_;
    log.returns.assign(robots, 0.0);
    log.kappa_f = kappa.fast;
    log.kappa_s = kappa.slow;
    log.min_separation = std::numeric_limits<double>::infinity();

    JointObservation obs = env_.reset(env_rng_);
    rewards_.begin_episode();
    std::vector<marl::HistoryTracker> trackers;
    for (std::size_t i = 0; i < robots; ++i) {
      trackers.emplace_back(history, sc.local_obs_dim(i), 2);
      trackers.back().reset(obs.per_robot[i].flatten());
    }
    auto current = std::make_shared<marl::StepObservation>();
    current->obs = std::move(obs);
    for (auto& tr : trackers) current->local_tau.push_back(tr.encode());

    marl::Trajectory trajectory;
    double afe_sum = 0.0;
    std::size_t afe_count = 0;
    double intrinsic_sum = 0.0;
    env::StepOutcome outcome;

    while (true) {
      step_ = trajectory.size();
      // Decentralized action selection: robot i reads only its own history.
      env::JointAction action(robots);
      Vector joint_action(static_cast<Eigen::Index>(2 * robots));
      Vector joint_raw(static_cast<Eigen::Index>(2 * robots));
      double joint_log_prob = 0.0;
      for (std::size_t i = 0; i < robots; ++i) {
        const auto sample = learner_.actors()[i].act(current->local_tau[i], policy_rng_);
        action[i] = {sample.action[0], sample.action[1]};
        joint_action.segment(static_cast<Eigen::Index>(2 * i), 2) = sample.action;
        joint_raw.segment(static_cast<Eigen::Index>(2 * i), 2) = sample.raw;
        joint_log_prob += sample.log_prob;
      }

      outcome = env_.step(action, env_rng_);

      const auto terms = rewards_.step(learner_.rnd(), learner_.embed(), learner_.temperature().beta(),
                                       current->obs.flat, outcome.next_obs.flat, joint_log_prob);

      auto next = std::make_shared<marl::StepObservation>();
      for (std::size_t i = 0; i < robots; ++i) {
        trackers[i].push(joint_action.segment(static_cast<Eigen::Index>(2 * i), 2),
                         outcome.next_obs.per_robot[i].flatten());
        next->local_tau.push_back(trackers[i].encode());
      }
      next->obs = std::move(outcome.next_obs);

      marl::Transition tr;
      tr.o_t = current;
      tr.joint_action = joint_action;
      tr.joint_raw = joint_raw;
      tr.r_intrinsic = terms.total;
      tr.intrinsic_terms = terms;
      tr.r_extrinsic = outcome.extrinsic_rewards;
      tr.o_next = next;
      tr.done = outcome.done;
      tr.bootstrap = !(outcome.termination == env::Termination::GoalReached ||
                       outcome.termination == env::Termination::Collision);
      tr.t_index = trajectory.size();
      if (probe_) probe_->on_step(episode_, tr);
      trajectory.push_back(std::move(tr));

      for (std::size_t i = 0; i < robots; ++i) {
        log.returns[i] += terms.total + outcome.extrinsic_rewards[i];
      }
      intrinsic_sum += terms.total;
      log.min_separation = std::min(log.min_separation, outcome.min_separations[0]);
      for (double e : outcome.formation_errors) {
        afe_sum += e;
        ++afe_count;
      }

      if (fast_updates(kappa.fast_lr())) ++log.intrinsic_updates;

      current = std::move(next);
      if (outcome.done) break;
    }

    log.steps = trajectory.size();
    log.intrinsic_mean = intrinsic_sum / static_cast<double>(log.steps);
    log.success = outcome.termination == env::Termination::GoalReached;
    log.collision = outcome.termination == env::Termination::Collision;
    log.timeout = outcome.termination == env::Termination::Timeout;
    log.nav_time = static_cast<double>(log.steps) * sc.dt;
    log.afe = afe_count ? afe_sum / static_cast<double>(afe_count) : 0.0;

    buffer_.store(std::move(trajectory));
    log.actor_critic_updated = slow_updates(kappa.slow_lr());
    if (log.actor_critic_updated && (episode_ + 1) % hp.target_update_interval == 0)
      for (std::size_t i = 0; i < robots; ++i)
        marl::target_sync(learner_.critics()[i], learner_.target_critics()[i], hp.target_update_rate);

    log.beta = learner_.temperature().beta();
    if (probe_) probe_->on_episode_end(log);
    ++episode_;
    return log;
  }

  /// Intrinsic learners on transition tuples. Returns false on a skip.
  bool fast_updates(double lr) {
    const auto batch = buffer_.sample_transitions(config_.hyper.resolved_intrinsic_batch(), replay_rng_);
    if (probe_) probe_->on_intrinsic_step(episode_, step_, marl::SampleView::Transitions, batch.has_value());
    if (!batch) return false;
    intrinsic_update(*batch, lr);
    return true;
  }

  void intrinsic_update(std::span<const marl::TransitionRef> batch, double lr) {
    const auto& sc = config_.scenario;
    const auto n = static_cast<Eigen::Index>(batch.size());
    const auto jd = static_cast<Eigen::Index>(sc.joint_obs_dim());
    const auto ad = static_cast<Eigen::Index>(sc.joint_action_dim());
    Matrix obs(jd, n), next(jd, n), actions(ad, n);
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto& tr = batch[static_cast<std::size_t>(b)].get();
      obs.col(b) = tr.o_t->obs.flat;
      next.col(b) = tr.o_next->obs.flat;
      actions.col(b) = tr.joint_action;
    }
    const auto& mask = config_.terms;
    const bool bonus_active = mask.use_exploration_term && mask.use_episodic_bonus;
    const bool novelty_active = mask.use_exploration_term && mask.use_novelty_differential;
    if (bonus_active) intrinsic::inverse_dynamics_update(learner_.embed(), obs, actions, next, lr);
    if (novelty_active) intrinsic::predictor_update(learner_.rnd(), next, lr);

    // Temperature: joint log-probability of fresh actions from the current
    // actors at the sampled observations.
    std::vector<double> joint_log_probs(batch.size(), 0.0);
    for (std::size_t i = 0; i < learner_.actors().size(); ++i) {
      const auto& actor = learner_.actors()[i];
      Matrix inputs(static_cast<Eigen::Index>(actor.input_dim()), n);
      for (Eigen::Index b = 0; b < n; ++b) inputs.col(b) = batch[static_cast<std::size_t>(b)].get().o_t->local_tau[i];
      const Matrix out = actor.net().forward(inputs);
      for (Eigen::Index b = 0; b < n; ++b) {
        const auto head = nn::make_head(out.col(b), actor.policy_options());
        joint_log_probs[static_cast<std::size_t>(b)] += nn::policy_sample(head, actor.bounds(), policy_rng_).log_prob;
      }
    }
    learner_.temperature().update(joint_log_probs, lr);
  }

  /// Critics then actors on trajectory windows. Returns false on a skip.
  bool slow_updates(double lr) {
    const auto& sc = config_.scenario;
    const auto& hp = config_.hyper;
    const auto windows = buffer_.sample_trajectories(hp.batch_size, hp.history_length, replay_rng_);
    if (!windows) return false;
    const std::size_t robots = sc.num_robots();
    const auto n = static_cast<Eigen::Index>(windows->size());
    const auto ad = static_cast<Eigen::Index>(sc.joint_action_dim());
    auto& actors = learner_.actors();

    const auto jh = static_cast<Eigen::Index>(marl::history_dim(sc.joint_obs_dim(), sc.joint_action_dim(),
                                                                hp.history_length));
    Matrix critic_in(jh + ad, n), next_critic_in(jh + ad, n), raw(ad, n);
    std::vector<Matrix> local(robots), next_local(robots);
    for (std::size_t i = 0; i < robots; ++i) {
      local[i].resize(static_cast<Eigen::Index>(actors[i].input_dim()), n);
      next_local[i].resize(static_cast<Eigen::Index>(actors[i].input_dim()), n);
    }
    Vector r_int(n);
    Matrix r_ext(static_cast<Eigen::Index>(robots), n);
    Vector bootstrap(n);
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto& w = (*windows)[static_cast<std::size_t>(b)];
      const auto& tr = w.transition();
      critic_in.col(b).head(jh) = w.joint_history();
      critic_in.col(b).tail(ad) = tr.joint_action;
      next_critic_in.col(b).head(jh) = w.next_joint_history();
      raw.col(b) = tr.joint_raw;
      for (std::size_t i = 0; i < robots; ++i) {
        local[i].col(b) = w.local_history(i);
        next_local[i].col(b) = w.next_local_history(i);
        r_ext(static_cast<Eigen::Index>(i), b) = tr.r_extrinsic[i];
      }
      r_int[b] = tr.r_intrinsic;
      bootstrap[b] = tr.bootstrap ? 1.0 : 0.0;
    }
    // a_{t+1} from the current actors.
    for (std::size_t j = 0; j < robots; ++j) {
      const Matrix out = actors[j].net().forward(next_local[j]);
      for (Eigen::Index b = 0; b < n; ++b) {
        const auto head = nn::make_head(out.col(b), actors[j].policy_options());
        next_critic_in.col(b).segment(jh + static_cast<Eigen::Index>(2 * j), 2) =
            nn::policy_sample(head, actors[j].bounds(), policy_rng_).action;
      }
    }

    const double discount = marl::step_discount(hp.gamma, sc.dt, sc.robot_preferred_speed);
    for (std::size_t i = 0; i < robots; ++i) {
      const Matrix q_next = learner_.target_critics()[i].forward(next_critic_in);
      const Vector y = r_int + r_ext.row(static_cast<Eigen::Index>(i)).transpose() +
                       discount * bootstrap.cwiseProduct(q_next.row(0).transpose());
      marl::critic_update(learner_.critics()[i], critic_in, y, lr);
      if (probe_) probe_->on_critic_update(episode_, i, marl::SampleView::Trajectories);
    }
    for (std::size_t i = 0; i < robots; ++i) {
      const Vector q = learner_.critics()[i].forward(critic_in).row(0).transpose();
      marl::actor_update(actors[i], local[i], raw.middleRows(static_cast<Eigen::Index>(2 * i), 2), q,
                         hp.actor_baseline, lr);
      if (probe_) probe_->on_actor_update(episode_, i, marl::SampleView::Trajectories);
    }
    return true;
  }

  std::string diagnostic(const std::string& what) const {
    nlohmann::json d = {{"error", what}, {"episode", episode_}, {"step", step_}, {"seed", seed_},
                        {"beta", learner_.temperature().beta()}};
    auto finite = [](const nn::Mlp& m) { return m.all_finite(); };
    for (std::size_t i = 0; i < learner_.actors().size(); ++i) {
      d["actor_finite"].push_back(finite(learner_.actors()[i].net()));
      d["critic_finite"].push_back(finite(learner_.critics()[i]));
    }
    d["predictor_finite"] = finite(learner_.rnd().predictor);
    d["embed_h_finite"] = finite(learner_.embed().h);
    d["embed_g_finite"] = finite(learner_.embed().g);
    return "training diverged: " + d.dump();
  }

  Config config_;
  std::uint64_t seed_;
  TrainingProbe* probe_;
  Learner learner_;
  env::Environment env_;
  marl::ReplayBuffer buffer_;
  intrinsic::RewardComputer rewards_;
  Rng env_rng_;
  Rng policy_rng_;
  Rng replay_rng_;
  std::size_t episode_ = 0;
  std::size_t step_ = 0;
};

}  // namespace cemrrl
