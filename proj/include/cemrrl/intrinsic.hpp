#pragma once

// Self-learning intrinsic reward:
//
//   r_int = sqrt(2 * b_s) * N_d + c_s
//
// N_d  life-long novelty differential from random network distillation,
// b_s  episodic bonus h^T C h under the regularized inverse Gram matrix of
//      this episode's state embeddings,
// c_s  -beta * joint log-probability, beta self-tuned towards a target
//      entropy.

#include "cemrrl/core.hpp"
#include "cemrrl/nn.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace cemrrl::intrinsic {

/// Frozen random target embedding f and the trainable predictor f_hat.
struct RndPair {
  nn::Mlp target;
  nn::Mlp predictor;

  /// Independent initialisations of identical (dim, 128, 16) networks.
  static RndPair make(std::size_t joint_obs_dim, Rng& target_rng, Rng& predictor_rng,
                      std::size_t hidden = 128, std::size_t embed = 16) {
    const auto specs = nn::make_specs({joint_obs_dim, hidden, embed});
    return {nn::Mlp(specs, target_rng), nn::Mlp(specs, predictor_rng)};
  }
};

/// State embedding h and inverse-dynamics head g(h(o_t), h(o_t+1)).
struct EmbeddingNets {
  nn::Mlp h;
  nn::Mlp g;

  static EmbeddingNets make(std::size_t joint_obs_dim, std::size_t joint_action_dim, Rng& rng,
                            std::size_t hidden = 128, std::size_t embed = 16) {
    EmbeddingNets nets{nn::Mlp(nn::make_specs({joint_obs_dim, hidden, hidden, hidden, embed}), rng),
                       nn::Mlp(nn::make_specs({2 * embed, hidden, hidden, hidden, joint_action_dim}), rng)};
    require(nets.g.in_dim() == 2 * nets.h.out_dim(), "g must take two concatenated embeddings");
    return nets;
  }
};

/// c_h(t) = (sum_{k<t} h_k h_k^T + lambda I)^{-1}, maintained incrementally.
class EpisodicMemory {
 public:
  EpisodicMemory(std::size_t dim, double lambda_reg) : lambda_(lambda_reg) {
    require(lambda_reg > 0.0, "lambda must be positive");
    require(dim >= 1, "embedding dim must be >= 1");
    inv_gram_ = Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)) / lambda_;
  }

  void reset() {
    inv_gram_.setIdentity();
    inv_gram_ /= lambda_;
    count_ = 0;
  }

  const Matrix& inv_gram() const { return inv_gram_; }
  double lambda_reg() const { return lambda_; }
  std::size_t count() const { return count_; }
  std::size_t dim() const { return static_cast<std::size_t>(inv_gram_.rows()); }

  /// h^T c_h h against the memory before `h` is inserted.
  double bonus(const Vector& h) const {
    require(h.size() == inv_gram_.rows(), "embedding dim mismatch");
    return h.dot(inv_gram_ * h);
  }

  /// Sherman-Morrison rank-one update for A + h h^T.
  void insert(const Vector& h) {
    require(h.size() == inv_gram_.rows(), "embedding dim mismatch");
    const Vector ah = inv_gram_ * h;
    inv_gram_ -= (ah * ah.transpose()) / (1.0 + h.dot(ah));
    inv_gram_ = 0.5 * (inv_gram_ + inv_gram_.transpose()).eval();
    ++count_;
  }

 private:
  double lambda_;
  Matrix inv_gram_;
  std::size_t count_ = 0;
};

inline double episodic_bonus(const EpisodicMemory& mem, const Vector& h) { return mem.bonus(h); }
inline void memory_insert(EpisodicMemory& mem, const Vector& h) { mem.insert(h); }

/// beta = exp(log_beta), tuned with Adam in log space.
class Temperature {
 public:
  Temperature(double beta_init, double target_entropy, nn::AdamConfig adam = {})
      : log_beta_(std::log(beta_init)), target_entropy_(target_entropy), adam_(adam) {
    require(beta_init > 0.0, "initial temperature must be positive");
  }

  double beta() const { return std::exp(log_beta_); }
  double log_beta() const { return log_beta_; }
  double target_entropy() const { return target_entropy_; }
  void set_log_beta(double v) { log_beta_ = v; }

  /// One step on L = beta * (E[-log pi] - H_target); log pi is treated as a
  /// constant. Returns dL/dlog_beta.
  double update(std::span<const double> joint_log_probs, double lr) {
    require(!joint_log_probs.empty(), "temperature batch must be nonempty");
    double mean_neg_logp = 0.0;
    for (double lp : joint_log_probs) mean_neg_logp -= lp;
    mean_neg_logp /= static_cast<double>(joint_log_probs.size());
    const double grad = beta() * (mean_neg_logp - target_entropy_);
    ++t_;
    m_ = adam_.beta1 * m_ + (1.0 - adam_.beta1) * grad;
    v_ = adam_.beta2 * v_ + (1.0 - adam_.beta2) * grad * grad;
    const double m_hat = m_ / (1.0 - std::pow(adam_.beta1, static_cast<double>(t_)));
    const double v_hat = v_ / (1.0 - std::pow(adam_.beta2, static_cast<double>(t_)));
    log_beta_ -= lr * m_hat / (std::sqrt(v_hat) + adam_.eps);
    return grad;
  }

 private:
  double log_beta_;
  double target_entropy_;
  nn::AdamConfig adam_;
  double m_ = 0.0;
  double v_ = 0.0;
  long t_ = 0;
};

inline void temperature_update(Temperature& temp, std::span<const double> joint_log_probs, double lr) {
  temp.update(joint_log_probs, lr);
}

/// N_s(o) = ||f_hat(o) - f(o)||
inline double novelty(const RndPair& rnd, const Vector& o_flat) {
  require(static_cast<std::size_t>(o_flat.size()) == rnd.target.in_dim(), "joint observation dim mismatch");
  return (rnd.predictor.forward(o_flat) - rnd.target.forward(o_flat)).norm();
}

/// max(N_s(o_t+1) - alpha * N_s(o_t), 0)
inline double novelty_differential(double n_next, double n_curr, double alpha) {
  require(n_next >= 0.0 && n_curr >= 0.0, "novelty values are non-negative");
  return std::max(n_next - alpha * n_curr, 0.0);
}

/// -beta * sum_i log pi_i(a_i | .)
inline double entropy_term(double joint_log_prob, double beta) {
  require(beta > 0.0, "temperature must be positive");
  return -beta * joint_log_prob;
}

inline double intrinsic_reward(double b_s, double n_d, double c_s) {
  require(b_s >= 0.0 && n_d >= 0.0, "bonus and differential are non-negative");
  return std::sqrt(2.0 * b_s) * n_d + c_s;
}

/// Columns of `batch` stacked as a (dim x B) matrix.
inline Matrix stack_columns(std::span<const Vector* const> batch) {
  require(!batch.empty(), "batch must be nonempty");
  Matrix m(batch.front()->size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) m.col(static_cast<Eigen::Index>(b)) = *batch[b];
  return m;
}

/// One Adam step on the predictor minimising the mean novelty of the batch.
/// Returns the pre-update mean novelty.
inline double predictor_update(RndPair& rnd, const Matrix& observations, double lr) {
  require(observations.cols() >= 1, "batch must be nonempty");
  const Matrix target = rnd.target.forward(observations);
  nn::ForwardCache cache;
  const Matrix pred = rnd.predictor.forward(observations, &cache);
  const Matrix diff = pred - target;
  const double batch = static_cast<double>(observations.cols());
  Matrix grad(diff.rows(), diff.cols());
  double loss = 0.0;
  for (Eigen::Index b = 0; b < diff.cols(); ++b) {
    const double n = diff.col(b).norm();
    loss += n;
    grad.col(b) = n > 0.0 ? Vector(diff.col(b) / (n * batch)) : Vector::Zero(diff.rows());
  }
  if (lr > 0.0) rnd.predictor.adam_step(rnd.predictor.backward(cache, grad), lr);
  return loss / batch;
}

/// Mean squared inverse-dynamics error and its gradients for h and g.
struct InverseDynamicsLoss {
  double loss = 0.0;
  nn::ParamSet h_grad;
  nn::ParamSet g_grad;
};

inline InverseDynamicsLoss inverse_dynamics_loss(const EmbeddingNets& nets, const Matrix& obs,
                                                 const Matrix& actions, const Matrix& next_obs) {
  require(obs.cols() >= 1 && obs.cols() == actions.cols() && obs.cols() == next_obs.cols(),
          "inverse-dynamics batch columns must agree");
  nn::ForwardCache h_cur_cache, h_next_cache, g_cache;
  const Matrix h_cur = nets.h.forward(obs, &h_cur_cache);
  const Matrix h_next = nets.h.forward(next_obs, &h_next_cache);
  Matrix g_in(h_cur.rows() * 2, h_cur.cols());
  g_in.topRows(h_cur.rows()) = h_cur;
  g_in.bottomRows(h_cur.rows()) = h_next;
  const Matrix pred = nets.g.forward(g_in, &g_cache);
  const Matrix diff = pred - actions;
  const double n = static_cast<double>(diff.size());

  InverseDynamicsLoss out;
  out.loss = diff.squaredNorm() / n;
  Matrix g_in_grad;
  out.g_grad = nets.g.backward(g_cache, (2.0 / n) * diff, &g_in_grad);
  const Eigen::Index e = h_cur.rows();
  out.h_grad = nets.h.backward(h_cur_cache, g_in_grad.topRows(e));
  nn::accumulate(out.h_grad, nets.h.backward(h_next_cache, g_in_grad.bottomRows(e)));
  return out;
}

/// One joint Adam step on h and g; returns the pre-update loss.
inline double inverse_dynamics_update(EmbeddingNets& nets, const Matrix& obs, const Matrix& actions,
                                      const Matrix& next_obs, double lr) {
  auto l = inverse_dynamics_loss(nets, obs, actions, next_obs);
  if (lr > 0.0) {
    nets.h.adam_step(l.h_grad, lr);
    nets.g.adam_step(l.g_grad, lr);
  }
  return l.loss;
}

/// Which terms of the intrinsic reward are active. Neutralised
/// multiplicative terms are pinned so that their factor equals 1; additive
/// terms are pinned to 0.
struct TermMask {
  bool use_novelty_differential = true;  // else N_d = 1
  bool use_episodic_bonus = true;        // else b_s = 1/2
  bool use_entropy = true;               // else c_s = 0
  bool use_exploration_term = true;      // else sqrt(2 b_s) N_d = 0

  friend bool operator==(const TermMask&, const TermMask&) = default;
};

/// Per-step decomposition, after masking.
struct Decomposition {
  double b_s = 0.0;
  double n_d = 0.0;
  double c_s = 0.0;
  double total = 0.0;
};

/// Per-environment evaluator of the intrinsic reward. Owns the episodic
/// memory; the networks and temperature are borrowed from the learner.
class RewardComputer {
 public:
  RewardComputer(std::size_t embed_dim, double lambda_reg, double alpha, double scale, TermMask mask)
      : memory_(embed_dim, lambda_reg), alpha_(alpha), scale_(scale), mask_(mask) {}

  void begin_episode() { memory_.reset(); }
  const EpisodicMemory& memory() const { return memory_; }
  const TermMask& mask() const { return mask_; }

  /// Evaluates the reward for the step o_t -> o_t+1 and then records h(o_t)
  /// in the episodic memory.
  Decomposition step(const RndPair& rnd, const EmbeddingNets& nets, double beta, const Vector& o_flat,
                     const Vector& o_next_flat, double joint_log_prob) {
    Decomposition d;
    const Vector h = nets.h.forward(o_flat);
    d.b_s = mask_.use_episodic_bonus ? memory_.bonus(h) : 0.5;
    d.n_d = mask_.use_novelty_differential
                ? novelty_differential(novelty(rnd, o_next_flat), novelty(rnd, o_flat), alpha_)
                : 1.0;
    d.c_s = mask_.use_entropy ? entropy_term(joint_log_prob, beta) : 0.0;
    if (!mask_.use_exploration_term) {
      d.b_s = 0.0;
      d.n_d = 0.0;
    }
    d.total = scale_ * intrinsic_reward(d.b_s, d.n_d, d.c_s);
    memory_.insert(h);
    return d;
  }

 private:
  EpisodicMemory memory_;
  double alpha_;
  double scale_;
  TermMask mask_;
};

}  // namespace cemrrl::intrinsic
