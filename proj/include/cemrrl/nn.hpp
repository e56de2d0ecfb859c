#pragma once

// Fixed-architecture feed-forward networks with exact reverse-mode
// gradients, Adam, and the tanh-squashed Gaussian policy head.
//
// Batches are column-major: a (features x batch) matrix per layer.

#include "cemrrl/checkpoint.hpp"
#include "cemrrl/core.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace cemrrl::nn {

enum class Activation { LeakyReLU, Identity, Tanh };

struct LayerSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  Activation activation = Activation::Identity;
  bool normalize = false;  // layer normalization before the activation
};

struct NetOptions {
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Trainable tensors of one layer; gain and shift are empty when the layer
/// is not normalized.
struct LayerParams {
  Matrix weight;
  Vector bias;
  Vector gain;
  Vector shift;
};

using ParamSet = std::vector<LayerParams>;

/// Applies f(a_tensor, b_tensor) to every matching pair of tensors.
template <class A, class B, class F>
void zip_tensors(A& a, B& b, F&& f) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    f(a[k].weight, b[k].weight);
    f(a[k].bias, b[k].bias);
    if (a[k].gain.size() > 0) {
      f(a[k].gain, b[k].gain);
      f(a[k].shift, b[k].shift);
    }
  }
}

inline ParamSet zeros_like(const ParamSet& p) {
  ParamSet z(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    z[k].weight = Matrix::Zero(p[k].weight.rows(), p[k].weight.cols());
    z[k].bias = Vector::Zero(p[k].bias.size());
    z[k].gain = Vector::Zero(p[k].gain.size());
    z[k].shift = Vector::Zero(p[k].shift.size());
  }
  return z;
}

inline void accumulate(ParamSet& into, const ParamSet& g) {
  zip_tensors(into, g, [](auto& a, const auto& b) { a += b; });
}

inline void scale(ParamSet& p, double s) {
  zip_tensors(p, p, [s](auto& a, const auto&) { a *= s; });
}

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LayerCache {
  Matrix input;
  Matrix xhat;               // normalized pre-activation (normalized layers)
  Eigen::RowVectorXd inv_std;
  Matrix post;               // activation input
  Matrix output;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

/// Hidden layers get layer normalization and LeakyReLU; the last layer is
/// affine with `output_activation`.
inline std::vector<LayerSpec> make_specs(const std::vector<std::size_t>& dims, bool normalize_hidden = true,
                                         Activation output_activation = Activation::Identity) {
  require(dims.size() >= 2, "an MLP needs at least input and output dims");
  std::vector<LayerSpec> specs;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const bool last = k + 2 == dims.size();
    specs.push_back({dims[k], dims[k + 1], last ? output_activation : Activation::LeakyReLU,
                     !last && normalize_hidden});
  }
  return specs;
}

class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<LayerSpec> specs, Rng& rng, NetOptions options = {}, AdamConfig adam = {})
      : specs_(std::move(specs)), options_(options), adam_config_(adam) {
    require(!specs_.empty(), "an MLP needs at least one layer");
    for (std::size_t k = 0; k < specs_.size(); ++k) {
      const auto& s = specs_[k];
      require(s.in_dim >= 1 && s.out_dim >= 1, "layer dims must be >= 1");
      if (k > 0) require(specs_[k - 1].out_dim == s.in_dim, "layer shapes must chain");
    }
    params_.resize(specs_.size());
    for (std::size_t k = 0; k < specs_.size(); ++k) {
      const auto& s = specs_[k];
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.in_dim));
      std::uniform_real_distribution<double> u(-bound, bound);
      auto& p = params_[k];
      p.weight.resize(static_cast<Eigen::Index>(s.out_dim), static_cast<Eigen::Index>(s.in_dim));
      for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = u(rng);
      p.bias.resize(static_cast<Eigen::Index>(s.out_dim));
      for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias[i] = u(rng);
      if (s.normalize) {
        p.gain = Vector::Ones(static_cast<Eigen::Index>(s.out_dim));
        p.shift = Vector::Zero(static_cast<Eigen::Index>(s.out_dim));
      }
    }
    reset_optimizer();
  }

  const std::vector<LayerSpec>& specs() const { return specs_; }
  const NetOptions& options() const { return options_; }
  std::size_t in_dim() const { return specs_.front().in_dim; }
  std::size_t out_dim() const { return specs_.back().out_dim; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  long adam_steps() const { return adam_t_; }

  void reset_optimizer() {
    adam_m_ = zeros_like(params_);
    adam_v_ = zeros_like(params_);
    adam_t_ = 0;
  }

  /// Batched forward pass; fills `cache` for a later backward pass.
  Matrix forward(const Matrix& input, ForwardCache* cache = nullptr) const {
    require(static_cast<std::size_t>(input.rows()) == in_dim(), "input dimension mismatch");
    if (cache) cache->layers.resize(specs_.size());
    Matrix x = input;
    for (std::size_t k = 0; k < specs_.size(); ++k) {
      const auto& s = specs_[k];
      const auto& p = params_[k];
      Matrix z = p.weight * x;
      z.colwise() += p.bias;
      Matrix xhat;
      Eigen::RowVectorXd inv_std;
      if (s.normalize) {
        const double n = static_cast<double>(z.rows());
        const Eigen::RowVectorXd mean = z.colwise().sum() / n;
        z.rowwise() -= mean;
        inv_std = ((z.array().square().colwise().sum() / n) + options_.norm_eps).rsqrt().matrix();
        xhat = z * inv_std.asDiagonal();
        z = (xhat.array().colwise() * p.gain.array()).matrix();
        z.colwise() += p.shift;
      }
      Matrix y = activate(s.activation, z);
      if (cache) {
        auto& c = cache->layers[k];
        c.input = std::move(x);
        c.xhat = std::move(xhat);
        c.inv_std = std::move(inv_std);
        c.post = std::move(z);
        c.output = y;
      }
      x = std::move(y);
    }
    return x;
  }

  Vector forward(const Vector& input) const { return forward(Matrix(input)).col(0); }

  /// Gradients of sum_b <output_grad[:, b], output[:, b]> with respect to the
  /// parameters and, optionally, the input.
  ParamSet backward(const ForwardCache& cache, const Matrix& output_grad, Matrix* input_grad = nullptr) const {
    require(cache.layers.size() == specs_.size(), "cache does not match this network");
    ParamSet grads(specs_.size());
    Matrix g = output_grad;
    for (std::size_t kk = specs_.size(); kk-- > 0;) {
      const auto& s = specs_[kk];
      const auto& p = params_[kk];
      const auto& c = cache.layers[kk];
      g = activation_backward(s.activation, c, g);
      auto& out = grads[kk];
      if (s.normalize) {
        out.gain = (g.cwiseProduct(c.xhat)).rowwise().sum();
        out.shift = g.rowwise().sum();
        const Matrix dxhat = (g.array().colwise() * p.gain.array()).matrix();
        const double n = static_cast<double>(dxhat.rows());
        const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
        const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(c.xhat).colwise().sum();
        Matrix dz = n * dxhat;
        dz.rowwise() -= sum_d;
        dz -= c.xhat * sum_dx.asDiagonal();
        g = dz * (c.inv_std / n).asDiagonal();
      }
      out.weight = g * c.input.transpose();
      out.bias = g.rowwise().sum();
      if (kk > 0 || input_grad) g = p.weight.transpose() * g;
    }
    if (input_grad) *input_grad = std::move(g);
    return grads;
  }

  /// In-place Adam update with bias correction.
  void adam_step(const ParamSet& grads, double lr) {
    require(lr >= 0.0, "learning rate must be non-negative");
    require(grads.size() == params_.size(), "gradient does not match this network");
    ++adam_t_;
    const double b1 = adam_config_.beta1, b2 = adam_config_.beta2, eps = adam_config_.eps;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = b1 * m + (1.0 - b1) * g;
        v = (b2 * v.array() + (1.0 - b2) * g.array().square()).matrix();
        param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      };
      update(params_[k].weight, adam_m_[k].weight, adam_v_[k].weight, grads[k].weight);
      update(params_[k].bias, adam_m_[k].bias, adam_v_[k].bias, grads[k].bias);
      if (params_[k].gain.size() > 0) {
        update(params_[k].gain, adam_m_[k].gain, adam_v_[k].gain, grads[k].gain);
        update(params_[k].shift, adam_m_[k].shift, adam_v_[k].shift, grads[k].shift);
      }
    }
    if (!all_finite()) throw DivergenceError("non-finite parameter after Adam step");
  }

  bool all_finite() const {
    bool ok = true;
    zip_tensors(params_, params_, [&ok](const auto& a, const auto&) { ok = ok && a.allFinite(); });
    return ok;
  }

  /// Appends every tensor as "<prefix>.<layer>.<kind>".
  void export_tensors(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto base = prefix + "." + std::to_string(k) + ".";
      out.push_back(to_tensor(base + "weight", params_[k].weight));
      out.push_back(to_tensor(base + "bias", params_[k].bias));
      if (params_[k].gain.size() > 0) {
        out.push_back(to_tensor(base + "gain", params_[k].gain));
        out.push_back(to_tensor(base + "shift", params_[k].shift));
      }
    }
  }

  /// Loads tensors written by export_tensors into an identically shaped net.
  void import_tensors(const std::string& prefix, const Checkpoint& ckpt) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto base = prefix + "." + std::to_string(k) + ".";
      from_tensor(ckpt.get(base + "weight"), params_[k].weight);
      from_tensor(ckpt.get(base + "bias"), params_[k].bias);
      if (params_[k].gain.size() > 0) {
        from_tensor(ckpt.get(base + "gain"), params_[k].gain);
        from_tensor(ckpt.get(base + "shift"), params_[k].shift);
      }
    }
  }

 private:
  Matrix activate(Activation a, const Matrix& z) const {
    switch (a) {
      case Activation::Identity: return z;
      case Activation::Tanh: return z.array().tanh().matrix();
      case Activation::LeakyReLU: {
        const double s = options_.leaky_slope;
        return z.unaryExpr([s](double x) { return x > 0.0 ? x : s * x; });
      }
    }
    return z;
  }

  Matrix activation_backward(Activation a, const LayerCache& c, const Matrix& g) const {
    switch (a) {
      case Activation::Identity: return g;
      case Activation::Tanh: return (g.array() * (1.0 - c.output.array().square())).matrix();
      case Activation::LeakyReLU: {
        const double s = options_.leaky_slope;
        return g.binaryExpr(c.post, [s](double gi, double x) { return x > 0.0 ? gi : s * gi; });
      }
    }
    return g;
  }

  template <class M>
  static NamedTensor to_tensor(const std::string& name, const M& m) {
    NamedTensor t;
    t.name = name;
    t.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    t.data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(m(r, c));
    return t;
  }

  template <class M>
  static void from_tensor(const NamedTensor& t, M& m) {
    if (t.shape.size() != 2 || t.shape[0] != static_cast<std::size_t>(m.rows()) ||
        t.shape[1] != static_cast<std::size_t>(m.cols()))
      throw CheckpointError("tensor '" + t.name + "' has an unexpected shape");
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[i++];
  }

  std::vector<LayerSpec> specs_;
  NetOptions options_;
  AdamConfig adam_config_;
  ParamSet params_;
  ParamSet adam_m_;
  ParamSet adam_v_;
  long adam_t_ = 0;
};

/// target <- (1 - rate) * target + rate * source
inline void soft_update(Mlp& target, const Mlp& source, double rate) {
  require(rate > 0.0 && rate <= 1.0, "sync rate must lie in (0, 1]");
  if (rate == 1.0) {
    target.params() = source.params();
    return;
  }
  zip_tensors(target.params(), source.params(),
              [rate](auto& t, const auto& s) { t = (1.0 - rate) * t + rate * s; });
}

// ---------------------------------------------------------------------------
// Squashed Gaussian policy head.

struct PolicyOptions {
  double log_std_min = -20.0;
  double log_std_max = 2.0;
};

/// Mean (pre-squash) and clamped log standard deviation.
struct PolicyHead {
  Vector mean;
  Vector log_std;
};

/// Splits a network output [mean; raw_log_std] into a head.
inline PolicyHead make_head(const Eigen::Ref<const Vector>& output, const PolicyOptions& opts = {}) {
  require(output.size() % 2 == 0, "policy output must hold mean and log_std halves");
  const Eigen::Index k = output.size() / 2;
  return {output.head(k), output.tail(k).cwiseMax(opts.log_std_min).cwiseMin(opts.log_std_max)};
}

struct PolicySample {
  Vector action;  // bounds * tanh(raw)
  Vector raw;     // pre-squash Gaussian sample
  double log_prob = 0.0;
};

/// log(1 - tanh(u)^2), computed without cancellation.
inline double log_one_minus_tanh_sq(double u) {
  const double x = -2.0 * u;
  const double softplus = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  return 2.0 * (std::numbers::ln2 - u - softplus);
}

/// Log density of action bounds * tanh(raw) under the squashed Gaussian.
inline double squashed_log_prob(const PolicyHead& head, const Vector& raw, const Vector& bounds) {
  constexpr double half_log_2pi = 0.91893853320467274178;
  double lp = 0.0;
  for (Eigen::Index k = 0; k < raw.size(); ++k) {
    const double z = (raw[k] - head.mean[k]) * std::exp(-head.log_std[k]);
    lp += -0.5 * z * z - head.log_std[k] - half_log_2pi - std::log(bounds[k]) - log_one_minus_tanh_sq(raw[k]);
  }
  return lp;
}

inline PolicySample policy_sample(const PolicyHead& head, const Vector& bounds, Rng& rng,
                                  bool deterministic = false) {
  require((bounds.array() > 0.0).all(), "action bounds must be positive");
  PolicySample s;
  s.raw = head.mean;
  if (!deterministic) {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index k = 0; k < s.raw.size(); ++k) s.raw[k] += std::exp(head.log_std[k]) * n01(rng);
  }
  s.action.resize(s.raw.size());
  for (Eigen::Index k = 0; k < s.raw.size(); ++k) {
    double t = std::tanh(s.raw[k]);
    // tanh rounds to +-1 past |u| ~ 19; keep the action strictly inside.
    if (std::abs(t) >= 1.0) t = std::copysign(std::nextafter(1.0, 0.0), t);
    s.action[k] = bounds[k] * t;
  }
  s.log_prob = squashed_log_prob(head, s.raw, bounds);
  return s;
}

/// d log_prob / d network output, holding the raw sample fixed. Entries of
/// a clamped log_std receive zero gradient.
inline Vector log_prob_output_grad(const Eigen::Ref<const Vector>& output, const Vector& raw,
                                   const PolicyOptions& opts = {}) {
  const Eigen::Index k = output.size() / 2;
  Vector g(output.size());
  for (Eigen::Index i = 0; i < k; ++i) {
    const double raw_ls = output[k + i];
    const double ls = std::clamp(raw_ls, opts.log_std_min, opts.log_std_max);
    const double inv_var = std::exp(-2.0 * ls);
    const double diff = raw[i] - output[i];
    g[i] = diff * inv_var;
    const bool clamped = raw_ls < opts.log_std_min || raw_ls > opts.log_std_max;
    g[k + i] = clamped ? 0.0 : diff * diff * inv_var - 1.0;
  }
  return g;
}

}  // namespace cemrrl::nn
