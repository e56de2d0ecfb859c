#include "cemrrl/checkpoint.hpp"
#include "cemrrl/config.hpp"
#include "cemrrl/nn.hpp"
#include "test_util.hpp"

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cemrrl;
using namespace cemrrl::nn;
using testutil::random_matrix;
using testutil::rel_err;

namespace {

struct Arch {
  const char* name;
  std::vector<std::size_t> dims;
};

// Every network shape used for the default scenario (2 followers, 5 pedestrians).
const std::vector<Arch> kArchitectures = {
    {"rnd", {42, 128, 16}},
    {"embedding", {42, 128, 128, 128, 16}},
    {"inverse_dynamics", {32, 128, 128, 128, 6}},
    {"leader_actor", {44, 256, 256, 4}},
    {"follower_actor", {42, 256, 256, 4}},
    {"critic", {48, 256, 256, 1}},
};

double weighted_output(const Mlp& net, const Matrix& x, const Matrix& w) {
  return (net.forward(x).array() * w.array()).sum();
}

}  // namespace

TEST(Mlp, BatchedForwardMatchesColumnwise) {
  Rng rng(1);
  Mlp net(make_specs({5, 8, 8, 3}), rng);
  const Matrix x = random_matrix(5, 7, rng);
  const Matrix y = net.forward(x);
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    const Vector col = x.col(b);
    EXPECT_LT((net.forward(col) - y.col(b)).norm(), 1e-14);
  }
}

TEST(Mlp, LayerNormNormalizesHiddenPreActivation) {
  Rng rng(2);
  // Identity activation and unit gain expose the normalized values directly.
  std::vector<LayerSpec> specs{{6, 32, Activation::Identity, true}};
  Mlp net(specs, rng);
  const Matrix y = net.forward(random_matrix(6, 4, rng, 3.0));
  for (Eigen::Index b = 0; b < y.cols(); ++b) {
    const double mean = y.col(b).mean();
    const double var = (y.col(b).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps = 1e-5 in the denominator
  }
}

TEST(Mlp, HiddenLayersNormalizedOutputLinear) {
  const auto specs = make_specs({4, 16, 16, 2});
  ASSERT_EQ(specs.size(), 3u);
  EXPECT_TRUE(specs[0].normalize);
  EXPECT_EQ(specs[0].activation, Activation::LeakyReLU);
  EXPECT_TRUE(specs[1].normalize);
  EXPECT_FALSE(specs[2].normalize);
  EXPECT_EQ(specs[2].activation, Activation::Identity);
}

TEST(Mlp, FanInUniformInitialization) {
  Rng rng(3);
  Mlp net(make_specs({100, 50, 1}), rng);
  const double bound = 1.0 / std::sqrt(100.0);
  EXPECT_LE(net.params()[0].weight.cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(net.params()[0].weight.cwiseAbs().maxCoeff(), 0.9 * bound);
}

class ArchitectureGradient : public ::testing::TestWithParam<Arch> {};

TEST_P(ArchitectureGradient, ParametersMatchFiniteDifferences) {
  Rng rng(11);
  const auto& arch = GetParam();
  Mlp net(make_specs(arch.dims), rng);
  const auto in = static_cast<Eigen::Index>(arch.dims.front());
  const auto out = static_cast<Eigen::Index>(arch.dims.back());
  const Matrix x = random_matrix(in, 3, rng);
  const Matrix w = random_matrix(out, 3, rng);
  ForwardCache cache;
  net.forward(x, &cache);
  Matrix input_grad;
  const ParamSet g = net.backward(cache, w, &input_grad);
  const double err = testutil::check_param_grads(net, g, [&] { return weighted_output(net, x, w); }, rng);
  EXPECT_LT(err, 1e-4) << arch.name;

  // Input gradient for one column.
  const Vector num = testutil::numeric_gradient(
      [&](const Vector& v) {
        Matrix xx = x;
        xx.col(0) = v;
        return weighted_output(net, xx, w);
      },
      x.col(0));
  EXPECT_LT(rel_err(input_grad.col(0), num), 1e-4) << arch.name;
}

INSTANTIATE_TEST_SUITE_P(AllNetworks, ArchitectureGradient, ::testing::ValuesIn(kArchitectures),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Mlp, TanhOutputGradient) {
  Rng rng(12);
  Mlp net(make_specs({3, 8, 2}, true, Activation::Tanh), rng);
  const Matrix x = random_matrix(3, 2, rng);
  const Matrix w = random_matrix(2, 2, rng);
  ForwardCache cache;
  net.forward(x, &cache);
  const auto g = net.backward(cache, w);
  EXPECT_LT(testutil::check_param_grads(net, g, [&] { return weighted_output(net, x, w); }, rng), 1e-4);
}

TEST(Adam, FirstStepMovesEachParameterByLearningRate) {
  Rng rng(4);
  Mlp net(make_specs({3, 4, 1}), rng);
  const auto before = net.params();
  ParamSet g = zeros_like(before);
  zip_tensors(g, g, [&rng](auto& t, const auto&) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  });
  net.adam_step(g, 0.01);
  // m_hat / sqrt(v_hat) = g / |g| on the first step.
  for (std::size_t k = 0; k < before.size(); ++k) {
    const Matrix delta = net.params()[k].weight - before[k].weight;
    for (Eigen::Index i = 0; i < delta.size(); ++i) {
      const double gi = g[k].weight.data()[i];
      EXPECT_NEAR(delta.data()[i], -0.01 * gi / (std::abs(gi) + 1e-8), 1e-12);
    }
  }
}

TEST(Adam, MatchesHandRecurrenceOverSeveralSteps) {
  Rng rng(5);
  Mlp net(make_specs({2, 1}), rng);
  const double w0 = net.params()[0].weight(0, 0);
  const std::vector<double> grads{0.5, -0.2, 1.5, 0.1};
  double m = 0, v = 0, w = w0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    ParamSet g = zeros_like(net.params());
    g[0].weight(0, 0) = grads[t - 1];
    net.adam_step(g, lr);
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(b1, double(t))), vh = v / (1 - std::pow(b2, double(t)));
    w -= lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(net.params()[0].weight(0, 0), w, 1e-14);
  }
}

TEST(Adam, NonFiniteParameterThrows) {
  Rng rng(6);
  Mlp net(make_specs({2, 1}), rng);
  ParamSet g = zeros_like(net.params());
  g[0].bias[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(net.adam_step(g, 0.1), DivergenceError);
}

TEST(SoftUpdate, Examples) {
  Rng rng(7);
  Mlp source(make_specs({2, 3, 1}), rng), target(make_specs({2, 3, 1}), rng);
  soft_update(target, source, 1.0);
  EXPECT_EQ(target.params()[0].weight, source.params()[0].weight);

  zip_tensors(target.params(), target.params(), [](auto& t, const auto&) { t.setZero(); });
  zip_tensors(source.params(), source.params(), [](auto& t, const auto&) { t.setOnes(); });
  soft_update(target, source, 0.005);
  EXPECT_DOUBLE_EQ(target.params()[0].weight(0, 0), 0.005);
  for (int k = 1; k < 500; ++k) soft_update(target, source, 0.005);
  EXPECT_NEAR(target.params()[1].bias[0], 1.0 - std::pow(0.995, 500), 1e-12);
  EXPECT_THROW(soft_update(target, source, 0.0), ContractViolation);
}

TEST(Mlp, TensorRoundTripIsExact) {
  Rng rng(8);
  Mlp a(make_specs({3, 5, 2}), rng), b(make_specs({3, 5, 2}), rng);
  Checkpoint ckpt;
  a.export_tensors("net", ckpt.tensors);
  b.import_tensors("net", ckpt);
  const Matrix x = random_matrix(3, 4, rng);
  EXPECT_EQ(a.forward(x), b.forward(x));
}

// ---------------------------------------------------------------------------
// Squashed Gaussian.

TEST(SquashedGaussian, DensityIntegratesToOne) {
  boost::math::quadrature::tanh_sinh<double> integrator;
  for (double mu : {-1.5, 0.0, 0.7, 3.0}) {
    for (double log_std : {-1.0, 0.0, 0.8}) {
      for (double bound : {0.5, 1.0, 2.0}) {
        PolicyHead head{Vector::Constant(1, mu), Vector::Constant(1, log_std)};
        const Vector b = Vector::Constant(1, bound);
        auto density = [&](double a) {
          Vector raw(1);
          raw[0] = std::atanh(a / bound);
          return std::exp(squashed_log_prob(head, raw, b));
        };
        EXPECT_NEAR(integrator.integrate(density, -bound, bound), 1.0, 1e-7) << mu << " " << log_std << " " << bound;
      }
    }
  }
}

TEST(SquashedGaussian, LogProbMatchesNaiveFormula) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    PolicyHead head{testutil::random_vector(2, rng), testutil::random_vector(2, rng, 0.5)};
    const Vector raw = testutil::random_vector(2, rng, 1.5);
    const Vector bounds = Vector::Constant(2, 1.0 + trial % 3);
    double expected = 0.0;
    for (int k = 0; k < 2; ++k) {
      const double s = std::exp(head.log_std[k]);
      const double gauss = std::exp(-0.5 * std::pow((raw[k] - head.mean[k]) / s, 2)) / (s * std::sqrt(2 * std::numbers::pi));
      expected += std::log(gauss / (bounds[k] * (1.0 - std::pow(std::tanh(raw[k]), 2))));
    }
    EXPECT_NEAR(squashed_log_prob(head, raw, bounds), expected, 1e-10);
  }
}

TEST(SquashedGaussian, JacobianStableInSaturation) {
  for (double u : {20.0, 50.0, -300.0}) {
    const double v = log_one_minus_tanh_sq(u);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 2.0 * std::numbers::ln2 - 2.0 * std::abs(u), 1e-9);
  }
}

TEST(SquashedGaussian, ActionsStrictlyWithinBounds) {
  Rng rng(10);
  PolicyHead head{Vector::Constant(2, 0.3), Vector::Constant(2, 1.5)};
  Vector bounds(2);
  bounds << 1.0, 0.5;
  for (int i = 0; i < 10000; ++i) {
    const auto s = policy_sample(head, bounds, rng);
    EXPECT_LT(std::abs(s.action[0]), 1.0);
    EXPECT_LT(std::abs(s.action[1]), 0.5);
  }
}

TEST(SquashedGaussian, DeterministicAndDegenerateModes) {
  Rng rng(11);
  Vector bounds = Vector::Constant(2, 2.0);
  PolicyHead head{Vector(2), Vector::Constant(2, -20.0)};
  head.mean << 0.4, -1.1;
  const Vector expected = bounds.cwiseProduct(head.mean.array().tanh().matrix());
  EXPECT_LT((policy_sample(head, bounds, rng, true).action - expected).norm(), 1e-15);
  EXPECT_LT((policy_sample(head, bounds, rng).action - expected).norm(), 1e-7);
}

TEST(SquashedGaussian, SampleMomentsMatchHead) {
  Rng rng(12);
  PolicyHead head{Vector::Constant(1, 0.25), Vector::Constant(1, std::log(0.6))};
  const Vector bounds = Vector::Ones(1);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double r = policy_sample(head, bounds, rng).raw[0];
    sum += r;
    sq += r * r;
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 0.25, 5 * 0.6 / std::sqrt(double(n)));
  EXPECT_NEAR(sd, 0.6, 0.01);
}

TEST(SquashedGaussian, HeadClampsLogStd) {
  Vector out(4);
  out << 0.1, 0.2, -30.0, 5.0;
  const auto head = make_head(out);
  EXPECT_EQ(head.log_std[0], -20.0);
  EXPECT_EQ(head.log_std[1], 2.0);
}

TEST(SquashedGaussian, OutputGradientMatchesFiniteDifferences) {
  Rng rng(13);
  const Vector bounds = Vector::Ones(2);
  for (int trial = 0; trial < 20; ++trial) {
    Vector out = testutil::random_vector(4, rng, 0.8);
    const Vector raw = testutil::random_vector(2, rng, 1.2);
    auto f = [&](const Vector& o) { return squashed_log_prob(make_head(o), raw, bounds); };
    EXPECT_LT(rel_err(log_prob_output_grad(out, raw), testutil::numeric_gradient(f, out)), 1e-6);
  }
  // A clamped log_std does not move the density.
  Vector out(4);
  out << 0.1, 0.2, 3.0, 0.0;
  const Vector raw = Vector::Constant(2, 0.3);
  EXPECT_EQ(log_prob_output_grad(out, raw)[2], 0.0);
}
