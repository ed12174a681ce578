#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "ugp/errors.hpp"
#include "ugp/losses.hpp"

using namespace ugp;
using ugp::testing::brute_force_returns;
using ugp::testing::enumerated_fisher;
using ugp::testing::random_tensor;
using ugp::testing::frozen_surrogate;
using ugp::testing::random_anchor;

namespace {

Rollout make_rollout(std::vector<double> rewards, double bootstrap, double gamma, bool terminal = false) {
  Rollout r;
  r.task = "a";
  r.gamma = gamma;
  r.bootstrap_value = bootstrap;
  r.terminal = terminal;
  for (double x : rewards) r.steps.push_back({Tensor({1}), 0, x});
  return r;
}

std::vector<double> targets(const std::vector<TrainingPoint>& pts) {
  std::vector<double> out;
  for (const auto& p : pts) out.push_back(p.return_target);
  return out;
}

NetworkParams small_net(std::uint64_t seed, std::map<TaskId, std::size_t> tasks = {{"a", 3}, {"b", 2}}) {
  return build_network(std::vector<LayerSpec>{LayerSpec::dense(6), LayerSpec::relu()}, {4, 3}, tasks, seed);
}

std::vector<TrainingPoint> random_points(const TaskId& task, std::size_t n, std::size_t actions, CounterRng& rng) {
  std::vector<TrainingPoint> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({task, random_tensor({4, 3}, rng), rng.below(actions), rng.uniform(-2.0, 3.0)});
  }
  return out;
}

}  // namespace

TEST(Returns, WorkedExamples) {
  auto r = targets(compute_returns(make_rollout({1, 0, 2}, 0.0, 0.99, true)));
  EXPECT_NEAR(r[0], 2.9602, 1e-12);
  EXPECT_NEAR(r[1], 1.98, 1e-12);
  EXPECT_NEAR(r[2], 2.0, 1e-12);
  r = targets(compute_returns(make_rollout({0, 0}, 10.0, 0.5)));
  EXPECT_NEAR(r[0], 2.5, 1e-12);
  EXPECT_NEAR(r[1], 5.0, 1e-12);
  r = targets(compute_returns(make_rollout({5}, 0.0, 0.99, true)));
  EXPECT_EQ(r[0], 5.0);
}

TEST(Returns, MatchBruteForceOnRandomRollouts) {
  CounterRng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<double> rewards(n);
    for (double& x : rewards) x = rng.uniform(-5.0, 5.0);
    const bool terminal = rng.chance(0.3);
    const double bootstrap = terminal ? 0.0 : rng.uniform(-10.0, 10.0);
    const double gamma = rng.uniform(0.0, 0.999);
    const auto got = targets(compute_returns(make_rollout(rewards, bootstrap, gamma, terminal)));
    const auto want = brute_force_returns(rewards, bootstrap, gamma);
    for (std::size_t t = 0; t < n; ++t) ASSERT_NEAR(got[t], want[t], 1e-12) << "rollout " << i << " step " << t;
  }
}

TEST(Returns, PreconditionsAreEnforced) {
  EXPECT_THROW(compute_returns(make_rollout({}, 0.0, 0.99)), ContractViolation);
  EXPECT_THROW(compute_returns(make_rollout({1}, 0.0, 1.0)), ContractViolation);
  EXPECT_THROW(compute_returns(make_rollout({1}, 2.0, 0.9, true)), ContractViolation);
}

TEST(ActorLoss, WorkedExamples) {
  const LogitLoss uniform = actor_loss(std::vector<double>{0, 0, 0, 0}, 2, 1.0);
  EXPECT_NEAR(uniform.value, std::log(4.0), 1e-12);
  const LogitLoss flat = actor_loss(std::vector<double>{0.3, -1.0}, 1, 0.0);
  EXPECT_EQ(flat.value, 0.0);
  for (double g : flat.dlogits) EXPECT_EQ(g, 0.0);
  const LogitLoss two = actor_loss(std::vector<double>{2.0, 0.0}, 0, 1.5);
  EXPECT_NEAR(two.value, 1.5 * std::log(1.0 + std::exp(-2.0)), 1e-12);
  EXPECT_THROW(actor_loss(std::vector<double>{0, 0}, 2, 1.0), IndexError);
}

TEST(CriticLoss, SquaredResidual) {
  EXPECT_EQ(critic_loss(1.0, 3.0).value, 4.0);
  EXPECT_EQ(critic_loss(1.0, 3.0).dvalue, -4.0);
  EXPECT_EQ(critic_loss(2.0, 2.0).value, 0.0);
}

TEST(Entropy, WorkedExamples) {
  EXPECT_NEAR(entropy_bonus(std::vector<double>{0, 0, 0}).value, std::log(3.0), 1e-12);
  EXPECT_NEAR(entropy_bonus(std::vector<double>{50, 0, 0}).value, 0.0, 1e-6);
  const double z = 2 * std::exp(1.0) + 1.0;
  const double p = std::exp(1.0) / z, q = 1.0 / z;
  EXPECT_NEAR(entropy_bonus(std::vector<double>{1, 1, 0}).value, -(2 * p * std::log(p) + q * std::log(q)), 1e-12);
}

TEST(Entropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(4);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> z(4);
    for (double& v : z) v = rng.uniform(-3, 3);
    const auto g = entropy_bonus(z).dlogits;
    for (std::size_t j = 0; j < z.size(); ++j) {
      auto zp = z, zm = z;
      zp[j] += 1e-6;
      zm[j] -= 1e-6;
      EXPECT_NEAR(g[j], (entropy_bonus(zp).value - entropy_bonus(zm).value) / 2e-6, 1e-8);
    }
  }
}

TEST(EnvironmentLoss, EmptyAndMixedBatchesAreRejected) {
  const NetworkParams p = small_net(1);
  EXPECT_THROW(environment_loss({}, p), ContractViolation);
  CounterRng rng(1);
  auto pts = random_points("a", 2, 2, rng);
  pts[1].task = "b";
  EXPECT_THROW(environment_loss(pts, p), ContractViolation);
}

TEST(EnvironmentLoss, SinglePointEqualsDirectFormula) {
  const NetworkParams p = small_net(2);
  CounterRng rng(2);
  const auto pts = random_points("a", 1, 3, rng);
  const ForwardResult fr = forward(p, "a", pts[0].state);
  const double adv = pts[0].return_target - fr.value;
  const double expect = actor_loss(fr.logits, pts[0].action, adv).value +
                        0.5 * critic_loss(fr.value, pts[0].return_target).value -
                        0.01 * entropy_bonus(fr.logits).value;
  EXPECT_NEAR(environment_loss(pts, p).loss, expect, 1e-12);
}

TEST(EnvironmentLoss, IsTheMeanOfPerPointLosses) {
  const NetworkParams p = small_net(3);
  CounterRng rng(3);
  const auto pts = random_points("a", 2, 3, rng);
  const double l0 = environment_loss(std::span(pts).subspan(0, 1), p).loss;
  const double l1 = environment_loss(std::span(pts).subspan(1, 1), p).loss;
  EXPECT_NEAR(environment_loss(pts, p).loss, 0.5 * (l0 + l1), 1e-12);
}

TEST(MultiEnvLoss, SumsTasksAndEqualsSingleTaskLossForOneTask) {
  const NetworkParams p = small_net(4);
  CounterRng rng(4);
  std::map<TaskId, std::vector<TrainingPoint>> batches;
  batches["a"] = random_points("a", 3, 3, rng);
  const LossResult one = multi_env_loss(batches, p, {});
  EXPECT_EQ(one.loss, environment_loss(batches["a"], p).loss);
  batches["b"] = random_points("b", 2, 2, rng);
  const LossResult two = multi_env_loss(batches, p, {});
  EXPECT_NEAR(two.loss, environment_loss(batches["a"], p).loss + environment_loss(batches["b"], p).loss, 1e-12);
}

TEST(MultiEnvLoss, ZeroLambdaAnchorChangesNothing) {
  const NetworkParams p = small_net(5);
  CounterRng rng(5);
  std::map<TaskId, std::vector<TrainingPoint>> batches{{"a", random_points("a", 4, 3, rng)}};
  const std::vector<EwcAnchor> anchors = {random_anchor(p, 0.0, rng)};
  const LossResult with = multi_env_loss(batches, p, anchors);
  const LossResult without = multi_env_loss(batches, p, {});
  EXPECT_EQ(with.loss, without.loss);
  for (const auto& [name, g] : without.grads) EXPECT_EQ(*with.grads.find(name), g) << name;
  EXPECT_EQ(with.grads.size(), without.grads.size());
}

TEST(MultiEnvLoss, CombinedGradientMatchesFiniteDifferences) {
  const NetworkParams p = small_net(6);
  CounterRng rng(6);
  std::map<TaskId, std::vector<TrainingPoint>> batches{{"a", random_points("a", 4, 3, rng)},
                                                        {"b", random_points("b", 3, 2, rng)}};
  const std::vector<EwcAnchor> anchors = {random_anchor(p, 0.7, rng)};
  const LossWeights w;
  EXPECT_NEAR(multi_env_loss(batches, p, anchors, w).loss, frozen_surrogate(p, p, batches, anchors, w), 1e-12);
  const ObjectiveFn objective = [&](const NetworkParams& probe) {
    return ObjectiveValue{frozen_surrogate(probe, p, batches, anchors, w),
                          multi_env_loss(batches, p, anchors, w).grads};
  };
  EXPECT_LT(max_relative_gradient_error(p, objective), 1e-4);
}

TEST(Ewc, ZeroWhenAtAnchorOrLambdaZero) {
  const NetworkParams p = small_net(7);
  CounterRng rng(7);
  EwcAnchor a = random_anchor(p, 3.0, rng);
  EXPECT_GT(ewc_penalty(p, a).loss, 0.0);
  for (auto& [name, star] : a.theta_star) star = *p.find(name);
  EXPECT_EQ(ewc_penalty(p, a).loss, 0.0);
  EXPECT_TRUE(ewc_penalty(p, a).grads.all_zero());
  EwcAnchor b = random_anchor(p, 0.0, rng);
  EXPECT_EQ(ewc_penalty(p, b).loss, 0.0);
  EXPECT_TRUE(ewc_penalty(p, b).grads.all_zero());
}

TEST(Ewc, WorkedExample) {
  // lambda = 50, F = [1, 2], theta - theta* = [0.1, -0.2]:
  // penalty 50 * (0.01 + 2 * 0.04) = 4.5, gradient 2 * 50 * F * delta = [10, -40].
  NetworkParams p = build_network(std::vector<LayerSpec>{LayerSpec::dense(2)}, {1}, {{"a", 2}}, 0);
  *p.find("trunk/0/bias") = Tensor::vector({0.6, 0.3});
  EwcAnchor a;
  a.lambda = 50.0;
  a.theta_star.emplace("trunk/0/bias", Tensor::vector({0.5, 0.5}));
  a.fisher.emplace("trunk/0/bias", Tensor::vector({1.0, 2.0}));
  const LossResult r = ewc_penalty(p, a);
  EXPECT_NEAR(r.loss, 4.5, 1e-12);
  const Tensor& g = *r.grads.find("trunk/0/bias");
  EXPECT_NEAR(g[0], 10.0, 1e-12);
  EXPECT_NEAR(g[1], -40.0, 1e-12);
}

TEST(Ewc, GradientIsExactlyTwoLambdaFDelta) {
  CounterRng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const NetworkParams p = small_net(100 + trial);
    const EwcAnchor a = random_anchor(p, rng.uniform(0.0, 100.0), rng);
    const LossResult r = ewc_penalty(p, a);
    for (const auto& [name, star] : a.theta_star) {
      const Tensor& g = *r.grads.find(name);
      const Tensor& theta = *p.find(name);
      const Tensor& f = a.fisher.at(name);
      for (std::size_t j = 0; j < g.size(); ++j) {
        ASSERT_NEAR(g[j], 2.0 * a.lambda * f[j] * (theta[j] - star[j]), 1e-12);
      }
    }
    EXPECT_GE(r.loss, 0.0);
  }
}

TEST(Ewc, AnchorValidationAndScopeErrors) {
  const NetworkParams p = small_net(9);
  CounterRng rng(9);
  EwcAnchor a = random_anchor(p, 1.0, rng);
  EXPECT_NO_THROW(a.validate());
  a.fisher.begin()->second[0] = -1.0;
  EXPECT_THROW(a.validate(), ContractViolation);
  EwcAnchor b = random_anchor(p, 1.0, rng);
  b.theta_star.emplace("trunk/9/weight", Tensor({1}));
  b.fisher.emplace("trunk/9/weight", Tensor({1}));
  EXPECT_THROW(ewc_penalty(p, b), LookupError);
}

TEST(Ewc, AnchorsSurviveArchiveRoundTrip) {
  const NetworkParams p = small_net(10);
  CounterRng rng(10);
  const std::vector<EwcAnchor> anchors = {random_anchor(p, 50.0, rng), random_anchor(p, 0.0, rng)};
  TensorArchive archive;
  export_anchors(anchors, archive);
  const auto back = import_anchors(archive);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].lambda, anchors[i].lambda);
    EXPECT_EQ(back[i].theta_star, anchors[i].theta_star);
    EXPECT_EQ(back[i].fisher, anchors[i].fisher);
  }
}

TEST(Fisher, ExactMatchesEnumerationOracle) {
  const NetworkParams p = build_network(std::vector<LayerSpec>{LayerSpec::dense(4), LayerSpec::relu()}, {4, 3},
                                        {{"t", 2}}, 12);
  CounterRng rng(12);
  std::vector<Tensor> states;
  for (int i = 0; i < 6; ++i) states.push_back(random_tensor({4, 3}, rng));
  const auto exact = estimate_fisher(p, "t", states, FisherMode::exact);
  const auto oracle = enumerated_fisher(p, "t", states);
  for (const auto& [name, f] : oracle) {
    const Tensor& got = exact.at(name);
    for (std::size_t j = 0; j < f.size(); ++j) ASSERT_NEAR(got[j], f[j], 1e-6) << name << "[" << j << "]";
  }
  // The value head does not enter log pi.
  EXPECT_EQ(exact.at("head/t/value/weight").squared_norm(), 0.0);
}

TEST(Fisher, SampledConvergesToExact) {
  const NetworkParams p = build_network(std::vector<LayerSpec>{LayerSpec::dense(4), LayerSpec::relu()}, {4, 3},
                                        {{"t", 2}}, 13);
  CounterRng rng(13);
  std::vector<Tensor> pool;
  for (int i = 0; i < 8; ++i) pool.push_back(random_tensor({4, 3}, rng));
  std::vector<Tensor> draws;
  for (int i = 0; i < 10000; ++i) draws.push_back(pool[static_cast<std::size_t>(i) % pool.size()]);
  const auto exact = estimate_fisher(p, "t", pool, FisherMode::exact);
  const auto sampled = estimate_fisher(p, "t", draws, FisherMode::sampled, 99);
  for (const auto& [name, f] : exact) {
    const Tensor& s = sampled.at(name);
    for (std::size_t j = 0; j < f.size(); ++j) {
      ASSERT_LE(std::abs(s[j] - f[j]), 0.1 * std::abs(f[j])) << name << "[" << j << "]";
    }
  }
}

TEST(Fisher, NearDeterministicPolicyHasNearZeroPolicyHeadFisher) {
  NetworkParams p = build_network(std::vector<LayerSpec>{LayerSpec::dense(4), LayerSpec::relu()}, {4, 3},
                                  {{"t", 2}}, 14);
  *p.find("head/t/policy/bias") = Tensor::vector({40.0, -40.0});
  CounterRng rng(14);
  std::vector<Tensor> states{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  const auto f = estimate_fisher(p, "t", states, FisherMode::exact);
  EXPECT_LT(f.at("head/t/policy/bias").squared_norm(), 1e-30);
  EXPECT_LT(f.at("trunk/0/weight").squared_norm(), 1e-30);
}

TEST(Fisher, IsDeterministicAndNonnegative) {
  const NetworkParams p = small_net(15);
  CounterRng rng(15);
  std::vector<Tensor> states;
  for (int i = 0; i < 20; ++i) states.push_back(random_tensor({4, 3}, rng));
  const auto a = estimate_fisher(p, "a", states, FisherMode::sampled, 3);
  const auto b = estimate_fisher(p, "a", states, FisherMode::sampled, 3);
  EXPECT_EQ(a, b);
  for (const auto& [name, t] : a) {
    for (double v : t.values()) EXPECT_GE(v, 0.0);
    EXPECT_NE(NetworkParams::task_of(name), "b");
  }
  EXPECT_THROW(estimate_fisher(p, "a", {}, FisherMode::exact), ContractViolation);
}
