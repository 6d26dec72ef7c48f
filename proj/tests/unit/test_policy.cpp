#include <doctest.h>

#include <array>

#include "otpr/error.hpp"
#include "otpr/ot.hpp"
#include "otpr/policy.hpp"

using namespace otpr;
using namespace otpr::policy;

namespace {

struct Fixture {
  diffusion::ScoreModel model = diffusion::make_score_model(2, 2, {16, 16}, 3);
  OtprPolicy policy;
  Fixture() {
    policy.score = &model;
    policy.sampler.steps = 5;
    policy.guidance = Guidance::kQ;
    policy.q_override = [](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
      return Eigen::VectorXd(a.row(0).transpose() + 0.0 * s.row(0).transpose());
    };
  }
};

potentials::QFn table_q(const Eigen::MatrixXd& table) {
  return [table](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
    Eigen::VectorXd out(s.cols());
    for (Eigen::Index k = 0; k < s.cols(); ++k) {
      Eigen::Index i = 0;
      Eigen::Index j = 0;
      s.col(k).maxCoeff(&i);
      a.col(k).maxCoeff(&j);
      out[k] = table(i, j);
    }
    return out;
  };
}

}  // namespace

TEST_CASE("resample normalizes scores") {
  Rng rng(1);
  Eigen::VectorXd s(3);
  s << 2, 1, 1;
  auto r = resample(s, rng);
  CHECK(r.probabilities[0] == doctest::Approx(0.5));
  CHECK(r.probabilities[1] == doctest::Approx(0.25));
  CHECK(r.probabilities[2] == doctest::Approx(0.25));

  r = resample(Eigen::VectorXd::Zero(3), rng);
  for (int i = 0; i < 3; ++i) CHECK(r.probabilities[i] == doctest::Approx(1.0 / 3));

  Eigen::VectorXd one_hot = Eigen::VectorXd::Zero(4);
  one_hot[2] = 5.0;
  for (int k = 0; k < 100; ++k) CHECK(resample(one_hot, rng).index == 2);

  Eigen::VectorXd bad(2);
  bad << 1, -0.5;
  CHECK_THROWS_AS(resample(bad, rng), PreconditionError);
  CHECK_THROWS_AS(resample(Eigen::VectorXd(0), rng), PreconditionError);
  bad << 1, std::nan("");
  CHECK_THROWS_AS(resample(bad, rng), PreconditionError);
}

TEST_CASE("resample frequencies and scale invariance") {
  Eigen::VectorXd s(4);
  s << 0.1, 0.5, 0.0, 1.4;
  Rng rng(7);
  std::array<int, 4> counts{};
  const int draws = 100000;
  for (int k = 0; k < draws; ++k) ++counts[static_cast<std::size_t>(resample(s, rng).index)];
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(counts[static_cast<std::size_t>(i)] / double(draws) - s[i] / s.sum()) < 0.01);
  CHECK(counts[2] == 0);

  for (double c : {1e-6, 0.3, 7.0, 1e8}) {
    Rng a(99);
    Rng b(99);
    for (int k = 0; k < 200; ++k) CHECK(resample(s, a).index == resample(c * s, b).index);
  }
}

TEST_CASE("proposals are deterministic and per-index") {
  Fixture f;
  Eigen::VectorXd state(2);
  state << 0.3, -0.2;
  const Eigen::MatrixXd p1 = propose_actions(f.policy, state, 6, 42);
  const Eigen::MatrixXd p2 = propose_actions(f.policy, state, 6, 42);
  CHECK(p1 == p2);
  CHECK(p1.cols() == 6);
  CHECK((p1.col(0) - p1.col(1)).norm() > 0.0);
  const Eigen::VectorXd single = diffusion::sample_reverse(
      diffusion::model_score_fn(f.model), state, f.policy.schedule, f.policy.sampler,
      derive_seed(42, 0), 2);
  CHECK(propose_actions(f.policy, state, 1, 42).col(0) == single);
  // Batched and single-column products may round differently.
  CHECK((p1.col(0) - single).norm() < 1e-9 * (1.0 + single.norm()));
  CHECK_THROWS_AS(propose_actions(f.policy, state, 0, 42), PreconditionError);
}

TEST_CASE("eval mode takes the single raw sample") {
  Fixture f;
  f.policy.mode = Mode::kEval;
  Eigen::VectorXd state(2);
  state << -0.5, 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    CHECK(act(f.policy, state, seed) == propose_actions(f.policy, state, 1, seed).col(0));
}

TEST_CASE("train mode with a peaked score picks the best proposal") {
  Fixture f;
  f.policy.softmax_temperature = 1e-6;
  Eigen::VectorXd state(2);
  state << 0.1, 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ActResult r = act_detailed(f.policy, state, seed);
    Eigen::Index best = 0;
    r.proposals.row(0).maxCoeff(&best);
    CHECK(r.index == best);
    CHECK(r.action == r.proposals.col(best));
  }
}

TEST_CASE("batched acting equals per-state acting") {
  Fixture f;
  f.policy.num_proposals = 4;
  Rng rng(5);
  const Eigen::MatrixXd states = std_normal_matrix(2, 5, rng);
  const std::vector<std::uint64_t> seeds{3, 1, 4, 1, 5};
  const Eigen::MatrixXd batch = act_batch(f.policy, states, seeds);
  for (Eigen::Index j = 0; j < 5; ++j)
    CHECK((batch.col(j) - act(f.policy, states.col(j), seeds[static_cast<std::size_t>(j)])).norm() <
          1e-9 * (1.0 + batch.col(j).norm()));
  CHECK_THROWS_AS(act_batch(f.policy, states, std::vector<std::uint64_t>{1, 2}), ShapeError);
}

TEST_CASE("Q and A guidance") {
  Fixture f;
  Eigen::VectorXd state(2);
  state << 0.0, 0.0;
  f.policy.q_override = [](const Eigen::MatrixXd& s, const Eigen::MatrixXd&) {
    return Eigen::VectorXd::Constant(s.cols(), 3.0);
  };
  const Eigen::VectorXd flat = guidance_scores(f.policy, state, Eigen::MatrixXd::Random(2, 5));
  for (int i = 0; i < 5; ++i) CHECK(flat[i] == doctest::Approx(0.2));

  // A guidance differs from Q guidance by a per-state shift only.
  rl::CriticConfig cc;
  cc.hidden = {8};
  const rl::CriticPair critic = rl::make_critic(2, 2, cc, 1);
  f.policy.critic = &critic;
  f.policy.q_override = {};
  const Eigen::MatrixXd actions = Eigen::MatrixXd::Random(2, 6);
  f.policy.guidance = Guidance::kQ;
  const Eigen::VectorXd q_scores = guidance_scores(f.policy, state, actions);
  f.policy.guidance = Guidance::kA;
  const Eigen::VectorXd a_scores = guidance_scores(f.policy, state, actions);
  CHECK((q_scores - a_scores).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(q_scores.sum() == doctest::Approx(1.0));

  CHECK(guidance_from_string("A") == Guidance::kA);
  CHECK_THROWS_AS(guidance_from_string("X"), ConfigError);
}

TEST_CASE("H guidance with all slacks negative scores zero") {
  Fixture f;
  ot::CostSpec spec;
  spec.mode = ot::CostMode::kNegQ;
  spec.normalization = ot::Normalization::kNone;
  potentials::DualPair dual = potentials::make_dual(2, 2, 0.1, spec, {}, 0);
  dual.u_net.values().setZero();
  dual.v_net.values().setZero();
  dual.u_net.bias(0)[0] = -10.0;
  f.policy.dual = &dual;
  f.policy.guidance = Guidance::kH;
  f.policy.q_override = [](const Eigen::MatrixXd& s, const Eigen::MatrixXd&) {
    return Eigen::VectorXd::Zero(s.cols());
  };
  Eigen::VectorXd state = Eigen::VectorXd::Zero(2);
  const Eigen::VectorXd h = guidance_scores(f.policy, state, Eigen::MatrixXd::Random(2, 4));
  CHECK(h.cwiseAbs().maxCoeff() == 0.0);
  // The degenerate case still acts, uniformly over proposals.
  const ActResult r = act_detailed(f.policy, state, 3);
  for (int i = 0; i < 8; ++i) CHECK(r.probabilities[i] == doctest::Approx(0.125));

  f.policy.dual = nullptr;
  CHECK_THROWS_AS(act(f.policy, state, 0), PreconditionError);
}

TEST_CASE("H guidance follows the exact conditional plan on a discrete instance") {
  const int n = 4;
  Rng rng(13);
  Eigen::MatrixXd q(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) q(i, j) = uniform01(rng);
  const double lambda = 0.5;
  ot::CostSpec spec;
  spec.normalization = ot::Normalization::kNone;
  potentials::DualPair dual = potentials::make_dual(n, n, lambda, spec, {}, 1);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
  potentials::DualTrainConfig cfg;
  cfg.iterations = 6000;
  cfg.lr = 2e-2;
  cfg.lr_final = 1e-4;
  potentials::train_potentials(
      dual,
      [&](std::size_t, Rng&) {
        potentials::DualBatch b;
        b.states = eye;
        b.actions = eye;
        return b;
      },
      table_q(q), cfg);
  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / n);
  const auto oracle = ot::exact_plan_oracle(-q, uniform, uniform, lambda);
  REQUIRE(oracle.converged);

  Fixture f;
  OtprPolicy policy = f.policy;
  policy.guidance = Guidance::kH;
  policy.dual = &dual;
  policy.q_override = table_q(q);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd h = guidance_scores(policy, eye.col(i), eye);
    const Eigen::VectorXd cond = oracle.plan.gamma.row(i).transpose() / oracle.plan.gamma.row(i).sum();
    CHECK((h / h.sum() - cond).cwiseAbs().maxCoeff() < 0.1 * cond.maxCoeff());

    // Resampling over the n discrete actions reproduces the conditional plan.
    Rng r(static_cast<std::uint64_t>(i));
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(n);
    const int draws = 20000;
    for (int k = 0; k < draws; ++k) freq[resample(h, r).index] += 1.0 / draws;
    CHECK(0.5 * (freq - cond).cwiseAbs().sum() < 0.1);
  }
}

TEST_CASE("policy validation") {
  Fixture f;
  f.policy.num_proposals = 0;
  CHECK_THROWS_AS(f.policy.validate(), ConfigError);
  f.policy.num_proposals = 2;
  f.policy.softmax_temperature = 0.0;
  CHECK_THROWS_AS(f.policy.validate(), ConfigError);
  OtprPolicy empty;
  CHECK_THROWS_AS(empty.validate(), PreconditionError);
}
