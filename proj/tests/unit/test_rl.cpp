#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "otpr/error.hpp"
#include "otpr/rl.hpp"

using namespace otpr;
using namespace otpr::rl;

namespace {

Transition make(double x, bool expert = false, double r = 0.0) {
  Transition t;
  t.s = Eigen::VectorXd::Constant(2, x);
  t.a = Eigen::VectorXd::Constant(1, -x);
  t.r = r;
  t.s_next = Eigen::VectorXd::Constant(2, x + 1);
  t.expert = expert;
  return t;
}

Eigen::VectorXd one_hot(int n, int i) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
  v[i] = 1.0;
  return v;
}

// Two states, one action each: A -(r=1)-> B, B -(r=2)-> B.
ReplayBuffer chain_buffer() {
  ReplayBuffer buf(100);
  for (int rep = 0; rep < 4; ++rep) {
    buf.push({one_hot(2, 0), Eigen::VectorXd::Zero(1), 1.0, one_hot(2, 1), false, false});
    buf.push({one_hot(2, 1), Eigen::VectorXd::Zero(1), 2.0, one_hot(2, 1), false, false});
  }
  return buf;
}

double chain_bellman_residual(const CriticPair& c) {
  const Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::MatrixXd a = Eigen::MatrixXd::Zero(1, 2);
  const Eigen::VectorXd q = q_values(c.q, s, a);
  return std::max(std::abs(q[0] - (1.0 + c.discount * q[1])),
                  std::abs(q[1] - (2.0 + c.discount * q[1])));
}

}  // namespace

TEST_CASE("expectile loss and discounted return") {
  CHECK(expectile_loss(1.0, 0.7) == doctest::Approx(0.7));
  CHECK(expectile_loss(-1.0, 0.7) == doctest::Approx(0.3));
  CHECK(expectile_loss(0.0, 0.7) == 0.0);
  const std::vector<double> r{1, 1, 1};
  CHECK(discounted_return(r, 0.5) == doctest::Approx(1.75));
  CHECK(discounted_return(std::vector<double>{}, 0.5) == 0.0);
  CHECK(discounted_return(std::vector<double>{3.5}, 0.9) == 3.5);
}

TEST_CASE("buffer: FIFO eviction at capacity") {
  ReplayBuffer buf(3, false);
  for (int i = 0; i < 5; ++i) buf.push(make(i));
  CHECK(buf.size() == 3);
  CHECK(buf.at(0).s[0] == 2.0);
  CHECK(buf.at(2).s[0] == 4.0);
  CHECK_THROWS_AS(buf.at(3), RangeError);
}

TEST_CASE("buffer: pinned experts outlive ordinary transitions") {
  ReplayBuffer buf(4, true);
  buf.push(make(100, true));
  buf.push(make(101, true));
  for (int i = 0; i < 10; ++i) buf.push(make(i));
  CHECK(buf.size() == 4);
  CHECK(buf.expert_count() == 2);
  CHECK(buf.at(0).s[0] == 100.0);
  CHECK(buf.keypoint_id(1) == std::optional<std::size_t>(1));
  CHECK_FALSE(buf.keypoint_id(2).has_value());
  const ot::KeypointSet kp = buf.keypoints();
  REQUIRE(kp.size() == 2);
  CHECK(kp.actions[1][0] == -101.0);

  ReplayBuffer unpinned(4, false);
  unpinned.push(make(100, true));
  for (int i = 0; i < 10; ++i) unpinned.push(make(i));
  CHECK(unpinned.expert_count() == 0);
}

TEST_CASE("buffer: validation") {
  CHECK_THROWS_AS(ReplayBuffer(0), ConfigError);
  ReplayBuffer buf(10);
  buf.push(make(0));
  Transition bad = make(1);
  bad.a = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(buf.push(bad), ShapeError);
  Transition nan = make(1);
  nan.r = std::nan("");
  CHECK_THROWS_AS(buf.push(nan), NumericalError);
  CHECK_THROWS_AS(buf.sample(2, std::uint64_t{1}), PreconditionError);
}

TEST_CASE("buffer: deterministic, duplicate-free, uniform sampling") {
  ReplayBuffer buf(1000);
  for (int i = 0; i < 100; ++i) buf.push(make(i));
  const Batch a = buf.sample(16, std::uint64_t{42});
  const Batch b = buf.sample(16, std::uint64_t{42});
  CHECK(a.s == b.s);

  Rng rng(9);
  std::vector<int> counts(100, 0);
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    auto idx = buf.sample_indices(50, rng);
    std::sort(idx.begin(), idx.end());
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
    for (std::size_t i : idx) ++counts[i];
  }
  const double expected = draws * 50 / 100.0;
  double worst = 0.0;
  for (int c : counts) worst = std::max(worst, std::abs(c - expected) / expected);
  CHECK(worst < 0.05);

  // The whole buffer can be drawn as one batch.
  auto all = buf.sample_indices(100, rng);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(all[i] == i);
}

TEST_CASE("buffer snapshot round trip") {
  const auto path = std::filesystem::temp_directory_path() / "otpr_test_buf.bin";
  ReplayBuffer buf(50, true);
  buf.push(make(7, true, 1.5));
  for (int i = 0; i < 5; ++i) buf.push(make(i, false, -i));
  buf.save(path);
  const ReplayBuffer back = ReplayBuffer::load(path);
  REQUIRE(back.size() == buf.size());
  CHECK(back.capacity() == 50);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    CHECK(back.at(i).s == buf.at(i).s);
    CHECK(back.at(i).a == buf.at(i).a);
    CHECK(back.at(i).r == buf.at(i).r);
    CHECK(back.at(i).expert == buf.at(i).expert);
    CHECK(back.keypoint_id(i) == buf.keypoint_id(i));
  }
  std::filesystem::remove(path);
}

TEST_CASE("critic loss gradients pass finite differences") {
  CriticConfig cfg;
  cfg.hidden = {8, 8};
  CriticPair c = make_critic(2, 1, cfg, 3);
  ReplayBuffer buf(10);
  for (int i = 0; i < 3; ++i) buf.push(make(0.3 * i - 0.2, false, 0.5 * i));
  const Batch batch = buf.sample(3, std::uint64_t{1});
  const Eigen::VectorXd target = q_values(c.target_q, batch.s, batch.a).array() + 0.4;
  const Eigen::VectorXd next_v = v_values(c.v, batch.s_next);

  const auto v_rep = nn::finite_diff_check(
      [&](const nn::ParamSet& p) { return value_loss(p, batch.s, target, 0.7); }, c.v, 1e-3);
  CHECK(v_rep.pass);
  const auto q_rep = nn::finite_diff_check(
      [&](const nn::ParamSet& p) { return q_loss(p, batch, next_v, 0.99); }, c.q, 1e-3);
  CHECK(q_rep.pass);
}

TEST_CASE("critic update applies exact Polyak averaging") {
  CriticConfig cfg;
  cfg.hidden = {4};
  cfg.batch_size = 4;
  CriticPair c = make_critic(2, 1, cfg, 1);
  ReplayBuffer buf(10);
  for (int i = 0; i < 6; ++i) buf.push(make(i * 0.1, false, 1.0));
  const nn::ParamSet target_before = c.target_q;
  critic_update(c, buf.sample(4, std::uint64_t{0}), cfg);
  const Eigen::VectorXd expected = 0.995 * target_before.values() + 0.005 * c.q.values();
  CHECK(c.target_q.values() == expected);
}

TEST_CASE("critic: deterministic chain converges to the value-iteration fixed point") {
  CriticConfig cfg;
  cfg.hidden = {};
  cfg.discount = 0.5;
  cfg.lr = 1e-2;
  cfg.polyak = 0.05;
  cfg.batch_size = 8;
  CriticPair c = make_critic(2, 1, cfg, 4);
  const ReplayBuffer buf = chain_buffer();
  Rng rng(0);

  // Value iteration oracle: Q(B) = 2 / (1 - k), Q(A) = 1 + k Q(B).
  const double qb = 2.0 / (1.0 - 0.5);
  const double qa = 1.0 + 0.5 * qb;

  std::vector<double> residuals;
  for (int epoch = 0; epoch < 10; ++epoch) {
    train_critic(c, buf, cfg, 50, rng);
    residuals.push_back(chain_bellman_residual(c));
  }
  for (std::size_t k = 1; k < residuals.size(); ++k) CHECK(residuals[k] < residuals[k - 1]);

  train_critic(c, buf, cfg, 6000, rng);
  const Eigen::VectorXd q =
      q_values(c.q, Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(1, 2));
  CHECK(std::abs(q[0] - qa) < 1e-2);
  CHECK(std::abs(q[1] - qb) < 1e-2);
}

TEST_CASE("critic: zero rewards shrink Q toward zero") {
  CriticConfig cfg;
  cfg.hidden = {16};
  cfg.discount = 0.9;
  cfg.lr = 3e-3;
  cfg.batch_size = 16;
  CriticPair c = make_critic(2, 1, cfg, 8);
  ReplayBuffer buf(100);
  Rng data(3);
  for (int i = 0; i < 32; ++i) {
    Transition t;
    t.s = Eigen::Vector2d(uniform01(data), uniform01(data));
    t.a = Eigen::VectorXd::Constant(1, uniform01(data));
    t.s_next = Eigen::Vector2d(uniform01(data), uniform01(data));
    buf.push(t);
  }
  Eigen::MatrixXd probe_s(2, 32);
  Eigen::MatrixXd probe_a(1, 32);
  for (std::size_t i = 0; i < 32; ++i) {
    probe_s.col(static_cast<Eigen::Index>(i)) = buf.at(i).s;
    probe_a.col(static_cast<Eigen::Index>(i)) = buf.at(i).a;
  }
  // Start from a clearly non-zero field.
  c.q.bias(c.q.num_layers() - 1)[0] = 2.0;
  c.target_q = c.q;
  Rng rng(1);
  const double initial = q_values(c.q, probe_s, probe_a).cwiseAbs().maxCoeff();
  double prev = initial;
  for (int epoch = 0; epoch < 5; ++epoch) {
    train_critic(c, buf, cfg, 400, rng);
    const double now = q_values(c.q, probe_s, probe_a).cwiseAbs().maxCoeff();
    CHECK(now < prev);
    prev = now;
  }
  CHECK(prev < 0.5 * initial);
}

TEST_CASE("critic: single-state bandit regression") {
  CriticConfig cfg;
  cfg.hidden = {32, 32};
  cfg.lr = 3e-3;
  cfg.batch_size = 64;
  CriticPair c = make_critic(1, 1, cfg, 2);
  auto reward = [](double a) { return std::exp(-(a - 0.3) * (a - 0.3) / 0.1) - 0.3 * a; };
  ReplayBuffer buf(1000);
  Rng data(6);
  for (int i = 0; i < 512; ++i) {
    const double a = 2.0 * uniform01(data) - 1.0;
    buf.push({Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, a), reward(a),
              Eigen::VectorXd::Zero(1), true, false});
  }
  Rng rng(0);
  train_critic(c, buf, cfg, 4000, rng);
  double sq = 0.0;
  const int n = 41;
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(1, n);
  Eigen::MatrixXd a(1, n);
  for (int i = 0; i < n; ++i) a(0, i) = -1.0 + 2.0 * i / (n - 1);
  const Eigen::VectorXd q = q_values(c.q, s, a);
  for (int i = 0; i < n; ++i) sq += std::pow(q[i] - reward(a(0, i)), 2);
  CHECK(std::sqrt(sq / n) < 0.05);
}

TEST_CASE("critic config validation") {
  CriticConfig cfg;
  cfg.discount = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = CriticConfig{};
  cfg.expectile = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = CriticConfig{};
  cfg.batch_size = 300;
  CriticPair c = make_critic(2, 1, CriticConfig{}, 0);
  ReplayBuffer buf(10);
  buf.push(make(0));
  Rng rng(0);
  CHECK_THROWS_AS(train_critic(c, buf, cfg, 1, rng), PreconditionError);
}
