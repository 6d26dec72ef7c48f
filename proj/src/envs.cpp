#include "otpr/envs.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "otpr/binary_io.hpp"
#include "otpr/error.hpp"

namespace otpr::envs {

using nlohmann::json;

const char* to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::kBandit2d: return "bandit2d";
    case EnvKind::kPointmass: return "pointmass";
    case EnvKind::kMultigoal: return "multigoal_pointmass";
  }
  return "?";
}

const char* to_string(RewardKind kind) { return kind == RewardKind::kDense ? "dense" : "sparse"; }

EnvKind env_kind_from_string(std::string_view name) {
  if (name == "bandit2d") return EnvKind::kBandit2d;
  if (name == "pointmass") return EnvKind::kPointmass;
  if (name == "multigoal_pointmass" || name == "multigoal") return EnvKind::kMultigoal;
  throw ConfigError("unknown environment '" + std::string(name) + "'");
}

RewardKind reward_kind_from_string(std::string_view name) {
  if (name == "dense") return RewardKind::kDense;
  if (name == "sparse") return RewardKind::kSparse;
  throw ConfigError("unknown reward kind '" + std::string(name) + "'");
}

void EnvSpec::validate() const {
  if (horizon < 1) throw ConfigError("env horizon must be >= 1");
  if (state_dim < 1 || action_dim < 1) throw ConfigError("env dimensions must be positive");
  box.validate();
  if (box.dim() != action_dim) throw ShapeError("action box does not match action_dim");
  switch (kind) {
    case EnvKind::kBandit2d:
      if (bumps.empty()) throw ConfigError("bandit needs at least one bump");
      for (const Bump& b : bumps)
        if (b.center.size() != action_dim) throw ShapeError("bump center has wrong dimension");
      if (!(bump_std > 0.0)) throw ConfigError("bump_std must be positive");
      if (state_dim != action_dim) throw ShapeError("bandit states live in the action space");
      break;
    case EnvKind::kPointmass:
    case EnvKind::kMultigoal:
      if (state_dim != 2 * action_dim) throw ShapeError("point-mass state is [position; velocity]");
      if (goals.empty()) throw ConfigError("point-mass task needs a goal");
      for (const Eigen::VectorXd& g : goals)
        if (g.size() != action_dim) throw ShapeError("goal has wrong dimension");
      if (!(dt > 0.0) || !(goal_radius > 0.0)) throw ConfigError("dt and goal_radius must be positive");
      if (!(init_x >= 0.0) || !(init_y >= 0.0)) throw ConfigError("init extents must be >= 0");
      break;
  }
}

EnvSpec bandit2d() {
  EnvSpec s;
  s.kind = EnvKind::kBandit2d;
  s.state_dim = 2;
  s.action_dim = 2;
  s.horizon = 1;
  s.reward = RewardKind::kDense;
  s.bumps = {{Eigen::Vector2d(0.5, 0.5), 1.0}, {Eigen::Vector2d(-0.5, -0.5), 0.8}};
  return s;
}

EnvSpec pointmass(RewardKind reward) {
  EnvSpec s;
  s.kind = EnvKind::kPointmass;
  s.reward = reward;
  s.goals = {Eigen::Vector2d::Zero()};
  return s;
}

EnvSpec multigoal_pointmass() {
  EnvSpec s;
  s.kind = EnvKind::kMultigoal;
  s.goals = {Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(-1.0, 0.0)};
  s.init_x = 0.1;
  s.init_y = 0.3;
  return s;
}

EnvSpec make_env(std::string_view name, RewardKind reward) {
  switch (env_kind_from_string(name)) {
    case EnvKind::kBandit2d: return bandit2d();
    case EnvKind::kPointmass: return pointmass(reward);
    case EnvKind::kMultigoal: {
      EnvSpec s = multigoal_pointmass();
      s.reward = reward;
      return s;
    }
  }
  throw ConfigError("unknown environment");
}

double bandit_reward(const EnvSpec& spec, const Eigen::VectorXd& action) {
  double r = 0.0;
  for (const Bump& b : spec.bumps)
    r += b.weight *
         std::exp(-(action - b.center).squaredNorm() / (2.0 * spec.bump_std * spec.bump_std));
  return r;
}

namespace {

double goal_distance(const EnvSpec& spec, const Eigen::VectorXd& state) {
  const auto p = state.head(spec.action_dim);
  double best = INFINITY;
  for (const Eigen::VectorXd& g : spec.goals) best = std::min(best, (p - g).norm());
  return best;
}

}  // namespace

bool at_goal(const EnvSpec& spec, const Eigen::VectorXd& state) {
  if (spec.kind == EnvKind::kBandit2d) return false;
  return goal_distance(spec, state) < spec.goal_radius;
}

Eigen::VectorXd env_reset(const EnvSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  auto u = [&](double half) { return half * (2.0 * uniform01(rng) - 1.0); };
  if (spec.kind == EnvKind::kBandit2d) {
    Eigen::VectorXd s(spec.state_dim);
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = u(1.0);
    return s;
  }
  Eigen::VectorXd s = Eigen::VectorXd::Zero(spec.state_dim);
  // Start clear of the goal so every episode has something to do.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    s[0] = u(spec.init_x);
    s[1] = u(spec.init_y);
    for (int i = 2; i < spec.action_dim; ++i) s[i] = u(spec.init_y);
    if (goal_distance(spec, s) > 2.0 * spec.goal_radius) return s;
  }
  throw ConfigError("initial region lies inside the goal");
}

StepResult env_step(const EnvSpec& spec, const Eigen::VectorXd& state, const Eigen::VectorXd& action) {
  if (state.size() != spec.state_dim || action.size() != spec.action_dim)
    throw ShapeError("env_step: state or action has the wrong dimension");
  if (!action.allFinite()) throw PreconditionError("env_step: action is not finite");
  StepResult out;
  out.clipped = !spec.box.contains(action);
  const Eigen::VectorXd a = spec.box.clip(action);

  if (spec.kind == EnvKind::kBandit2d) {
    out.state = state;
    out.reward = bandit_reward(spec, a);
    out.done = true;
    out.success = out.reward > 0.5;
    return out;
  }

  const int d = spec.action_dim;
  out.state.resize(spec.state_dim);
  out.state.head(d) = state.head(d) + state.tail(d) * spec.dt;
  out.state.tail(d) = state.tail(d) + a * spec.dt;
  out.success = at_goal(spec, out.state);
  out.done = out.success;
  if (spec.reward == RewardKind::kSparse)
    out.reward = out.success ? 1.0 : 0.0;
  else
    out.reward = -goal_distance(spec, out.state);
  return out;
}

Eigen::VectorXd expert_action(const EnvSpec& spec, const Eigen::VectorXd& state, Rng& rng) {
  if (spec.kind == EnvKind::kBandit2d) {
    const Bump* nearest = &spec.bumps.front();
    for (const Bump& b : spec.bumps)
      if ((state - b.center).squaredNorm() < (state - nearest->center).squaredNorm()) nearest = &b;
    Eigen::VectorXd a = nearest->center + spec.expert_noise * std_normal_matrix(spec.action_dim, 1, rng);
    return spec.box.clip(a);
  }
  const int d = spec.action_dim;
  const auto p = state.head(d);
  const auto v = state.tail(d);
  Eigen::VectorXd goal = spec.goals.front();
  if (spec.kind == EnvKind::kMultigoal) goal = p[0] >= 0.0 ? spec.goals[0] : spec.goals[1];
  else
    for (const Eigen::VectorXd& g : spec.goals)
      if ((p - g).norm() < (p - goal).norm()) goal = g;
  return spec.box.clip(spec.kp * (goal - p) - spec.kd * v);
}

double trajectory_return(const Trajectory& t) {
  double r = 0.0;
  for (double x : t.rewards) r += x;
  return r;
}

std::size_t DemoSet::num_pairs() const {
  std::size_t n = 0;
  for (const Trajectory& t : trajectories) n += t.length();
  return n;
}

Eigen::MatrixXd DemoSet::state_matrix() const {
  Eigen::MatrixXd m(spec.state_dim, static_cast<Eigen::Index>(num_pairs()));
  Eigen::Index k = 0;
  for (const Trajectory& t : trajectories)
    for (std::size_t i = 0; i < t.length(); ++i) m.col(k++) = t.states[i];
  return m;
}

Eigen::MatrixXd DemoSet::action_matrix() const {
  Eigen::MatrixXd m(spec.action_dim, static_cast<Eigen::Index>(num_pairs()));
  Eigen::Index k = 0;
  for (const Trajectory& t : trajectories)
    for (const Eigen::VectorXd& a : t.actions) m.col(k++) = a;
  return m;
}

void DemoSet::push_to(rl::ReplayBuffer& buffer) const {
  for (const Trajectory& t : trajectories) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      rl::Transition tr;
      tr.s = t.states[i];
      tr.a = t.actions[i];
      tr.r = t.rewards[i];
      tr.s_next = t.states[i + 1];
      tr.done = t.done && i + 1 == t.length();
      tr.expert = true;
      buffer.push(std::move(tr));
    }
  }
}

DemoSet generate_demos(const EnvSpec& spec, int n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw PreconditionError("need at least one demonstration");
  DemoSet demos;
  demos.spec = spec;
  int attempts = 0;
  int successes = 0;
  while (static_cast<int>(demos.trajectories.size()) < n) {
    const std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(attempts));
    ++attempts;
    Rng rng(derive_seed(ep_seed, 1));
    Trajectory t;
    t.states.push_back(env_reset(spec, ep_seed));
    for (int step = 0; step < spec.horizon; ++step) {
      const Eigen::VectorXd a = expert_action(spec, t.states.back(), rng);
      const StepResult r = env_step(spec, t.states.back(), a);
      t.actions.push_back(a);
      t.rewards.push_back(r.reward);
      t.states.push_back(r.state);
      t.success = r.success;
      if (r.done) {
        t.done = true;
        break;
      }
    }
    if (t.success) {
      ++successes;
      demos.trajectories.push_back(std::move(t));
    }
    if (attempts >= 20 && successes * 10 < attempts)
      throw NumericalError("expert succeeds in fewer than 10% of rollouts; check the env config");
  }
  return demos;
}

std::string spec_to_json(const EnvSpec& spec) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json j;
  j["name"] = to_string(spec.kind);
  j["state_dim"] = spec.state_dim;
  j["action_dim"] = spec.action_dim;
  j["horizon"] = spec.horizon;
  j["box_low"] = vec(spec.box.low);
  j["box_high"] = vec(spec.box.high);
  j["reward"] = to_string(spec.reward);
  j["dt"] = spec.dt;
  j["goal_radius"] = spec.goal_radius;
  j["goals"] = json::array();
  for (const auto& g : spec.goals) j["goals"].push_back(vec(g));
  j["init_x"] = spec.init_x;
  j["init_y"] = spec.init_y;
  j["bumps"] = json::array();
  for (const auto& b : spec.bumps) j["bumps"].push_back({{"center", vec(b.center)}, {"weight", b.weight}});
  j["bump_std"] = spec.bump_std;
  j["kp"] = spec.kp;
  j["kd"] = spec.kd;
  j["expert_noise"] = spec.expert_noise;
  return j.dump(2);
}

EnvSpec spec_from_json(const std::string& text) {
  auto vec = [](const json& a) {
    const auto v = a.get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  try {
    const json j = json::parse(text);
    EnvSpec s;
    s.kind = env_kind_from_string(j.at("name").get<std::string>());
    s.state_dim = j.at("state_dim").get<int>();
    s.action_dim = j.at("action_dim").get<int>();
    s.horizon = j.at("horizon").get<int>();
    s.box = {vec(j.at("box_low")), vec(j.at("box_high"))};
    s.reward = reward_kind_from_string(j.at("reward").get<std::string>());
    s.dt = j.at("dt").get<double>();
    s.goal_radius = j.at("goal_radius").get<double>();
    s.goals.clear();
    for (const auto& g : j.at("goals")) s.goals.push_back(vec(g));
    s.init_x = j.at("init_x").get<double>();
    s.init_y = j.at("init_y").get<double>();
    s.bumps.clear();
    for (const auto& b : j.at("bumps")) s.bumps.push_back({vec(b.at("center")), b.at("weight").get<double>()});
    s.bump_std = j.at("bump_std").get<double>();
    s.kp = j.at("kp").get<double>();
    s.kd = j.at("kd").get<double>();
    s.expert_noise = j.at("expert_noise").get<double>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad env description: ") + e.what());
  }
}

void save_demos(const DemoSet& demos, const std::filesystem::path& path) {
  io::BinaryWriter out(path);
  out.magic(kDemoMagic);
  out.u32(static_cast<std::uint32_t>(demos.spec.state_dim));
  out.u32(static_cast<std::uint32_t>(demos.spec.action_dim));
  out.u64(demos.trajectories.size());
  for (const Trajectory& t : demos.trajectories) {
    out.u64(t.length());
    out.u8(t.done ? 1 : 0);
    out.u8(t.success ? 1 : 0);
    for (const auto& s : t.states) out.f64s({s.data(), static_cast<std::size_t>(s.size())});
    for (const auto& a : t.actions) out.f64s({a.data(), static_cast<std::size_t>(a.size())});
    out.f64s(t.rewards);
  }
  out.finish();
  std::ofstream side(path.string() + ".json");
  side << spec_to_json(demos.spec) << "\n";
  if (!side) throw IoError("cannot write '" + path.string() + ".json'");
}

DemoSet load_demos(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw IoError("missing env sidecar '" + path.string() + ".json'");
  std::stringstream text;
  text << side.rdbuf();
  DemoSet demos;
  demos.spec = spec_from_json(text.str());

  io::BinaryReader in(path);
  in.expect_magic(kDemoMagic);
  const auto sd = static_cast<int>(in.u32());
  const auto ad = static_cast<int>(in.u32());
  if (sd != demos.spec.state_dim || ad != demos.spec.action_dim)
    throw IoError("demo file dimensions disagree with its sidecar");
  const std::uint64_t count = in.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    Trajectory t;
    const std::uint64_t len = in.u64();
    if (len > (1ull << 24)) throw IoError("corrupt trajectory length");
    t.done = in.u8() != 0;
    t.success = in.u8() != 0;
    t.states.assign(len + 1, Eigen::VectorXd(sd));
    t.actions.assign(len, Eigen::VectorXd(ad));
    t.rewards.assign(len, 0.0);
    for (auto& s : t.states) in.f64s({s.data(), static_cast<std::size_t>(sd)});
    for (auto& a : t.actions) in.f64s({a.data(), static_cast<std::size_t>(ad)});
    in.f64s(t.rewards);
    demos.trajectories.push_back(std::move(t));
  }
  return demos;
}

}  // namespace otpr::envs
