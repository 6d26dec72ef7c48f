#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "otpr/box.hpp"
#include "otpr/rl.hpp"
#include "otpr/rng.hpp"

namespace otpr::envs {

enum class EnvKind { kBandit2d, kPointmass, kMultigoal };
enum class RewardKind { kDense, kSparse };

const char* to_string(EnvKind kind);
const char* to_string(RewardKind kind);
EnvKind env_kind_from_string(std::string_view name);
RewardKind reward_kind_from_string(std::string_view name);

struct Bump {
  Eigen::VectorXd center;
  double weight = 1.0;
};

struct EnvSpec {
  EnvKind kind = EnvKind::kPointmass;
  int state_dim = 4;
  int action_dim = 2;
  int horizon = 100;
  ActionBox box = ActionBox::symmetric(2, 1.0);
  RewardKind reward = RewardKind::kSparse;

  // Point-mass dynamics: p' = p + v dt, v' = v + a dt; state = [p; v].
  double dt = 0.05;
  double goal_radius = 0.1;
  std::vector<Eigen::VectorXd> goals;
  // Initial positions are uniform in [-init_x, init_x] x [-init_y, init_y]
  // (outside the goal disc for pointmass), zero velocity.
  double init_x = 1.0;
  double init_y = 1.0;

  // Bandit: reward(a) = sum_k weight_k exp(-|a - center_k|^2 / (2 std^2)).
  std::vector<Bump> bumps;
  double bump_std = 0.15;

  // Scripted expert.
  double kp = 4.0;
  double kd = 4.0;
  double expert_noise = 0.05;

  void validate() const;
};

// Default configurations of the three tasks.
EnvSpec bandit2d();
EnvSpec pointmass(RewardKind reward = RewardKind::kSparse);
EnvSpec multigoal_pointmass();
EnvSpec make_env(std::string_view name, RewardKind reward = RewardKind::kSparse);

struct StepResult {
  Eigen::VectorXd state;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  bool clipped = false;
};

Eigen::VectorXd env_reset(const EnvSpec& spec, std::uint64_t seed);
// Out-of-box actions are clipped (StepResult::clipped); non-finite actions throw.
StepResult env_step(const EnvSpec& spec, const Eigen::VectorXd& state, const Eigen::VectorXd& action);

// Analytic bandit reward, usable as the exact Q of the single-step task.
double bandit_reward(const EnvSpec& spec, const Eigen::VectorXd& action);

// Whether the position part of a state is inside some goal disc.
bool at_goal(const EnvSpec& spec, const Eigen::VectorXd& state);

// Scripted expert; only the bandit expert consumes randomness.
Eigen::VectorXd expert_action(const EnvSpec& spec, const Eigen::VectorXd& state, Rng& rng);

struct Trajectory {
  std::vector<Eigen::VectorXd> states;  // T + 1 entries
  std::vector<Eigen::VectorXd> actions;
  std::vector<double> rewards;
  bool done = false;  // last transition is terminal
  bool success = false;

  std::size_t length() const { return actions.size(); }
};

double trajectory_return(const Trajectory& t);

struct DemoSet {
  EnvSpec spec;
  std::vector<Trajectory> trajectories;

  std::size_t num_pairs() const;
  // All (s, a) pairs as columns.
  Eigen::MatrixXd state_matrix() const;
  Eigen::MatrixXd action_matrix() const;
  // Appends every demo transition to the buffer as an expert transition.
  void push_to(rl::ReplayBuffer& buffer) const;
};

inline constexpr const char* kDemoMagic = "OTPR-DEMO-1";

// Rolls the expert from reset seeds derive_seed(seed, attempt) and keeps the
// first n successful trajectories. Throws NumericalError when fewer than 10%
// of at least 20 attempts succeed.
DemoSet generate_demos(const EnvSpec& spec, int n, std::uint64_t seed);

// Binary demo file plus a "<path>.json" sidecar describing the env.
void save_demos(const DemoSet& demos, const std::filesystem::path& path);
DemoSet load_demos(const std::filesystem::path& path);

std::string spec_to_json(const EnvSpec& spec);
EnvSpec spec_from_json(const std::string& text);

}  // namespace otpr::envs
