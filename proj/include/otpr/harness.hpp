#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otpr/checkpoint.hpp"
#include "otpr/config.hpp"
#include "otpr/diffusion.hpp"
#include "otpr/envs.hpp"
#include "otpr/policy.hpp"

namespace otpr::harness {

class Logger {
 public:
  explicit Logger(bool quiet = false) : quiet_(quiet) {}
  void info(const std::string& message) const;
  bool quiet() const { return quiet_; }

 private:
  bool quiet_;
};

envs::EnvSpec env_from_config(const config::RunConfig& config);
diffusion::DiffusionSchedule schedule_from_config(const config::RunConfig& config);
diffusion::SamplerOptions sampler_from_config(const config::RunConfig& config,
                                              const envs::EnvSpec& env);

// Maps the active states (columns) and one seed per state to actions.
using BatchActor = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& states,
                                                 std::span<const std::uint64_t> seeds)>;

// Runs one episode per seed in lockstep. Episode k resets with seed
// episode_seeds[k]; its step t is acted with derive_seed(episode_seeds[k], t + 1).
std::vector<envs::Trajectory> rollout_episodes(const envs::EnvSpec& env, const BatchActor& actor,
                                               std::span<const std::uint64_t> episode_seeds);

struct EvalStats {
  int episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  // Percentile bootstrap 95% intervals over episodes.
  double return_ci_low = 0.0;
  double return_ci_high = 0.0;
  double success_ci_low = 0.0;
  double success_ci_high = 0.0;
  double mean_length = 0.0;
};

EvalStats summarize(const std::vector<envs::Trajectory>& episodes, std::uint64_t bootstrap_seed);

std::vector<std::uint64_t> episode_seeds(std::uint64_t seed, int count);

// Eval-mode (single sample) rollouts of a policy; throws on zero episodes.
EvalStats evaluate_policy(const envs::EnvSpec& env, const policy::OtprPolicy& policy, int episodes,
                          std::uint64_t seed);
EvalStats evaluate_expert(const envs::EnvSpec& env, int episodes, std::uint64_t seed);

// Score-network checkpoints.
Checkpoint make_score_checkpoint(const diffusion::ScoreModel& model, const std::string& config_text);
diffusion::ScoreModel score_model_from_checkpoint(const Checkpoint& ckpt);

// Freshly initialized score network for the configured environment and seed.
diffusion::ScoreModel initial_score_model(const config::RunConfig& config, const envs::EnvSpec& env);

struct PretrainResult {
  diffusion::ScoreModel model;
  envs::DemoSet demos;
  std::vector<double> epoch_loss;
  std::filesystem::path checkpoint;
  std::optional<EvalStats> eval;
};

// Trains the score model on demonstration pairs with denoising score
// matching. Writes <out>/demos.bin, <out>/pretrain_loss.csv and
// <out>/pretrain.ckpt.
PretrainResult cmd_pretrain(const config::RunConfig& config, const Logger& log);

struct IterationMetrics {
  int iter = 0;
  long long env_steps = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double dual_obj = 0.0;
  double critic_loss = 0.0;
  double score_loss = 0.0;
  double wall_s = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "iter,env_steps,mean_return,success_rate,dual_obj,critic_loss,score_loss,wall_s";
inline constexpr const char* kRunVersion = "otpr-run-1";

struct RunSummary {
  std::vector<IterationMetrics> rows;
  EvalStats initial;
  // First iteration whose evaluation reached finetune.stop_success (0 when
  // the pretrained policy already did).
  std::optional<int> iterations_to_threshold;
  double wall_s = 0.0;
  std::filesystem::path metrics_csv;
  std::filesystem::path final_checkpoint;
  std::string config_text;

  double final_success() const { return rows.empty() ? initial.success_rate : rows.back().success_rate; }
};

std::string summary_to_json(const RunSummary& summary);

// Fine-tunes a pretrained score model online: per outer iteration train the
// dual potentials, roll out with resampling, update the critic and refit the
// score model. Writes metrics.csv (appended each iteration), dual_curve.csv,
// summary.json and finetune.ckpt under out_dir. A non-finite loss writes
// abort.json and abort.ckpt and rethrows.
RunSummary cmd_finetune(const config::RunConfig& config, const Logger& log);

// Evaluates <checkpoint> (or the scripted expert with eval.expert).
EvalStats cmd_eval(const config::RunConfig& config,
                   const std::optional<std::filesystem::path>& checkpoint, const Logger& log);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double initial_success = 0.0;
  double final_success = 0.0;
  std::optional<int> iterations_to_threshold;
};

// For each seed, pretrains once and fine-tunes every variant of ablate.kind
// (guidance: H, Q, A; mask: masked, unmasked). Writes ablation.csv.
std::vector<AblationRow> cmd_ablate(const config::RunConfig& config, const Logger& log);

struct OtDebugResult {
  Eigen::MatrixXd cost;
  Eigen::MatrixXd mask;
  Eigen::MatrixXd compatibility;
  Eigen::MatrixXd plan_estimate;
  Eigen::MatrixXd plan_oracle;
};

// Random n x m discrete instance: trains tabular potentials, solves the exact
// plan and writes ot_debug.csv (i,j,cost,mask,H,plan_oracle).
OtDebugResult cmd_ot_debug(const config::RunConfig& config, const Logger& log);

}  // namespace otpr::harness
