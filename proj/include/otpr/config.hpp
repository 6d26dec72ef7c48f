#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace otpr::config {

// Every run setting. Defaults follow the reference hyperparameters; the toy
// configurations under configs/ override the budgets.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  // env.*
  std::string env_name = "pointmass";
  std::string env_reward = "sparse";
  int env_horizon = 100;

  // demos.*
  int demos_count = 20;
  std::string demos_path;  // empty: generate
  bool demos_generate = true;

  // model.*
  std::vector<int> model_hidden = {128, 128};
  std::string model_schedule = "vp";
  double model_beta_min = 0.1;
  double model_beta_max = 20.0;
  double model_sigma_min = 0.01;
  double model_sigma_max = 10.0;
  std::string model_sampler = "ddim";
  int model_sampler_steps = 20;

  // pretrain.*
  int pretrain_epochs = 2000;
  int pretrain_batch = 256;
  double pretrain_lr = 1e-5;
  int pretrain_eval_episodes = 0;

  // finetune.*
  std::string finetune_checkpoint;  // empty: <out_dir>/pretrain.ckpt
  int finetune_outer_iters = 200;
  int finetune_episodes_per_iter = 10;
  int finetune_dual_iters = 500;
  int finetune_critic_updates = 50;
  int finetune_score_updates = 100;
  int finetune_proposals = 8;
  std::string finetune_guidance = "H";
  std::string finetune_score_loss = "hdsm";
  bool finetune_masked = true;
  int finetune_actor_batch = 1024;
  double finetune_actor_lr = 1e-5;
  double finetune_softmax_temperature = 1.0;
  int finetune_eval_episodes = 20;
  // Stop once the evaluation success rate reaches this value (<= 0: never).
  double finetune_stop_success = 0.0;
  int finetune_warmup_critic_updates = 0;
  // Divide hdsm weights by their batch mean (self-normalized estimator).
  bool finetune_normalize_weights = true;

  // dual.*
  double dual_lambda = 1e-5;
  double dual_lr = 1e-6;
  std::optional<double> dual_lr_final;
  int dual_batch = 64;
  std::vector<int> dual_hidden = {256, 256};
  std::string dual_cost = "auto";  // auto: weighted when masked, negq otherwise
  double dual_weight_negq = 1.0;
  double dual_weight_relation = 1.0;
  std::string dual_normalization = "zscore";
  bool dual_append_demo_actions = false;
  double dual_grad_clip = 10.0;

  // critic.*
  std::vector<int> critic_hidden = {256, 256};
  double critic_discount = 0.99;
  double critic_expectile = 0.7;
  double critic_lr = 3e-4;
  double critic_polyak = 0.005;
  int critic_batch = 256;

  // buffer.*
  int buffer_capacity = 250000;

  // eval.*
  int eval_episodes = 100;
  bool eval_expert = false;

  // ablate.*
  std::string ablate_kind = "guidance";  // guidance | mask
  std::vector<int> ablate_seeds = {0, 1, 2, 3, 4};

  // ot_debug.*
  int ot_debug_n = 4;
  int ot_debug_m = 4;
  double ot_debug_lambda = 0.1;
  int ot_debug_iters = 4000;
  double ot_debug_lr = 2e-2;

  void validate() const;
};

using FieldPtr = std::variant<int*, double*, bool*, std::string*, std::uint64_t*,
                              std::vector<int>*, std::optional<double>*>;

struct Field {
  std::string key;
  FieldPtr ptr;
};

std::vector<Field> fields(RunConfig& config);

// "key = value" lines; '#' starts a comment. Unknown keys and malformed
// values throw ConfigError.
void apply_text(RunConfig& config, std::string_view text);
void apply_assignment(RunConfig& config, std::string_view key, std::string_view value);
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

}  // namespace otpr::config
