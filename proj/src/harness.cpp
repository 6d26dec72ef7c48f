#include "otpr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "otpr/error.hpp"
#include "otpr/ot.hpp"
#include "otpr/potentials.hpp"
#include "otpr/rl.hpp"

namespace otpr::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Stream ids for derive_seed(config.seed, ·).
enum Stream : std::uint64_t {
  kDemoStream = 1,
  kScoreInit = 2,
  kPretrainNoise = 3,
  kCriticInit = 10,
  kDualInit = 11,
  kCriticBatches = 12,
  kScoreBatches = 13,
  kRolloutEpisodes = 14,
  kDualBatches = 15,
  kEvalEpisodes = 16,
  kBootstrap = 17,
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, std::ios::out | mode);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

envs::DemoSet obtain_demos(const config::RunConfig& config, const envs::EnvSpec& env,
                           const Logger& log) {
  if (!config.demos_path.empty()) {
    envs::DemoSet d = envs::load_demos(config.demos_path);
    if (d.spec.state_dim != env.state_dim || d.spec.action_dim != env.action_dim)
      throw ConfigError("demo file does not match the configured environment");
    return d;
  }
  const fs::path cached = fs::path(config.out_dir) / "demos.bin";
  if (fs::exists(cached)) return envs::load_demos(cached);
  if (!config.demos_generate)
    throw ConfigError("no demonstrations: set demos.path or demos.generate = true");
  log.info("generating " + std::to_string(config.demos_count) + " expert demonstrations");
  return envs::generate_demos(env, config.demos_count, derive_seed(config.seed, kDemoStream));
}

policy::OtprPolicy base_policy(const config::RunConfig& config, const envs::EnvSpec& env,
                               const diffusion::ScoreModel& model) {
  policy::OtprPolicy p;
  p.score = &model;
  p.schedule = schedule_from_config(config);
  p.sampler = sampler_from_config(config, env);
  p.num_proposals = config.finetune_proposals;
  p.guidance = policy::guidance_from_string(config.finetune_guidance);
  p.softmax_temperature = config.finetune_softmax_temperature;
  return p;
}

ot::CostSpec cost_from_config(const config::RunConfig& config, bool masked) {
  ot::CostSpec c;
  std::string mode = config.dual_cost;
  if (mode == "auto") mode = masked ? "weighted" : "negq";
  if (mode == "negq") c.mode = ot::CostMode::kNegQ;
  else if (mode == "relation") c.mode = ot::CostMode::kRelationJs;
  else c.mode = ot::CostMode::kWeightedSum;
  if (c.uses_relation() && !masked)
    throw ConfigError("dual.cost '" + mode + "' needs keypoints (finetune.masked = true)");
  c.weight_negq = config.dual_weight_negq;
  c.weight_relation = config.dual_weight_relation;
  c.normalization =
      config.dual_normalization == "none" ? ot::Normalization::kNone : ot::Normalization::kZScore;
  return c;
}

rl::CriticConfig critic_from_config(const config::RunConfig& config) {
  rl::CriticConfig c;
  c.hidden = config.critic_hidden;
  c.discount = config.critic_discount;
  c.expectile = config.critic_expectile;
  c.lr = config.critic_lr;
  c.polyak = config.critic_polyak;
  c.batch_size = config.critic_batch;
  return c;
}

void push_episodes(rl::ReplayBuffer& buffer, const std::vector<envs::Trajectory>& episodes) {
  for (const envs::Trajectory& t : episodes) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      rl::Transition tr;
      tr.s = t.states[i];
      tr.a = t.actions[i];
      tr.r = t.rewards[i];
      tr.s_next = t.states[i + 1];
      // Horizon truncation is not terminal.
      tr.done = t.done && i + 1 == t.length();
      buffer.push(std::move(tr));
    }
  }
}

std::string metrics_row(const IterationMetrics& m) {
  std::ostringstream os;
  os << m.iter << ',' << m.env_steps << ',' << fmt(m.mean_return) << ',' << fmt(m.success_rate)
     << ',' << fmt(m.dual_obj) << ',' << fmt(m.critic_loss) << ',' << fmt(m.score_loss) << ','
     << std::fixed << std::setprecision(3) << m.wall_s;
  return os.str();
}

json stats_json(const EvalStats& s) {
  return {{"episodes", s.episodes},
          {"mean_return", s.mean_return},
          {"success_rate", s.success_rate},
          {"return_ci", {s.return_ci_low, s.return_ci_high}},
          {"success_ci", {s.success_ci_low, s.success_ci_high}},
          {"mean_length", s.mean_length}};
}

}  // namespace

void Logger::info(const std::string& message) const {
  if (!quiet_) std::cerr << "[otpr] " << message << std::endl;
}

envs::EnvSpec env_from_config(const config::RunConfig& config) {
  envs::EnvSpec env =
      envs::make_env(config.env_name, envs::reward_kind_from_string(config.env_reward));
  if (env.kind != envs::EnvKind::kBandit2d) env.horizon = config.env_horizon;
  env.validate();
  return env;
}

diffusion::DiffusionSchedule schedule_from_config(const config::RunConfig& config) {
  diffusion::DiffusionSchedule s;
  s.kind = config.model_schedule == "ve" ? diffusion::ScheduleKind::kVE : diffusion::ScheduleKind::kVP;
  s.beta_min = config.model_beta_min;
  s.beta_max = config.model_beta_max;
  s.sigma_min = config.model_sigma_min;
  s.sigma_max = config.model_sigma_max;
  s.sampler_steps = config.model_sampler_steps;
  s.validate();
  return s;
}

diffusion::SamplerOptions sampler_from_config(const config::RunConfig& config,
                                              const envs::EnvSpec& env) {
  diffusion::SamplerOptions o;
  o.method = config.model_sampler == "em" ? diffusion::SamplerMethod::kEulerMaruyama
                                          : diffusion::SamplerMethod::kDdim;
  o.steps = config.model_sampler_steps;
  o.box = env.box;
  return o;
}

std::vector<envs::Trajectory> rollout_episodes(const envs::EnvSpec& env, const BatchActor& actor,
                                               std::span<const std::uint64_t> seeds) {
  std::vector<envs::Trajectory> eps(seeds.size());
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    eps[k].states.push_back(envs::env_reset(env, seeds[k]));
    active.push_back(k);
  }
  for (int t = 0; t < env.horizon && !active.empty(); ++t) {
    Eigen::MatrixXd states(env.state_dim, static_cast<Eigen::Index>(active.size()));
    std::vector<std::uint64_t> step_seeds(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
      states.col(static_cast<Eigen::Index>(i)) = eps[active[i]].states.back();
      step_seeds[i] = derive_seed(seeds[active[i]], static_cast<std::uint64_t>(t) + 1);
    }
    const Eigen::MatrixXd actions = actor(states, step_seeds);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < active.size(); ++i) {
      envs::Trajectory& ep = eps[active[i]];
      const Eigen::VectorXd a = actions.col(static_cast<Eigen::Index>(i));
      const envs::StepResult r = envs::env_step(env, ep.states.back(), a);
      ep.actions.push_back(env.box.clip(a));
      ep.rewards.push_back(r.reward);
      ep.states.push_back(r.state);
      ep.success = ep.success || r.success;
      if (r.done) ep.done = true;
      else still.push_back(active[i]);
    }
    active = std::move(still);
  }
  return eps;
}

std::vector<std::uint64_t> episode_seeds(std::uint64_t seed, int count) {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) out[static_cast<std::size_t>(k)] = derive_seed(seed, k);
  return out;
}

EvalStats summarize(const std::vector<envs::Trajectory>& episodes, std::uint64_t bootstrap_seed) {
  if (episodes.empty()) throw PreconditionError("evaluation needs at least one episode");
  const std::size_t n = episodes.size();
  std::vector<double> ret(n);
  std::vector<double> succ(n);
  EvalStats s;
  s.episodes = static_cast<int>(n);
  for (std::size_t k = 0; k < n; ++k) {
    ret[k] = envs::trajectory_return(episodes[k]);
    succ[k] = episodes[k].success ? 1.0 : 0.0;
    s.mean_length += static_cast<double>(episodes[k].length()) / static_cast<double>(n);
  }
  s.mean_return = std::accumulate(ret.begin(), ret.end(), 0.0) / static_cast<double>(n);
  s.success_rate = std::accumulate(succ.begin(), succ.end(), 0.0) / static_cast<double>(n);

  Rng rng(bootstrap_seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const int resamples = 1000;
  std::vector<double> br(resamples);
  std::vector<double> bs(resamples);
  for (int b = 0; b < resamples; ++b) {
    double r = 0.0;
    double c = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = pick(rng);
      r += ret[j];
      c += succ[j];
    }
    br[static_cast<std::size_t>(b)] = r / static_cast<double>(n);
    bs[static_cast<std::size_t>(b)] = c / static_cast<double>(n);
  }
  s.return_ci_low = percentile(br, 0.025);
  s.return_ci_high = percentile(br, 0.975);
  s.success_ci_low = percentile(bs, 0.025);
  s.success_ci_high = percentile(bs, 0.975);
  return s;
}

EvalStats evaluate_policy(const envs::EnvSpec& env, const policy::OtprPolicy& pol, int episodes,
                          std::uint64_t seed) {
  if (episodes < 1) throw PreconditionError("evaluation needs at least one episode");
  policy::OtprPolicy p = pol;
  p.mode = policy::Mode::kEval;
  const auto seeds = episode_seeds(seed, episodes);
  const auto eps = rollout_episodes(
      env,
      [&](const Eigen::MatrixXd& s, std::span<const std::uint64_t> st) {
        return policy::act_batch(p, s, st);
      },
      seeds);
  return summarize(eps, derive_seed(seed, kBootstrap));
}

EvalStats evaluate_expert(const envs::EnvSpec& env, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw PreconditionError("evaluation needs at least one episode");
  const auto seeds = episode_seeds(seed, episodes);
  const auto eps = rollout_episodes(
      env,
      [&](const Eigen::MatrixXd& s, std::span<const std::uint64_t> st) {
        Eigen::MatrixXd a(env.action_dim, s.cols());
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          Rng rng(st[static_cast<std::size_t>(j)]);
          a.col(j) = envs::expert_action(env, s.col(j), rng);
        }
        return a;
      },
      seeds);
  return summarize(eps, derive_seed(seed, kBootstrap));
}

Checkpoint make_score_checkpoint(const diffusion::ScoreModel& model, const std::string& config_text) {
  Checkpoint ckpt;
  ckpt.put("score", model.net);
  json meta = {{"state_dim", model.state_dim}, {"action_dim", model.action_dim},
               {"config", config_text}};
  ckpt.metadata = meta.dump();
  return ckpt;
}

diffusion::ScoreModel score_model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.has("score")) throw IoError("checkpoint has no score network");
  diffusion::ScoreModel m;
  m.net = ckpt.get("score");
  try {
    const json meta = json::parse(ckpt.metadata);
    m.state_dim = meta.at("state_dim").get<int>();
    m.action_dim = meta.at("action_dim").get<int>();
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint metadata: ") + e.what());
  }
  if (m.net.input_dim() != m.state_dim + m.action_dim + diffusion::kTimeEmbeddingDim ||
      m.net.output_dim() != m.action_dim)
    throw IoError("checkpoint score network does not match its recorded dimensions");
  return m;
}

diffusion::ScoreModel initial_score_model(const config::RunConfig& config, const envs::EnvSpec& env) {
  return diffusion::make_score_model(env.state_dim, env.action_dim, config.model_hidden,
                                     derive_seed(config.seed, kScoreInit));
}

PretrainResult cmd_pretrain(const config::RunConfig& config, const Logger& log) {
  config.validate();
  const envs::EnvSpec env = env_from_config(config);
  const fs::path out(config.out_dir);
  ensure_dir(out);

  PretrainResult res;
  res.demos = obtain_demos(config, env, log);
  envs::save_demos(res.demos, out / "demos.bin");
  res.model = initial_score_model(config, env);
  const diffusion::DiffusionSchedule schedule = schedule_from_config(config);

  const Eigen::MatrixXd states = res.demos.state_matrix();
  const Eigen::MatrixXd actions = res.demos.action_matrix();
  const Eigen::Index n = states.cols();
  const Eigen::Index batch = std::min<Eigen::Index>(config.pretrain_batch, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  nn::AdamState opt = nn::adam_init(res.model.net);
  Rng rng(derive_seed(config.seed, kPretrainNoise));
  std::ofstream curve = open_out(out / "pretrain_loss.csv");
  curve << "epoch,loss\n";
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= config.pretrain_epochs; ++epoch) {
    // Fisher-Yates with our own generator keeps the order platform independent.
    for (Eigen::Index i = n - 1; i > 0; --i) {
      std::uniform_int_distribution<Eigen::Index> pick(0, i);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    double total = 0.0;
    int steps = 0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      Eigen::MatrixXd s(states.rows(), len);
      Eigen::MatrixXd a(actions.rows(), len);
      for (Eigen::Index k = 0; k < len; ++k) {
        s.col(k) = states.col(order[static_cast<std::size_t>(start + k)]);
        a.col(k) = actions.col(order[static_cast<std::size_t>(start + k)]);
      }
      const diffusion::ScoreLoss loss = diffusion::dsm_loss(res.model, s, a, schedule, rng);
      if (!std::isfinite(loss.value))
        throw NumericalError("pretraining loss is not finite at epoch " + std::to_string(epoch));
      nn::adam_update(opt, res.model.net, loss.grad, config.pretrain_lr);
      total += loss.value;
      ++steps;
    }
    res.epoch_loss.push_back(total / steps);
    curve << epoch << ',' << fmt(res.epoch_loss.back()) << '\n';
    if (epoch % 500 == 0 || epoch == config.pretrain_epochs)
      log.info("pretrain epoch " + std::to_string(epoch) + " loss " + fmt(res.epoch_loss.back()) +
               " (" + fmt(seconds_since(t0)) + " s)");
  }
  curve.flush();
  if (!curve) throw IoError("write failed for pretrain_loss.csv");

  res.checkpoint = out / "pretrain.ckpt";
  save_checkpoint(res.checkpoint, make_score_checkpoint(res.model, config::to_text(config)));
  if (config.pretrain_eval_episodes > 0) {
    const policy::OtprPolicy p = base_policy(config, env, res.model);
    res.eval = evaluate_policy(env, p, config.pretrain_eval_episodes,
                               derive_seed(config.seed, kEvalEpisodes));
    log.info("pretrained policy success " + fmt(res.eval->success_rate) + " return " +
             fmt(res.eval->mean_return));
    json j = stats_json(*res.eval);
    write_text(out / "pretrain_eval.json", j.dump(2) + "\n");
  }
  return res;
}

std::string summary_to_json(const RunSummary& s) {
  json rows = json::array();
  for (const IterationMetrics& m : s.rows)
    rows.push_back({{"iter", m.iter},
                    {"env_steps", m.env_steps},
                    {"mean_return", m.mean_return},
                    {"success_rate", m.success_rate},
                    {"dual_obj", m.dual_obj},
                    {"critic_loss", m.critic_loss},
                    {"score_loss", m.score_loss},
                    {"wall_s", m.wall_s}});
  json j = {{"version", kRunVersion},
            {"initial", stats_json(s.initial)},
            {"iterations", rows},
            {"iterations_to_threshold",
             s.iterations_to_threshold ? json(*s.iterations_to_threshold) : json(nullptr)},
            {"final_success", s.final_success()},
            {"wall_s", s.wall_s},
            {"metrics_csv", s.metrics_csv.string()},
            {"final_checkpoint", s.final_checkpoint.string()},
            {"config", s.config_text}};
  return j.dump(2) + "\n";
}

RunSummary cmd_finetune(const config::RunConfig& config, const Logger& log) {
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const envs::EnvSpec env = env_from_config(config);
  const fs::path out(config.out_dir);
  ensure_dir(out);
  const fs::path ckpt_path =
      config.finetune_checkpoint.empty() ? out / "pretrain.ckpt" : fs::path(config.finetune_checkpoint);
  diffusion::ScoreModel model = score_model_from_checkpoint(load_checkpoint(ckpt_path));
  if (model.state_dim != env.state_dim || model.action_dim != env.action_dim)
    throw ConfigError("checkpoint dimensions do not match the environment");
  const envs::DemoSet demos = obtain_demos(config, env, log);
  const diffusion::DiffusionSchedule schedule = schedule_from_config(config);

  rl::ReplayBuffer buffer(static_cast<std::size_t>(config.buffer_capacity), true);
  demos.push_to(buffer);
  const rl::CriticConfig critic_cfg = critic_from_config(config);
  rl::CriticPair critic =
      rl::make_critic(env.state_dim, env.action_dim, critic_cfg, derive_seed(config.seed, kCriticInit));
  const bool masked = config.finetune_masked && !demos.trajectories.empty();
  potentials::DualPair dual =
      potentials::make_dual(env.state_dim, env.action_dim, config.dual_lambda,
                            cost_from_config(config, masked), config.dual_hidden,
                            derive_seed(config.seed, kDualInit));
  if (masked)
    potentials::set_keypoints(dual, buffer.keypoints(), demos.state_matrix(), demos.action_matrix());

  policy::OtprPolicy pol = base_policy(config, env, model);
  pol.dual = &dual;
  pol.critic = &critic;
  const potentials::QFn q = policy::critic_q_fn(critic);

  potentials::DualTrainConfig dual_cfg;
  dual_cfg.batch_size = config.dual_batch;
  dual_cfg.lr = config.dual_lr;
  dual_cfg.lr_final = config.dual_lr_final;
  dual_cfg.iterations = config.finetune_dual_iters;
  dual_cfg.grad_clip = config.dual_grad_clip;
  dual_cfg.append_demo_actions = config.dual_append_demo_actions;

  Rng critic_rng(derive_seed(config.seed, kCriticBatches));
  Rng score_rng(derive_seed(config.seed, kScoreBatches));
  nn::AdamState score_opt = nn::adam_init(model.net);
  const std::uint64_t eval_seed = derive_seed(config.seed, kEvalEpisodes);
  const bool use_hdsm = config.finetune_score_loss == "hdsm";

  RunSummary summary;
  summary.config_text = config::to_text(config);
  summary.metrics_csv = out / "metrics.csv";
  summary.final_checkpoint = out / "finetune.ckpt";
  {
    std::ofstream csv = open_out(summary.metrics_csv);
    csv << kMetricsHeader << '\n';
  }
  std::ofstream dual_csv = open_out(out / "dual_curve.csv");
  dual_csv << "outer_iter,inner_iter,dual_objective\n";

  auto save_all = [&](const fs::path& path) {
    Checkpoint ck = make_score_checkpoint(model, summary.config_text);
    ck.put("dual_u", dual.u_net);
    ck.put("dual_v", dual.v_net);
    ck.put("critic_q", critic.q);
    ck.put("critic_v", critic.v);
    save_checkpoint(path, ck);
  };

  summary.initial = evaluate_policy(env, pol, config.finetune_eval_episodes, eval_seed);
  log.info("pretrained policy: success " + fmt(summary.initial.success_rate) + " return " +
           fmt(summary.initial.mean_return));
  const bool stop_enabled = config.finetune_stop_success > 0.0;
  if (stop_enabled && summary.initial.success_rate >= config.finetune_stop_success)
    summary.iterations_to_threshold = 0;

  long long env_steps = 0;
  int iter = 0;
  try {
    if (config.finetune_warmup_critic_updates > 0)
      rl::train_critic(critic, buffer, critic_cfg, config.finetune_warmup_critic_updates, critic_rng);

    for (iter = 1; iter <= config.finetune_outer_iters && !summary.iterations_to_threshold; ++iter) {
      const auto t0 = std::chrono::steady_clock::now();
      IterationMetrics m;
      m.iter = iter;

      // Transport potentials, warm-started from the previous iteration.
      if (config.finetune_dual_iters > 0) {
        dual_cfg.seed = derive_seed(derive_seed(config.seed, kDualBatches), iter);
        dual_cfg.batch_size = std::min<int>(config.dual_batch, static_cast<int>(buffer.size()));
        dual_cfg.norm_batch = std::min<int>(256, static_cast<int>(buffer.size()));
        const auto rep = potentials::train_potentials(dual, buffer, q, dual_cfg);
        m.dual_obj = rep.last_decile_mean;
        for (std::size_t k = 0; k < rep.objective_trace.size(); ++k)
          dual_csv << iter << ',' << k << ',' << fmt(rep.objective_trace[k]) << '\n';
        dual_csv.flush();
      }

      // Resampling rollouts.
      pol.mode = policy::Mode::kTrain;
      const auto seeds = episode_seeds(
          derive_seed(derive_seed(config.seed, kRolloutEpisodes), iter), config.finetune_episodes_per_iter);
      const auto episodes = rollout_episodes(
          env,
          [&](const Eigen::MatrixXd& s, std::span<const std::uint64_t> st) {
            return policy::act_batch(pol, s, st);
          },
          seeds);
      push_episodes(buffer, episodes);
      double train_success = 0.0;
      for (const auto& e : episodes) train_success += e.success ? 1.0 : 0.0;
      train_success /= static_cast<double>(episodes.size());
      for (const auto& e : episodes) env_steps += static_cast<long long>(e.length());
      m.env_steps = env_steps;

      // Critic.
      if (config.finetune_critic_updates > 0) {
        const rl::CriticLosses cl =
            rl::train_critic(critic, buffer, critic_cfg, config.finetune_critic_updates, critic_rng);
        m.critic_loss = cl.q_loss;
      }

      // Score model.
      double score_total = 0.0;
      int score_steps = 0;
      if (use_hdsm) {
        // Independent state and action draws; every pair of the cross product
        // is weighted by its compatibility.
        const auto side = static_cast<std::size_t>(std::max(
            1.0, std::round(std::sqrt(static_cast<double>(config.finetune_actor_batch)))));
        const std::size_t n = std::min(side, buffer.size());
        for (int k = 0; k < config.finetune_score_updates; ++k) {
          const rl::Batch sb = buffer.sample(n, score_rng);
          const rl::Batch ab = buffer.sample(n, score_rng);
          const Eigen::MatrixXd mask = masked ? potentials::mask_from_ids(sb.keypoint, ab.keypoint)
                                              : Eigen::MatrixXd::Ones(sb.size(), ab.size());
          const Eigen::MatrixXd h = potentials::compatibility_matrix(dual, q, sb.s, ab.a, mask);
          const auto nn_ = static_cast<Eigen::Index>(n);
          Eigen::MatrixXd cs(env.state_dim, nn_ * nn_);
          Eigen::MatrixXd ca(env.action_dim, nn_ * nn_);
          for (Eigen::Index j = 0; j < nn_; ++j) {
            cs.middleCols(j * nn_, nn_) = sb.s;
            ca.middleCols(j * nn_, nn_) = ab.a.col(j).replicate(1, nn_);
          }
          Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(h.data(), h.size());
          // Exact potentials give E[H] = 1 over the cross product; dividing by
          // the batch mean keeps the step size independent of dual error.
          if (config.finetune_normalize_weights && w.mean() > 0.0) w /= w.mean();
          const diffusion::ScoreLoss loss = diffusion::hdsm_loss(model, cs, ca, w, schedule, score_rng);
          if (loss.degenerate) continue;
          if (!std::isfinite(loss.value))
            throw NumericalError("score loss is not finite at outer iteration " + std::to_string(iter));
          nn::adam_update(score_opt, model.net, loss.grad, config.finetune_actor_lr);
          score_total += loss.value;
          ++score_steps;
        }
      } else {
        // Resampled (non-expert) transitions only.
        std::vector<std::size_t> own;
        for (std::size_t i = 0; i < buffer.size(); ++i)
          if (!buffer.at(i).expert) own.push_back(i);
        const std::size_t n =
            std::min<std::size_t>(static_cast<std::size_t>(config.finetune_actor_batch), own.size());
        for (int k = 0; k < config.finetune_score_updates && n > 0; ++k) {
          std::vector<std::size_t> pick(n);
          std::uniform_int_distribution<std::size_t> u(0, own.size() - 1);
          for (std::size_t& p : pick) p = own[u(score_rng)];
          const rl::Batch b = buffer.gather(pick);
          const diffusion::ScoreLoss loss = diffusion::dsm_loss(model, b.s, b.a, schedule, score_rng);
          if (!std::isfinite(loss.value))
            throw NumericalError("score loss is not finite at outer iteration " + std::to_string(iter));
          nn::adam_update(score_opt, model.net, loss.grad, config.finetune_actor_lr);
          score_total += loss.value;
          ++score_steps;
        }
      }
      m.score_loss = score_steps > 0 ? score_total / score_steps : 0.0;

      const EvalStats ev = evaluate_policy(env, pol, config.finetune_eval_episodes, eval_seed);
      m.mean_return = ev.mean_return;
      m.success_rate = ev.success_rate;
      m.wall_s = seconds_since(t0);
      summary.rows.push_back(m);
      {
        std::ofstream csv = open_out(summary.metrics_csv, std::ios::app);
        csv << metrics_row(m) << '\n';
        csv.flush();
        if (!csv) throw IoError("write failed for metrics.csv");
      }
      log.info("iter " + std::to_string(iter) + ": success " + fmt(m.success_rate) + " return " +
               fmt(m.mean_return) + " dual " + fmt(m.dual_obj) + " critic " + fmt(m.critic_loss) +
               " score " + fmt(m.score_loss) + " train-mode success " + fmt(train_success) + " (" + fmt(m.wall_s) + " s)");
      if (stop_enabled && ev.success_rate >= config.finetune_stop_success)
        summary.iterations_to_threshold = iter;
    }
  } catch (const NumericalError& e) {
    json diag = {{"iteration", iter}, {"error", e.what()}, {"env_steps", env_steps}};
    write_text(out / "abort.json", diag.dump(2) + "\n");
    save_all(out / "abort.ckpt");
    throw;
  }

  save_all(summary.final_checkpoint);
  summary.wall_s = seconds_since(t_start);
  write_text(out / "summary.json", summary_to_json(summary));
  return summary;
}

EvalStats cmd_eval(const config::RunConfig& config, const std::optional<fs::path>& checkpoint,
                   const Logger& log) {
  config.validate();
  const envs::EnvSpec env = env_from_config(config);
  if (config.eval_episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  const std::uint64_t seed = derive_seed(config.seed, kEvalEpisodes);
  EvalStats s;
  if (config.eval_expert) {
    s = evaluate_expert(env, config.eval_episodes, seed);
  } else {
    fs::path path = checkpoint ? *checkpoint : fs::path(config.out_dir) / "finetune.ckpt";
    if (!checkpoint && !fs::exists(path)) path = fs::path(config.out_dir) / "pretrain.ckpt";
    const diffusion::ScoreModel model = score_model_from_checkpoint(load_checkpoint(path));
    if (model.state_dim != env.state_dim || model.action_dim != env.action_dim)
      throw ConfigError("checkpoint dimensions do not match the environment");
    s = evaluate_policy(env, base_policy(config, env, model), config.eval_episodes, seed);
  }
  log.info("eval: success " + fmt(s.success_rate) + " [" + fmt(s.success_ci_low) + ", " +
           fmt(s.success_ci_high) + "], return " + fmt(s.mean_return) + " [" +
           fmt(s.return_ci_low) + ", " + fmt(s.return_ci_high) + "]");
  ensure_dir(config.out_dir);
  write_text(fs::path(config.out_dir) / "eval.json", stats_json(s).dump(2) + "\n");
  return s;
}

std::vector<AblationRow> cmd_ablate(const config::RunConfig& config, const Logger& log) {
  config.validate();
  std::vector<std::string> variants;
  if (config.ablate_kind == "guidance") variants = {"H", "Q", "A"};
  else variants = {"masked", "unmasked"};

  const fs::path root(config.out_dir);
  ensure_dir(root);
  std::vector<AblationRow> rows;
  std::ofstream csv = open_out(root / "ablation.csv");
  csv << "variant,seed,initial_success,final_success,iterations_to_threshold\n";
  for (int seed : config.ablate_seeds) {
    config::RunConfig base = config;
    base.seed = static_cast<std::uint64_t>(seed);
    const fs::path seed_dir = root / ("seed_" + std::to_string(seed));
    base.out_dir = (seed_dir / "pretrain").string();
    log.info("ablation seed " + std::to_string(seed) + ": pretraining");
    const PretrainResult pre = cmd_pretrain(base, log);
    for (const std::string& v : variants) {
      config::RunConfig run = base;
      run.out_dir = (seed_dir / v).string();
      run.finetune_checkpoint = pre.checkpoint.string();
      run.demos_path = (seed_dir / "pretrain" / "demos.bin").string();
      if (config.ablate_kind == "guidance") run.finetune_guidance = v;
      else run.finetune_masked = v == "masked";
      log.info("ablation seed " + std::to_string(seed) + ": variant " + v);
      const RunSummary s = cmd_finetune(run, log);
      AblationRow r;
      r.variant = v;
      r.seed = base.seed;
      r.initial_success = s.initial.success_rate;
      r.final_success = s.final_success();
      r.iterations_to_threshold = s.iterations_to_threshold;
      csv << r.variant << ',' << r.seed << ',' << fmt(r.initial_success) << ','
          << fmt(r.final_success) << ','
          << (r.iterations_to_threshold ? std::to_string(*r.iterations_to_threshold) : "") << '\n';
      csv.flush();
      rows.push_back(r);
    }
  }
  return rows;
}

OtDebugResult cmd_ot_debug(const config::RunConfig& config, const Logger& log) {
  config.validate();
  const int n = config.ot_debug_n;
  const int m = config.ot_debug_m;
  if (static_cast<long long>(n) * m > 4096)
    throw ConfigError("ot-debug instance too large (n * m must be <= 4096)");
  const fs::path out(config.out_dir);
  ensure_dir(out);

  // States and actions are one-hot codes; Q is a random table.
  Rng rng(config.seed);
  Eigen::MatrixXd qtab(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) qtab(i, j) = uniform01(rng);
  const Eigen::MatrixXd s_codes = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd a_codes = Eigen::MatrixXd::Identity(m, m);
  const potentials::QFn q = [qtab](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
    Eigen::VectorXd v(s.cols());
    for (Eigen::Index k = 0; k < s.cols(); ++k) {
      Eigen::Index i = 0;
      Eigen::Index j = 0;
      s.col(k).maxCoeff(&i);
      a.col(k).maxCoeff(&j);
      v[k] = qtab(i, j);
    }
    return v;
  };

  ot::CostSpec spec;
  spec.mode = ot::CostMode::kNegQ;
  spec.normalization = ot::Normalization::kNone;
  potentials::DualPair dual =
      potentials::make_dual(n, m, config.ot_debug_lambda, spec, {}, derive_seed(config.seed, 1));
  potentials::DualTrainConfig tc;
  tc.iterations = config.ot_debug_iters;
  tc.lr = config.ot_debug_lr;
  tc.lr_final = config.ot_debug_lr * 1e-2;
  tc.seed = derive_seed(config.seed, 2);
  potentials::train_potentials(
      dual,
      [&](std::size_t, Rng&) {
        potentials::DualBatch b;
        b.states = s_codes;
        b.actions = a_codes;
        return b;
      },
      q, tc);

  OtDebugResult r;
  r.cost = potentials::cost_matrix(dual, q, s_codes, a_codes);
  r.mask = Eigen::MatrixXd::Ones(n, m);
  r.compatibility = potentials::compatibility_matrix(dual, q, s_codes, a_codes);
  r.plan_estimate = potentials::plan_from_potentials(dual, q, s_codes, a_codes);
  if (n > 64 || m > 64) {
    log.info("instance larger than the exact solver supports; plan_oracle column left empty");
  } else {
    const auto oracle = ot::exact_plan_oracle(r.cost, Eigen::VectorXd::Constant(n, 1.0 / n),
                                              Eigen::VectorXd::Constant(m, 1.0 / m),
                                              config.ot_debug_lambda);
    if (!oracle.converged) log.info("exact solver did not reach its KKT tolerance");
    r.plan_oracle = oracle.plan.gamma;
  }

  std::ofstream csv = open_out(out / "ot_debug.csv");
  csv << "i,j,cost,mask,H,plan_oracle\n";
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      csv << i << ',' << j << ',' << fmt(r.cost(i, j)) << ',' << r.mask(i, j) << ','
          << fmt(r.compatibility(i, j)) << ','
          << (r.plan_oracle.size() ? fmt(r.plan_oracle(i, j)) : std::string()) << '\n';
  csv.flush();
  if (!csv) throw IoError("write failed for ot_debug.csv");
  log.info("wrote " + (out / "ot_debug.csv").string());
  return r;
}

}  // namespace otpr::harness
