// End-to-end acceptance checks A1-A11. Prints one PASS/FAIL line per
// criterion; exits non-zero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "otpr/config.hpp"
#include "otpr/diffusion.hpp"
#include "otpr/envs.hpp"
#include "otpr/harness.hpp"
#include "otpr/nn.hpp"
#include "otpr/ot.hpp"
#include "otpr/policy.hpp"
#include "otpr/potentials.hpp"
#include "otpr/rl.hpp"

using namespace otpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sample_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

Eigen::MatrixXd one_hot(int n) { return Eigen::MatrixXd::Identity(n, n); }

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

ot::CostSpec raw_negq() {
  ot::CostSpec c;
  c.mode = ot::CostMode::kNegQ;
  c.normalization = ot::Normalization::kNone;
  return c;
}

// ---------------------------------------------------------------------------

Outcome a1_gradients() {
  constexpr double kTol = 1e-3;
  Rng rng(101);
  std::vector<std::pair<std::string, nn::FdReport>> reports;

  {
    const potentials::DualPair dual = potentials::make_dual(3, 2, 0.05, raw_negq(), {8, 8}, 5);
    const Eigen::MatrixXd s = std_normal_matrix(3, 3, rng);
    const Eigen::MatrixXd a = std_normal_matrix(2, 3, rng);
    const Eigen::MatrixXd cost = 0.1 * std_normal_matrix(3, 3, rng);
    const Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(3, 3);
    reports.emplace_back("dual/u", nn::finite_diff_check(
                                       [&](const nn::ParamSet& p) {
                                         potentials::DualPair d = dual;
                                         d.u_net = p;
                                         const auto g = potentials::dual_gradient(d, s, a, cost, mask);
                                         return nn::LossAndGrad{g.objective, g.u_grad};
                                       },
                                       dual.u_net, kTol));
    reports.emplace_back("dual/v", nn::finite_diff_check(
                                       [&](const nn::ParamSet& p) {
                                         potentials::DualPair d = dual;
                                         d.v_net = p;
                                         const auto g = potentials::dual_gradient(d, s, a, cost, mask);
                                         return nn::LossAndGrad{g.objective, g.v_grad};
                                       },
                                       dual.v_net, kTol));
  }
  {
    const diffusion::ScoreModel m = diffusion::make_score_model(2, 2, {8, 8, 8}, 11);
    const Eigen::MatrixXd s = std_normal_matrix(2, 3, rng);
    const Eigen::MatrixXd a = std_normal_matrix(2, 3, rng);
    const diffusion::NoiseDraws d = diffusion::draw_noise(3, 2, rng);
    const Eigen::Vector3d w(0.3, 1.4, 0.0);
    const diffusion::DiffusionSchedule sched;
    auto with = [&](auto f) {
      return [&, f](const nn::ParamSet& p) {
        diffusion::ScoreModel mm = m;
        mm.net = p;
        const diffusion::ScoreLoss l = f(mm);
        return nn::LossAndGrad{l.value, l.grad};
      };
    };
    reports.emplace_back("dsm", nn::finite_diff_check(
                                    with([&](const diffusion::ScoreModel& mm) {
                                      return diffusion::dsm_loss(mm, s, a, sched, d);
                                    }),
                                    m.net, kTol));
    reports.emplace_back("hdsm", nn::finite_diff_check(
                                     with([&](const diffusion::ScoreModel& mm) {
                                       return diffusion::hdsm_loss(mm, s, a, w, sched, d);
                                     }),
                                     m.net, kTol));
  }
  {
    rl::CriticConfig cfg;
    cfg.hidden = {8, 8};
    const rl::CriticPair c = rl::make_critic(2, 2, cfg, 3);
    rl::Batch b;
    b.s = std_normal_matrix(2, 3, rng);
    b.a = std_normal_matrix(2, 3, rng);
    b.r = Eigen::Vector3d(0.0, 1.0, 0.5);
    b.s_next = std_normal_matrix(2, 3, rng);
    b.done = Eigen::Vector3d(0.0, 1.0, 0.0);
    b.keypoint.resize(3);
    const Eigen::VectorXd target = rl::q_values(c.target_q, b.s, b.a).array() + 0.3;
    const Eigen::VectorXd next_v = rl::v_values(c.v, b.s_next);
    reports.emplace_back("critic/v", nn::finite_diff_check(
                                         [&](const nn::ParamSet& p) {
                                           return rl::value_loss(p, b.s, target, cfg.expectile);
                                         },
                                         c.v, kTol));
    reports.emplace_back("critic/q", nn::finite_diff_check(
                                         [&](const nn::ParamSet& p) {
                                           return rl::q_loss(p, b, next_v, cfg.discount);
                                         },
                                         c.q, kTol));
  }

  Outcome o{true, ""};
  for (const auto& [name, r] : reports) {
    o.pass = o.pass && r.pass;
    o.detail += name + " " + num(r.max_rel_error, 2) + (r.pass ? "" : " (fail)") + "; ";
  }
  o.detail = "max relative error: " + o.detail;
  return o;
}

Outcome a2_dual_vs_oracle() {
  Outcome o{true, ""};
  int instance = 0;
  for (const int n : {2, 4, 8}) {
    for (const double lambda : {0.1, 0.01}) {
      Rng rng(derive_seed(202, static_cast<std::uint64_t>(instance++)));
      Eigen::MatrixXd q(n, n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) q(i, j) = uniform01(rng);
      potentials::DualPair dual = potentials::make_dual(n, n, lambda, raw_negq(), {}, 7);
      // Independent minibatches of states and actions drawn uniformly with
      // replacement, as in the stochastic solver.
      potentials::DualTrainConfig cfg;
      cfg.batch_size = 16;
      cfg.iterations = 20000;
      cfg.lr = 1e-2;
      cfg.lr_final = 1e-5;
      cfg.seed = derive_seed(203, static_cast<std::uint64_t>(instance));
      const auto sampler = [n](std::size_t b, Rng& r) {
        potentials::DualBatch out;
        out.states.resize(n, static_cast<Eigen::Index>(b));
        out.actions.resize(n, static_cast<Eigen::Index>(b));
        std::uniform_int_distribution<int> pick(0, n - 1);
        for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(b); ++k) {
          out.states.col(k) = one_hot(n).col(pick(r));
          out.actions.col(k) = one_hot(n).col(pick(r));
        }
        return out;
      };
      potentials::train_potentials(dual, sampler, table_q(q), cfg);
      const Eigen::MatrixXd plan =
          potentials::plan_from_potentials(dual, table_q(q), one_hot(n), one_hot(n));
      const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / n);
      const ot::OracleResult oracle = ot::exact_plan_oracle(-q, uniform, uniform, lambda);
      const double l1 = (plan - oracle.plan.gamma).cwiseAbs().sum();
      const double tol = n == 2 ? 0.05 : 0.10;
      const bool ok = oracle.converged && l1 <= tol;
      o.pass = o.pass && ok;
      o.detail += std::to_string(n) + "x" + std::to_string(n) + " lambda " + num(lambda) + ": L1 " +
                  num(l1, 3) + (ok ? "" : " (fail)") + "; ";
    }
  }
  return o;
}

Outcome a3_limits() {
  Eigen::Matrix2d c;
  c << 0.2, 1.0, 0.9, 0.1;
  const Eigen::Vector2d mu(0.5, 0.5);
  const ot::OracleResult heavy = ot::exact_plan_oracle(c, mu, mu, 100.0);
  const double dev_heavy = (heavy.plan.gamma.array() - 0.25).abs().maxCoeff();

  // Unregularized optimum: with uniform marginals the feasible 2x2 plans are
  // [[x, 1/2 - x], [1/2 - x, x]], x in [0, 1/2]; the linear cost is minimized
  // at an endpoint.
  const double slope = c(0, 0) + c(1, 1) - c(0, 1) - c(1, 0);
  const double x = slope < 0.0 ? 0.5 : 0.0;
  Eigen::Matrix2d exact;
  exact << x, 0.5 - x, 0.5 - x, x;
  const ot::OracleResult light = ot::exact_plan_oracle(c, mu, mu, 1e-3);
  const double dev_light = (light.plan.gamma - exact).cwiseAbs().maxCoeff();

  const bool ok = heavy.converged && light.converged && dev_heavy <= 1e-3 && dev_light <= 1e-3;
  return {ok, "lambda=100: max |plan - mu nu^T| " + num(dev_heavy, 3) +
                  "; lambda=1e-3: max |plan - unregularized| " + num(dev_light, 3)};
}

Outcome a4_score_fidelity() {
  const diffusion::DiffusionSchedule sched;
  std::vector<diffusion::GaussianComponent> mix(2);
  mix[0] = {0.6, Eigen::Vector2d(0.4, 0.3), 0.2};
  mix[1] = {0.4, Eigen::Vector2d(-0.4, -0.3), 0.2};

  diffusion::ScoreModel m = diffusion::make_score_model(1, 2, {128, 128, 128}, 41);
  nn::AdamState opt = nn::adam_init(m.net);
  Rng rng(42);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int steps = 8000;
  const int batch = 256;
  const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(1, batch);
  for (int step = 0; step < steps; ++step) {
    Eigen::MatrixXd a(2, batch);
    for (int j = 0; j < batch; ++j) {
      const auto& c = unif(rng) < mix[0].weight ? mix[0] : mix[1];
      a.col(j) = c.mean + c.std * std_normal_matrix(2, 1, rng);
    }
    const double lr = 2e-3 * (1.0 - 0.99 * static_cast<double>(step) / steps);
    const diffusion::ScoreLoss l = diffusion::dsm_loss(m, zeros, a, sched, rng);
    nn::adam_update(opt, m.net, l.grad, lr);
  }

  Outcome o{true, ""};
  const int g = 21;
  Eigen::MatrixXd grid(2, g * g);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) grid.col(i * g + j) = Eigen::Vector2d(-1.0 + 0.1 * i, -1.0 + 0.1 * j);
  for (const double t : {0.1, 0.5, 0.9}) {
    const Eigen::MatrixXd model = diffusion::score_batch(m, grid, Eigen::MatrixXd::Zero(1, g * g),
                                                         Eigen::VectorXd::Constant(g * g, t));
    Eigen::MatrixXd truth(2, g * g);
    for (int k = 0; k < g * g; ++k)
      truth.col(k) = diffusion::analytic_gaussian_score(mix, grid.col(k), t, sched);
    const double rel = (model - truth).norm() / truth.norm();
    const bool ok = rel < 0.05;
    o.pass = o.pass && ok;
    o.detail += "t=" + num(t) + ": rel L2 " + num(rel, 3) + (ok ? "" : " (fail)") + "; ";
  }
  return o;
}

Outcome a5_theorem_check() {
  const diffusion::DiffusionSchedule sched;
  // Two states, four action atoms, an asymmetric Q and a moderately
  // regularized exact plan.
  const Eigen::MatrixXd states = (Eigen::MatrixXd(1, 2) << -1.0, 1.0).finished();
  Eigen::MatrixXd atoms(2, 4);
  atoms << 0.5, 0.5, -0.5, -0.5,
           0.5, -0.5, 0.5, -0.5;
  Eigen::MatrixXd q(2, 4);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) q(i, j) = states(0, i) * atoms(0, j) + 0.3 * atoms(1, j);
  const Eigen::Vector2d mu(0.5, 0.5);
  const Eigen::Vector4d nu = Eigen::Vector4d::Constant(0.25);
  const ot::OracleResult oracle = ot::exact_plan_oracle(-q, mu, nu, 0.2);
  const Eigen::MatrixXd h = oracle.plan.gamma.array() / (mu * nu.transpose()).array();

  const diffusion::ScoreModel m = diffusion::make_score_model(1, 2, {32, 32}, 51);
  const int n = 10000;
  Rng rng(52);
  std::uniform_int_distribution<int> pick_s(0, 1);
  std::uniform_int_distribution<int> pick_a(0, 3);
  Eigen::MatrixXd s(1, n);
  Eigen::MatrixXd a(2, n);
  Eigen::VectorXd w(n);
  std::vector<int> si(n);
  for (int k = 0; k < n; ++k) {
    si[k] = pick_s(rng);
    const int aj = pick_a(rng);
    s(0, k) = states(0, si[k]);
    a.col(k) = atoms.col(aj);
    w[k] = h(si[k], aj);
  }
  const diffusion::NoiseDraws d = diffusion::draw_noise(n, 2, rng);
  const diffusion::ScoreLoss hd = diffusion::hdsm_loss(m, s, a, w, sched, d);

  // Analytic conditional-score loss on the same (s, a_t, t):
  // mean_k w_k sigma_k^2 || s_theta - grad log p_t(a_t | s) ||^2, where the
  // conditional is the plan row of s over the atoms.
  std::vector<std::vector<diffusion::GaussianComponent>> cond(2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j)
      cond[i].push_back({oracle.plan.gamma(i, j) / mu[i], atoms.col(j), 0.0});
  Eigen::MatrixXd a_t(2, n);
  Eigen::MatrixXd target(2, n);
  Eigen::VectorXd sigma(n);
  for (int k = 0; k < n; ++k) {
    const diffusion::KernelParams kp = diffusion::kernel_params(sched, d.t[k]);
    a_t.col(k) = kp.mean_scale * a.col(k) + kp.sigma * d.eps.col(k);
    sigma[k] = kp.sigma;
    target.col(k) = diffusion::analytic_gaussian_score(cond[si[k]], a_t.col(k), d.t[k], sched);
  }
  nn::ForwardCache cache;
  const Eigen::MatrixXd out = nn::forward(m.net, diffusion::score_inputs(a_t, s, d.t), cache);
  Eigen::MatrixXd upstream = out - target;
  for (int k = 0; k < n; ++k) upstream.col(k) *= 2.0 * w[k] * sigma[k] * sigma[k] / n;
  nn::ParamSet grad = m.net.zeros_like();
  nn::backward(m.net, cache, upstream, grad);

  const Eigen::VectorXd g1 = hd.grad.values();
  const Eigen::VectorXd g2 = grad.values();
  const double cosine = g1.dot(g2) / (g1.norm() * g2.norm());
  return {cosine >= 0.99 && oracle.converged, "cosine similarity " + num(cosine, 5)};
}

Outcome a9_dirac_reduction() {
  double worst_value = 0.0;
  double worst_grad = 0.0;
  const diffusion::DiffusionSchedule sched;
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(derive_seed(909, static_cast<std::uint64_t>(trial)));
    const diffusion::ScoreModel m =
        diffusion::make_score_model(3, 2, {16, 16}, derive_seed(910, static_cast<std::uint64_t>(trial)));
    const Eigen::Index b = 4 + trial % 3;
    const Eigen::MatrixXd s = std_normal_matrix(3, b, rng);
    const Eigen::MatrixXd a = std_normal_matrix(2, b, rng);
    const diffusion::NoiseDraws d = diffusion::draw_noise(b, 2, rng);
    const diffusion::NoiseDraws filler = diffusion::draw_noise(b * b, 2, rng);

    // Cross product of the batch; the coupling density of the true pairing
    // is b on the diagonal and zero elsewhere.
    Eigen::MatrixXd cs(3, b * b);
    Eigen::MatrixXd ca(2, b * b);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(b * b);
    diffusion::NoiseDraws cd = filler;
    for (Eigen::Index i = 0; i < b; ++i) {
      for (Eigen::Index j = 0; j < b; ++j) {
        const Eigen::Index k = i * b + j;
        cs.col(k) = s.col(i);
        ca.col(k) = a.col(j);
        if (i == j) {
          w[k] = static_cast<double>(b);
          cd.t[k] = d.t[i];
          cd.eps.col(k) = d.eps.col(i);
        }
      }
    }
    const diffusion::ScoreLoss paired = diffusion::dsm_loss(m, s, a, sched, d);
    const diffusion::ScoreLoss dirac = diffusion::hdsm_loss(m, cs, ca, w, sched, cd);
    worst_value = std::max(worst_value, std::abs(dirac.value - paired.value) / std::abs(paired.value));
    worst_grad = std::max(worst_grad, (dirac.grad.values() - paired.grad.values()).cwiseAbs().maxCoeff() /
                                          paired.grad.values().cwiseAbs().maxCoeff());
  }
  const bool ok = worst_value <= 1e-12 && worst_grad <= 1e-12;
  return {ok, "max relative difference: loss " + num(worst_value, 3) + ", gradient " +
                  num(worst_grad, 3)};
}

Outcome a10_bandit(const fs::path& work) {
  config::RunConfig c;
  c.seed = 10;
  c.out_dir = (work / "a10").string();
  c.env_name = "bandit2d";
  c.env_reward = "dense";
  c.demos_count = 1000;
  c.model_hidden = {64, 64};
  c.model_sampler_steps = 10;
  c.pretrain_epochs = 2000;
  c.pretrain_lr = 1e-3;
  const harness::Logger quiet(true);
  const harness::PretrainResult pre = harness::cmd_pretrain(c, quiet);
  const envs::EnvSpec env = harness::env_from_config(c);

  const potentials::QFn exact_q = [env](const Eigen::MatrixXd&, const Eigen::MatrixXd& a) {
    Eigen::VectorXd out(a.cols());
    for (Eigen::Index k = 0; k < a.cols(); ++k) out[k] = envs::bandit_reward(env, a.col(k));
    return out;
  };
  rl::ReplayBuffer buffer(10000, true);
  pre.demos.push_to(buffer);
  ot::CostSpec cost;
  cost.mode = ot::CostMode::kNegQ;
  potentials::DualPair dual = potentials::make_dual(2, 2, 0.01, cost, {64, 64}, 11);
  potentials::DualTrainConfig dc;
  dc.batch_size = 64;
  dc.iterations = 3000;
  dc.lr = 1e-3;
  dc.lr_final = 1e-5;
  dc.seed = 12;
  const auto report = potentials::train_potentials(dual, buffer, exact_q, dc);

  policy::OtprPolicy p;
  p.score = &pre.model;
  p.schedule = harness::schedule_from_config(c);
  p.sampler = harness::sampler_from_config(c, env);
  p.dual = &dual;
  p.q_override = exact_q;
  p.num_proposals = 8;
  p.guidance = policy::Guidance::kH;
  p.mode = policy::Mode::kTrain;

  const int episodes = 1000;
  const auto seeds = harness::episode_seeds(13, episodes);
  Eigen::MatrixXd states(2, episodes);
  std::vector<std::uint64_t> act_seeds(episodes);
  for (int k = 0; k < episodes; ++k) {
    states.col(k) = envs::env_reset(env, seeds[k]);
    act_seeds[k] = derive_seed(seeds[k], 1);
  }
  const Eigen::MatrixXd actions = policy::act_batch(p, states, act_seeds);
  double policy_reward = 0.0;
  for (int k = 0; k < episodes; ++k) policy_reward += envs::env_step(env, states.col(k), actions.col(k)).reward;
  policy_reward /= episodes;
  const double expert = harness::evaluate_expert(env, episodes, 13).mean_return;
  const bool ok = policy_reward >= 0.98 * expert;
  return {ok, "train-mode reward " + num(policy_reward) + " vs expert " + num(expert) + " (ratio " +
                  num(policy_reward / expert) + "); dual objective " +
                  num(report.first_decile_mean) + " -> " + num(report.last_decile_mean)};
}

// Metrics CSV with the wall-clock column dropped.
std::string metrics_without_wall(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::string out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Outcome a11_determinism(const fs::path& work) {
  const harness::Logger quiet(true);
  std::vector<std::string> pre;
  std::vector<std::string> fine;
  for (const char* run : {"run1", "run2"}) {
    config::RunConfig c = config::load_config(fs::path(OTPR_SOURCE_DIR) / "configs/pointmass.cfg");
    c.seed = 3;
    c.out_dir = (work / "a11" / run).string();
    fs::remove_all(c.out_dir);
    c.pretrain_epochs = 30;
    c.finetune_outer_iters = 3;
    c.finetune_stop_success = 0.0;
    c.finetune_dual_iters = 50;
    c.finetune_critic_updates = 20;
    c.finetune_score_updates = 10;
    c.finetune_eval_episodes = 10;
    harness::cmd_pretrain(c, quiet);
    const harness::RunSummary s = harness::cmd_finetune(c, quiet);
    pre.push_back(slurp(fs::path(c.out_dir) / "pretrain_loss.csv"));
    fine.push_back(metrics_without_wall(s.metrics_csv));
  }
  const bool same_pre = pre[0] == pre[1] && !pre[0].empty();
  const bool same_fine = fine[0] == fine[1] && std::count(fine[0].begin(), fine[0].end(), '\n') == 4;
  return {same_pre && same_fine, std::string("pretrain loss curves ") +
                                     (same_pre ? "identical" : "differ") + "; finetune metrics " +
                                     (same_fine ? "identical" : "differ") + " (wall_s excluded)"};
}

// Shared by A6-A8: the 5-seed ablations on the sparse point-mass config.
struct AblationRuns {
  std::vector<harness::AblationRow> guidance;
  std::map<std::uint64_t, double> h_wall_s;
  double guidance_wall_s = 0.0;
  std::vector<harness::AblationRow> mask;
  double mask_wall_s = 0.0;
  int outer_iters = 0;
  int mask_iters = 0;
};

constexpr int kMaskBudget = 20;

config::RunConfig toy_config(const fs::path& out) {
  config::RunConfig c = config::load_config(fs::path(OTPR_SOURCE_DIR) / "configs/pointmass.cfg");
  c.out_dir = out.string();
  c.ablate_seeds = {0, 1, 2, 3, 4};
  return c;
}

const AblationRuns& guidance_runs(const fs::path& work, AblationRuns& runs, bool& done) {
  if (done) return runs;
  done = true;
  config::RunConfig c = toy_config(work / "guidance");
  c.ablate_kind = "guidance";
  runs.outer_iters = c.finetune_outer_iters;
  const harness::Logger log(false);
  const auto t0 = std::chrono::steady_clock::now();
  runs.guidance = harness::cmd_ablate(c, log);
  runs.guidance_wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& r : runs.guidance) {
    if (r.variant != "H") continue;
    const auto j = nlohmann::json::parse(
        slurp(work / "guidance" / ("seed_" + std::to_string(r.seed)) / "H" / "summary.json"));
    runs.h_wall_s[r.seed] = j.at("wall_s").get<double>();
  }
  return runs;
}

const AblationRuns& mask_runs(const fs::path& work, AblationRuns& runs, bool& done) {
  if (done) return runs;
  done = true;
  config::RunConfig c = toy_config(work / "mask");
  c.ablate_kind = "mask";
  c.finetune_outer_iters = kMaskBudget;
  c.finetune_stop_success = 0.0;
  runs.mask_iters = kMaskBudget;
  const harness::Logger log(false);
  const auto t0 = std::chrono::steady_clock::now();
  runs.mask = harness::cmd_ablate(c, log);
  runs.mask_wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return runs;
}

// Iterations to threshold with unreached runs counted as outer_iters + 1.
std::vector<double> iterations(const std::vector<harness::AblationRow>& rows, const std::string& variant,
                               int outer_iters) {
  std::vector<double> out;
  for (const auto& r : rows)
    if (r.variant == variant)
      out.push_back(r.iterations_to_threshold ? *r.iterations_to_threshold : outer_iters + 1.0);
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i], 3);
  return s;
}

Outcome a6_end_to_end(const AblationRuns& runs) {
  std::vector<double> initial;
  double wall = 0.0;
  for (const auto& r : runs.guidance)
    if (r.variant == "H") initial.push_back(r.initial_success);
  for (const auto& [seed, w] : runs.h_wall_s) wall += w;
  const std::vector<double> iters = iterations(runs.guidance, "H", runs.outer_iters);
  const double med_init = median(initial);
  const double med_iters = median(iters);
  const bool ok = med_init >= 0.6 && med_iters <= 200 && wall < 1800.0;
  return {ok, "pretrained success per seed [" + join(initial) + "] (median " + num(med_init) +
                  "); iterations to 90% [" + join(iters) + "] (median " + num(med_iters) +
                  "); fine-tuning wall time " + num(wall, 4) + " s"};
}

Outcome a7_guidance(const AblationRuns& runs) {
  const double h = median(iterations(runs.guidance, "H", runs.outer_iters));
  const double q = median(iterations(runs.guidance, "Q", runs.outer_iters));
  const double a = median(iterations(runs.guidance, "A", runs.outer_iters));
  const bool ok = h <= q && h <= a;
  return {ok, "median iterations to 90%: H " + num(h) + ", Q " + num(q) + ", A " + num(a) +
                  " (unreached = " + std::to_string(runs.outer_iters + 1) + "); per seed H [" +
                  join(iterations(runs.guidance, "H", runs.outer_iters)) + "] Q [" +
                  join(iterations(runs.guidance, "Q", runs.outer_iters)) + "] A [" +
                  join(iterations(runs.guidance, "A", runs.outer_iters)) + "]; ablation wall time " +
                  num(runs.guidance_wall_s, 4) + " s"};
}

Outcome a8_mask(const AblationRuns& runs) {
  std::vector<double> masked;
  std::vector<double> unmasked;
  for (const auto& r : runs.mask) (r.variant == "masked" ? masked : unmasked).push_back(r.final_success);
  const double sm = sample_std(masked);
  const double su = sample_std(unmasked);
  return {sm <= su, "final success after " + std::to_string(runs.mask_iters) + " iterations: masked [" +
                        join(masked) + "] std " + num(sm, 3) + ", unmasked [" + join(unmasked) +
                        "] std " + num(su, 3) + "; wall time " + num(runs.mask_wall_s, 4) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<std::string> only;
  std::string work = "acceptance_runs";
  app.add_option("--only", only, "Run only these criteria (e.g. A1 A9)")->delimiter(',');
  app.add_option("--work", work, "Scratch directory for run artifacts");
  CLI11_PARSE(app, argc, argv);

  const fs::path work_dir(work);
  fs::create_directories(work_dir);
  AblationRuns runs;
  bool guidance_done = false;
  bool mask_done = false;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"A1", a1_gradients},
      {"A2", a2_dual_vs_oracle},
      {"A3", a3_limits},
      {"A4", a4_score_fidelity},
      {"A5", a5_theorem_check},
      {"A6", [&] { return a6_end_to_end(guidance_runs(work_dir, runs, guidance_done)); }},
      {"A7", [&] { return a7_guidance(guidance_runs(work_dir, runs, guidance_done)); }},
      {"A8", [&] { return a8_mask(mask_runs(work_dir, runs, mask_done)); }},
      {"A9", a9_dirac_reduction},
      {"A10", [&] { return a10_bandit(work_dir); }},
      {"A11", [&] { return a11_determinism(work_dir); }},
  };
  const std::set<std::string> selected(only.begin(), only.end());

  int failed = 0;
  std::vector<std::string> lines;
  for (const auto& [id, run] : checks) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream line;
    line << id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << " [" << std::fixed
         << std::setprecision(1) << secs << " s]";
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
    if (!o.pass) ++failed;
  }
  std::cout << "\nsummary\n";
  for (const std::string& l : lines) std::cout << l.substr(0, l.find("  ")) << "\n";
  std::cout << (lines.size() - failed) << "/" << lines.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
