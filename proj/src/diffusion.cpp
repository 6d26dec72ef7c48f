#include "otpr/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "otpr/error.hpp"

namespace otpr::diffusion {

void DiffusionSchedule::validate() const {
  if (kind == ScheduleKind::kVP) {
    if (!(beta_min > 0.0) || !(beta_max > beta_min) || !std::isfinite(beta_max))
      throw ConfigError("VP schedule needs 0 < beta_min < beta_max");
  } else {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max))
      throw ConfigError("VE schedule needs 0 < sigma_min < sigma_max");
    if (sigma_min > 1e-2) throw ConfigError("VE sigma_min must be <= 0.01");
  }
  if (sampler_steps < 1) throw ConfigError("sampler_steps must be >= 1");
}

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("diffusion time must lie in [0, 1]");
}

double vp_beta(const DiffusionSchedule& s, double t) {
  return s.beta_min + t * (s.beta_max - s.beta_min);
}

}  // namespace

KernelParams kernel_params(const DiffusionSchedule& schedule, double t) {
  check_time(t);
  if (schedule.kind == ScheduleKind::kVP) {
    const double h = -0.5 * t * t * (schedule.beta_max - schedule.beta_min) - t * schedule.beta_min;
    return {std::exp(0.5 * h), std::sqrt(-std::expm1(h))};
  }
  return {1.0, schedule.sigma_min * std::pow(schedule.sigma_max / schedule.sigma_min, t)};
}

double drift_scale(const DiffusionSchedule& schedule, double t) {
  check_time(t);
  return schedule.kind == ScheduleKind::kVP ? -0.5 * vp_beta(schedule, t) : 0.0;
}

double diffusion_sq(const DiffusionSchedule& schedule, double t) {
  check_time(t);
  if (schedule.kind == ScheduleKind::kVP) return vp_beta(schedule, t);
  const double sigma = kernel_params(schedule, t).sigma;
  return 2.0 * sigma * sigma * std::log(schedule.sigma_max / schedule.sigma_min);
}

Eigen::VectorXd perturb(const Eigen::VectorXd& a0, double t, const Eigen::VectorXd& eps,
                        const DiffusionSchedule& schedule) {
  if (a0.size() != eps.size()) throw ShapeError("perturb: action and noise lengths differ");
  const KernelParams k = kernel_params(schedule, t);
  return k.mean_scale * a0 + k.sigma * eps;
}

Eigen::VectorXd time_embedding(double t) {
  constexpr double kPi = std::numbers::pi;
  constexpr double kFreqs[4] = {0.5 * kPi, kPi, 2.0 * kPi, 4.0 * kPi};
  Eigen::VectorXd e(kTimeEmbeddingDim);
  for (int k = 0; k < 4; ++k) {
    e[2 * k] = std::sin(kFreqs[k] * t);
    e[2 * k + 1] = std::cos(kFreqs[k] * t);
  }
  return e;
}

ScoreModel make_score_model(int state_dim, int action_dim, const std::vector<int>& hidden,
                            std::uint64_t seed) {
  if (action_dim < 1 || state_dim < 0) throw ConfigError("score model dimensions are invalid");
  std::vector<int> sizes{action_dim + state_dim + kTimeEmbeddingDim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(action_dim);
  ScoreModel m;
  m.net = nn::mlp_init(sizes, nn::Activation::kSilu, seed, /*residual=*/true);
  m.state_dim = state_dim;
  m.action_dim = action_dim;
  return m;
}

Eigen::MatrixXd score_inputs(const Eigen::MatrixXd& a_t, const Eigen::MatrixXd& states,
                             const Eigen::VectorXd& t) {
  if (a_t.cols() != states.cols() || a_t.cols() != t.size())
    throw ShapeError("score inputs differ in batch size");
  Eigen::MatrixXd x(a_t.rows() + states.rows() + kTimeEmbeddingDim, a_t.cols());
  x.topRows(a_t.rows()) = a_t;
  x.middleRows(a_t.rows(), states.rows()) = states;
  for (Eigen::Index j = 0; j < t.size(); ++j)
    x.col(j).tail(kTimeEmbeddingDim) = time_embedding(t[j]);
  return x;
}

Eigen::MatrixXd score_batch(const ScoreModel& model, const Eigen::MatrixXd& a_t,
                            const Eigen::MatrixXd& states, const Eigen::VectorXd& t) {
  return nn::forward(model.net, score_inputs(a_t, states, t));
}

ScoreFn model_score_fn(const ScoreModel& model) {
  return [&model](const Eigen::MatrixXd& a_t, const Eigen::MatrixXd& states, double t) {
    return score_batch(model, a_t, states, Eigen::VectorXd::Constant(a_t.cols(), t));
  };
}

NoiseDraws draw_noise(Eigen::Index batch, int action_dim, Rng& rng) {
  NoiseDraws d;
  d.t.resize(batch);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Eigen::Index j = 0; j < batch; ++j) {
    // 1 - U[0,1) lies in (0, 1]; map onto (kMinTrainTime, 1].
    d.t[j] = kMinTrainTime + (1.0 - kMinTrainTime) * (1.0 - unif(rng));
  }
  d.eps = std_normal_matrix(action_dim, batch, rng);
  return d;
}

namespace {

ScoreLoss weighted_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& actions, const Eigen::VectorXd& sample_weights,
                        const DiffusionSchedule& schedule, const NoiseDraws& draws,
                        const WeightFn& weight_fn) {
  const Eigen::Index b = actions.cols();
  if (b == 0) throw PreconditionError("score-matching batch is empty");
  if (states.cols() != b || draws.t.size() != b || draws.eps.cols() != b ||
      draws.eps.rows() != actions.rows() || sample_weights.size() != b)
    throw ShapeError("score-matching batch pieces differ in size");
  if (actions.rows() != model.action_dim || states.rows() != model.state_dim)
    throw ShapeError("score-matching batch dimensions do not match the model");

  Eigen::MatrixXd a_t(actions.rows(), b);
  Eigen::VectorXd sigma(b);
  Eigen::VectorXd factor(b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const KernelParams k = kernel_params(schedule, draws.t[j]);
    a_t.col(j) = k.mean_scale * actions.col(j) + k.sigma * draws.eps.col(j);
    sigma[j] = k.sigma;
    const double w = weight_fn ? weight_fn(draws.t[j], k.sigma) / (k.sigma * k.sigma) : 1.0;
    factor[j] = sample_weights[j] * w / static_cast<double>(b);
  }

  nn::ForwardCache cache;
  const Eigen::MatrixXd out = nn::forward(model.net, score_inputs(a_t, states, draws.t), cache);
  Eigen::MatrixXd resid = out * sigma.asDiagonal();
  resid += draws.eps;

  ScoreLoss loss;
  loss.value = (resid.colwise().squaredNorm().transpose().array() * factor.array()).sum();
  // d/d(out_j) = 2 factor_j sigma_j (sigma_j out_j + eps_j)
  const Eigen::MatrixXd upstream = resid * (2.0 * factor.cwiseProduct(sigma)).asDiagonal();
  loss.grad = model.net.zeros_like();
  nn::backward(model.net, cache, upstream, loss.grad);
  if (!std::isfinite(loss.value)) throw NumericalError("score-matching loss is not finite");
  return loss;
}

}  // namespace

ScoreLoss dsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                   const Eigen::MatrixXd& actions, const DiffusionSchedule& schedule,
                   const NoiseDraws& draws, const WeightFn& weight) {
  return weighted_loss(model, states, actions, Eigen::VectorXd::Ones(actions.cols()), schedule,
                       draws, weight);
}

ScoreLoss dsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                   const Eigen::MatrixXd& actions, const DiffusionSchedule& schedule, Rng& rng,
                   const WeightFn& weight) {
  return dsm_loss(model, states, actions, schedule,
                  draw_noise(actions.cols(), static_cast<int>(actions.rows()), rng), weight);
}

ScoreLoss hdsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                    const Eigen::MatrixXd& actions, const Eigen::VectorXd& weights,
                    const DiffusionSchedule& schedule, const NoiseDraws& draws) {
  if (weights.size() != actions.cols()) throw ShapeError("one pairing weight per sample needed");
  if (!weights.allFinite() || (weights.array() < 0.0).any())
    throw PreconditionError("pairing weights must be finite and non-negative");
  if ((weights.array() == 0.0).all()) {
    ScoreLoss zero;
    zero.grad = model.net.zeros_like();
    zero.degenerate = true;
    return zero;
  }
  return weighted_loss(model, states, actions, weights, schedule, draws, {});
}

ScoreLoss hdsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                    const Eigen::MatrixXd& actions, const Eigen::VectorXd& weights,
                    const DiffusionSchedule& schedule, Rng& rng) {
  return hdsm_loss(model, states, actions, weights, schedule,
                   draw_noise(actions.cols(), static_cast<int>(actions.rows()), rng));
}

Eigen::MatrixXd sample_reverse_batch(const ScoreFn& score, const Eigen::MatrixXd& states,
                                     const DiffusionSchedule& schedule,
                                     const SamplerOptions& options,
                                     std::span<const std::uint64_t> seeds, int action_dim) {
  if (options.steps < 1) throw ConfigError("sampler steps must be >= 1");
  const Eigen::Index b = states.cols();
  if (static_cast<Eigen::Index>(seeds.size()) != b)
    throw ShapeError("one sampler seed per state column needed");
  if (options.box && options.box->dim() != action_dim)
    throw ShapeError("action box dimension mismatch");

  std::vector<Rng> rngs;
  rngs.reserve(seeds.size());
  for (std::uint64_t s : seeds) rngs.emplace_back(s);
  auto noise = [&](Eigen::MatrixXd& z) {
    for (Eigen::Index j = 0; j < b; ++j)
      for (Eigen::Index i = 0; i < action_dim; ++i) z(i, j) = std_normal(rngs[j]);
  };

  const double sigma_one = kernel_params(schedule, 1.0).sigma;
  Eigen::MatrixXd a(action_dim, b);
  noise(a);
  a *= sigma_one;

  const int n = options.steps;
  const double dt = 1.0 / n;
  Eigen::MatrixXd z(action_dim, b);
  for (int k = 0; k < n; ++k) {
    const double t = 1.0 - k * dt;
    const double t_next = k + 1 == n ? 0.0 : 1.0 - (k + 1) * dt;
    const Eigen::MatrixXd s = score(a, states, t);
    if (s.rows() != action_dim || s.cols() != b) throw ShapeError("score output shape mismatch");

    if (options.method == SamplerMethod::kEulerMaruyama) {
      const double g2 = diffusion_sq(schedule, t);
      a += (g2 * s - drift_scale(schedule, t) * a) * dt;
      if (k + 1 < n) {
        noise(z);
        a += std::sqrt(g2 * dt) * z;
      }
    } else {
      const KernelParams cur = kernel_params(schedule, t);
      const Eigen::MatrixXd eps_hat = -cur.sigma * s;
      Eigen::MatrixXd x0 = (a - cur.sigma * eps_hat) / cur.mean_scale;
      if (options.box) options.box->clip_columns(x0);
      if (k + 1 == n) {
        a = std::move(x0);
      } else {
        const KernelParams nxt = kernel_params(schedule, t_next);
        a = nxt.mean_scale * x0 + nxt.sigma * eps_hat;
      }
    }
    if (!a.allFinite()) throw SamplingError("non-finite value in reverse sampler", k);
  }
  if (options.box) options.box->clip_columns(a);
  return a;
}

Eigen::VectorXd sample_reverse(const ScoreFn& score, const Eigen::VectorXd& state,
                               const DiffusionSchedule& schedule, const SamplerOptions& options,
                               std::uint64_t seed, int action_dim) {
  const std::uint64_t seeds[1] = {seed};
  return sample_reverse_batch(score, state, schedule, options, seeds, action_dim).col(0);
}

namespace {

struct PerturbedComponent {
  double log_weight;
  Eigen::VectorXd mean;
  double var;
};

std::vector<PerturbedComponent> perturbed(std::span<const GaussianComponent> mixture,
                                          const Eigen::VectorXd& a_t, double t,
                                          const DiffusionSchedule& schedule) {
  if (mixture.empty()) throw PreconditionError("mixture has no components");
  const KernelParams k = kernel_params(schedule, t);
  std::vector<PerturbedComponent> out;
  for (const GaussianComponent& c : mixture) {
    if (c.mean.size() != a_t.size()) throw ShapeError("mixture mean dimension mismatch");
    if (!(c.weight >= 0.0) || !(c.std >= 0.0)) throw PreconditionError("invalid mixture component");
    const double var = k.mean_scale * k.mean_scale * c.std * c.std + k.sigma * k.sigma;
    if (!(var > 0.0)) throw RangeError("perturbed mixture has zero variance");
    out.push_back({std::log(c.weight), k.mean_scale * c.mean, var});
  }
  return out;
}

// Per-component log N(a; mean, var I) + log weight.
Eigen::VectorXd log_terms(const std::vector<PerturbedComponent>& comps, const Eigen::VectorXd& a) {
  Eigen::VectorXd lt(static_cast<Eigen::Index>(comps.size()));
  const double d = static_cast<double>(a.size());
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const auto& c = comps[i];
    lt[static_cast<Eigen::Index>(i)] =
        c.log_weight - 0.5 * (a - c.mean).squaredNorm() / c.var -
        0.5 * d * std::log(2.0 * std::numbers::pi * c.var);
  }
  return lt;
}

}  // namespace

Eigen::VectorXd analytic_gaussian_score(std::span<const GaussianComponent> mixture,
                                        const Eigen::VectorXd& a_t, double t,
                                        const DiffusionSchedule& schedule) {
  const auto comps = perturbed(mixture, a_t, t, schedule);
  const Eigen::VectorXd lt = log_terms(comps, a_t);
  const Eigen::VectorXd resp = (lt.array() - lt.maxCoeff()).exp();
  const double total = resp.sum();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(a_t.size());
  for (std::size_t i = 0; i < comps.size(); ++i)
    score += resp[static_cast<Eigen::Index>(i)] / total * (comps[i].mean - a_t) / comps[i].var;
  return score;
}

double analytic_gaussian_log_density(std::span<const GaussianComponent> mixture,
                                     const Eigen::VectorXd& a_t, double t,
                                     const DiffusionSchedule& schedule) {
  const Eigen::VectorXd lt = log_terms(perturbed(mixture, a_t, t, schedule), a_t);
  const double top = lt.maxCoeff();
  return top + std::log((lt.array() - top).exp().sum());
}

}  // namespace otpr::diffusion
