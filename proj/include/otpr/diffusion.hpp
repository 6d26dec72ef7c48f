#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "otpr/box.hpp"
#include "otpr/nn.hpp"
#include "otpr/rng.hpp"

namespace otpr::diffusion {

enum class ScheduleKind { kVP, kVE };

// Forward SDE on t in [0, 1].
//   VP: da = -beta(t)/2 a dt + sqrt(beta(t)) dW, beta(t) = beta_min + t (beta_max - beta_min)
//   VE: da = sqrt(d sigma^2/dt) dW, sigma(t) = sigma_min (sigma_max / sigma_min)^t
struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::kVP;
  double beta_min = 0.1;
  double beta_max = 20.0;
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  int sampler_steps = 20;

  void validate() const;
};

struct KernelParams {
  double mean_scale = 1.0;
  double sigma = 0.0;
};

// Perturbation kernel a_t | a_0 ~ N(mean_scale a_0, sigma^2 I).
KernelParams kernel_params(const DiffusionSchedule& schedule, double t);

// Drift scale f(t) (drift = f(t) * a) and squared diffusion g(t)^2.
double drift_scale(const DiffusionSchedule& schedule, double t);
double diffusion_sq(const DiffusionSchedule& schedule, double t);

Eigen::VectorXd perturb(const Eigen::VectorXd& a0, double t, const Eigen::VectorXd& eps,
                        const DiffusionSchedule& schedule);

inline constexpr int kTimeEmbeddingDim = 8;
// (sin, cos) of t at four fixed frequencies.
Eigen::VectorXd time_embedding(double t);

// Score network s(a_t; s, t). Input is [a_t; s; embed(t)]; hidden layers are
// SiLU with two-layer residual blocks.
struct ScoreModel {
  nn::ParamSet net;
  int state_dim = 0;
  int action_dim = 0;
};

ScoreModel make_score_model(int state_dim, int action_dim, const std::vector<int>& hidden,
                            std::uint64_t seed);

Eigen::MatrixXd score_inputs(const Eigen::MatrixXd& a_t, const Eigen::MatrixXd& states,
                             const Eigen::VectorXd& t);

// Scores for columns of a_t/states at per-column times t.
Eigen::MatrixXd score_batch(const ScoreModel& model, const Eigen::MatrixXd& a_t,
                            const Eigen::MatrixXd& states, const Eigen::VectorXd& t);

// Score field evaluated at a shared time for every column.
using ScoreFn =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& a_t, const Eigen::MatrixXd& states,
                                  double t)>;

ScoreFn model_score_fn(const ScoreModel& model);

inline constexpr double kMinTrainTime = 1e-3;

// Frozen randomness of one loss evaluation: t_i ~ U(kMinTrainTime, 1], eps ~ N(0, I).
struct NoiseDraws {
  Eigen::VectorXd t;
  Eigen::MatrixXd eps;
};

NoiseDraws draw_noise(Eigen::Index batch, int action_dim, Rng& rng);

// Loss weight w_t as a function of (t, sigma_t); empty means w_t = sigma_t^2.
using WeightFn = std::function<double(double t, double sigma)>;

struct ScoreLoss {
  double value = 0.0;
  nn::ParamSet grad;
  bool degenerate = false;
};

// mean_i (w_t / sigma^2) || sigma s(a_t; s, t) + eps ||^2
ScoreLoss dsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                   const Eigen::MatrixXd& actions, const DiffusionSchedule& schedule,
                   const NoiseDraws& draws, const WeightFn& weight = {});
ScoreLoss dsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                   const Eigen::MatrixXd& actions, const DiffusionSchedule& schedule, Rng& rng,
                   const WeightFn& weight = {});

// dsm_loss with each per-sample term scaled by a non-negative pairing weight
// (batch mean, no renormalization). Weights carry no gradient. If every
// weight is zero the loss and gradient are zero and `degenerate` is set.
ScoreLoss hdsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                    const Eigen::MatrixXd& actions, const Eigen::VectorXd& weights,
                    const DiffusionSchedule& schedule, const NoiseDraws& draws);
ScoreLoss hdsm_loss(const ScoreModel& model, const Eigen::MatrixXd& states,
                    const Eigen::MatrixXd& actions, const Eigen::VectorXd& weights,
                    const DiffusionSchedule& schedule, Rng& rng);

enum class SamplerMethod { kEulerMaruyama, kDdim };

struct SamplerOptions {
  SamplerMethod method = SamplerMethod::kDdim;
  int steps = 20;
  std::optional<ActionBox> box;
};

// Integrates from t = 1 to t = 0 on a uniform grid, one column per state.
// Column j draws its initial noise (and Euler-Maruyama noise) from
// Rng(seeds[j]), so a column's result does not depend on the rest of the batch.
Eigen::MatrixXd sample_reverse_batch(const ScoreFn& score, const Eigen::MatrixXd& states,
                                     const DiffusionSchedule& schedule,
                                     const SamplerOptions& options,
                                     std::span<const std::uint64_t> seeds, int action_dim);

Eigen::VectorXd sample_reverse(const ScoreFn& score, const Eigen::VectorXd& state,
                               const DiffusionSchedule& schedule, const SamplerOptions& options,
                               std::uint64_t seed, int action_dim);

struct GaussianComponent {
  double weight = 1.0;
  Eigen::VectorXd mean;
  double std = 0.0;  // isotropic
};

// Exact score and log-density of a Gaussian mixture pushed through the
// forward kernel at time t.
Eigen::VectorXd analytic_gaussian_score(std::span<const GaussianComponent> mixture,
                                        const Eigen::VectorXd& a_t, double t,
                                        const DiffusionSchedule& schedule);
double analytic_gaussian_log_density(std::span<const GaussianComponent> mixture,
                                     const Eigen::VectorXd& a_t, double t,
                                     const DiffusionSchedule& schedule);

}  // namespace otpr::diffusion
