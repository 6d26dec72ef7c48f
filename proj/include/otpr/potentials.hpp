#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "otpr/nn.hpp"
#include "otpr/ot.hpp"
#include "otpr/rl.hpp"
#include "otpr/rng.hpp"

namespace otpr::potentials {

// Q(s, a) for paired columns of S and A.
using QFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a)>;

// Affine map applied to -Q before it is used as a cost. Refreshed at the start
// of each train_potentials call and then held fixed, so training and later
// compatibility evaluations see the same cost function.
struct CostNormalization {
  double mean = 0.0;
  double std = 1.0;
};

struct DualPair {
  nn::ParamSet u_net;  // state -> R
  nn::ParamSet v_net;  // action -> R
  double lambda = 1e-5;
  ot::CostSpec cost_spec;
  std::optional<ot::KeypointSet> keypoints;
  ot::RelationConfig state_relation;
  ot::RelationConfig action_relation;
  CostNormalization cost_norm;
  nn::AdamState u_opt;
  nn::AdamState v_opt;

  void validate() const;
  bool masked() const { return keypoints.has_value() && !keypoints->empty(); }
};

// Potential networks [dim, hidden..., 1] with the given hidden activation.
DualPair make_dual(int state_dim, int action_dim, double lambda, const ot::CostSpec& cost,
                   const std::vector<int>& hidden, std::uint64_t seed,
                   nn::Activation activation = nn::Activation::kTanh);

// Installs keypoints and sets both relation temperatures by the median
// heuristic over the given sample of states/actions.
void set_keypoints(DualPair& dual, ot::KeypointSet keypoints, const Eigen::MatrixXd& state_sample,
                   const Eigen::MatrixXd& action_sample);

// Cost c(s_i, a_j) for all pairs (b x m) or for paired columns.
Eigen::MatrixXd cost_matrix(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                            const Eigen::MatrixXd& actions);
Eigen::VectorXd pair_costs(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                           const Eigen::MatrixXd& actions);

// Recomputes cost_norm from the cross product of the given samples.
void refresh_cost_normalization(DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& actions);

// Keypoint mask from provenance ids (b x m).
Eigen::MatrixXd mask_from_ids(const std::vector<std::optional<std::size_t>>& state_ids,
                              const std::vector<std::optional<std::size_t>>& action_ids);

// Keypoint mask by geometric matching against dual.keypoints; all ones when
// the dual is unmasked.
Eigen::MatrixXd geometric_mask(const DualPair& dual, const Eigen::MatrixXd& states,
                               const Eigen::MatrixXd& actions);

// mean_i u_i + mean_j v_j + mean_ij F(u_i, v_j, cost_ij, mask_ij)
double dual_objective_from_values(const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                                  const Eigen::MatrixXd& cost, const Eigen::MatrixXd& mask,
                                  double lambda);

// Dual objective over the batch cross product. Without a mask argument the
// geometric mask of dual.keypoints is used.
double dual_objective_batch(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                            const Eigen::MatrixXd& actions,
                            const std::optional<Eigen::MatrixXd>& mask = std::nullopt);

struct DualGradient {
  double objective = 0.0;
  nn::ParamSet u_grad;  // gradient of the objective (ascent direction)
  nn::ParamSet v_grad;
};

// Objective and its parameter gradients for fixed costs and mask.
DualGradient dual_gradient(const DualPair& dual, const Eigen::MatrixXd& states,
                           const Eigen::MatrixXd& actions, const Eigen::MatrixXd& cost,
                           const Eigen::MatrixXd& mask);

// H(s_i, a_j) = mask * (u + v - c)_+ / (2 lambda) over the cross product.
Eigen::MatrixXd compatibility_matrix(const DualPair& dual, const QFn& q,
                                     const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                     const std::optional<Eigen::MatrixXd>& mask = std::nullopt);

// H for paired columns, with the geometric mask.
Eigen::VectorXd compatibility_pairs(const DualPair& dual, const QFn& q,
                                    const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions);

// Estimated plan H_ij * mu_i * nu_j (uniform weights when omitted).
Eigen::MatrixXd plan_from_potentials(const DualPair& dual, const QFn& q,
                                     const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                     const std::optional<Eigen::MatrixXd>& mask = std::nullopt,
                                     const std::optional<Eigen::VectorXd>& mu = std::nullopt,
                                     const std::optional<Eigen::VectorXd>& nu = std::nullopt);

struct DualTrainConfig {
  int batch_size = 64;
  double lr = 1e-6;
  // Linear decay to lr_final over the run when set.
  std::optional<double> lr_final;
  int iterations = 500;
  std::uint64_t seed = 0;
  double grad_clip = 10.0;
  bool append_demo_actions = false;
  // Sample size (per side) for refreshing the -Q normalization.
  int norm_batch = 256;

  void validate() const;
};

struct DualBatch {
  Eigen::MatrixXd states;
  Eigen::MatrixXd actions;
  std::vector<std::optional<std::size_t>> state_ids;
  std::vector<std::optional<std::size_t>> action_ids;
};

// Draws independent state and action batches of the requested size.
using DualSampler = std::function<DualBatch(std::size_t batch_size, Rng& rng)>;

DualSampler buffer_sampler(const rl::ReplayBuffer& buffer, bool append_demo_actions = false);

struct DualTrainReport {
  std::vector<double> objective_trace;
  double first_decile_mean = 0.0;
  double last_decile_mean = 0.0;

  bool ascended() const { return last_decile_mean >= first_decile_mean; }
};

// Stochastic ascent of the regularized dual with Adam (minimizing -J),
// per-network gradient clipping and the provenance mask when the dual is
// masked.
DualTrainReport train_potentials(DualPair& dual, const DualSampler& sampler, const QFn& q,
                                 const DualTrainConfig& config);
DualTrainReport train_potentials(DualPair& dual, const rl::ReplayBuffer& buffer, const QFn& q,
                                 const DualTrainConfig& config);

}  // namespace otpr::potentials
