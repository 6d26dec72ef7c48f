#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace otpr::ot {

enum class CostMode { kNegQ, kRelationJs, kWeightedSum };
enum class Normalization { kZScore, kNone };

// Transport cost between a state and an action: the (normalized) negative
// critic value, the keypoint-relation divergence, or a weighted sum.
struct CostSpec {
  CostMode mode = CostMode::kNegQ;
  double weight_negq = 1.0;
  double weight_relation = 1.0;
  Normalization normalization = Normalization::kZScore;

  void validate() const;
  bool uses_q() const { return mode != CostMode::kRelationJs; }
  bool uses_relation() const { return mode != CostMode::kNegQ; }
};

// Expert (state, action) pairs that anchor masked transport.
struct KeypointSet {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> actions;
  double match_tolerance = 1e-6;

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
  void validate() const;
  Eigen::MatrixXd state_matrix() const;
  Eigen::MatrixXd action_matrix() const;
};

struct RelationConfig {
  double rho = 1.0;  // softmax temperature
};

struct DiscretePlan {
  Eigen::MatrixXd gamma;
  Eigen::VectorXd mu;
  Eigen::VectorXd nu;
};

// -mask * (u + v - cost)_+^2 / (4 lambda)
double penalty_f(double u_val, double v_val, double cost, double lambda, int mask);

// mask * (u + v - cost)_+ / (2 lambda)
double compatibility(double u_val, double v_val, double cost, double lambda, int mask);

// Softmax over -||point - k_i||^2 / rho.
Eigen::VectorXd relation_vector(const Eigen::VectorXd& point,
                                std::span<const Eigen::VectorXd> keypoints,
                                const RelationConfig& config);

// Column-batched relation vectors: points (d x b), keypoints (d x N) -> (N x b).
Eigen::MatrixXd relation_vectors(const Eigen::MatrixXd& points,
                                 const Eigen::MatrixXd& keypoints,
                                 const RelationConfig& config);

// Jensen-Shannon divergence with natural log, 0 ln 0 := 0. Inputs are
// expected to be probability vectors.
double js_divergence(const Eigen::Ref<const Eigen::VectorXd>& p,
                     const Eigen::Ref<const Eigen::VectorXd>& q);

double masked_cost(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                   const KeypointSet& keypoints, const RelationConfig& state_config,
                   const RelationConfig& action_config);

inline double masked_cost(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                          const KeypointSet& keypoints, const RelationConfig& config) {
  return masked_cost(s, a, keypoints, config, config);
}

// Pairwise relation costs: entry (i, j) = JS(R_s(states_i), R_a(actions_j)).
Eigen::MatrixXd relation_cost_matrix(const Eigen::MatrixXd& states,
                                     const Eigen::MatrixXd& actions,
                                     const KeypointSet& keypoints,
                                     const RelationConfig& state_config,
                                     const RelationConfig& action_config);

// Keypoint indices whose state (resp. action) lies within match_tolerance.
std::vector<std::size_t> matching_state_keypoints(const Eigen::VectorXd& s,
                                                  const KeypointSet& keypoints);
std::vector<std::size_t> matching_action_keypoints(const Eigen::VectorXd& a,
                                                   const KeypointSet& keypoints);

// 1 when neither side coincides with a keypoint or both coincide with the same
// keypoint pair; 0 otherwise (a keypoint matched to anything but its partner).
int mask_value(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
               const KeypointSet& keypoints);

// Same rule when keypoint membership is known by provenance (e.g. the index
// of an expert transition) instead of geometric matching.
int mask_from_ids(std::optional<std::size_t> state_keypoint,
                  std::optional<std::size_t> action_keypoint);

// Median of squared distances from points (columns) to keypoints (columns).
double median_heuristic_rho(const Eigen::MatrixXd& points, const Eigen::MatrixXd& keypoints);

// <C, gamma> + lambda * sum_ij gamma_ij^2 / (mu_i nu_j)
double regularized_objective(const Eigen::MatrixXd& cost, const Eigen::MatrixXd& gamma,
                             const Eigen::VectorXd& mu, const Eigen::VectorXd& nu,
                             double lambda);

struct OracleOptions {
  double kkt_tolerance = 1e-6;
  int max_iterations = 200000;
  // Entries with mask 0 are forced to zero (masked transport polytope).
  std::optional<Eigen::MatrixXd> mask;
};

struct OracleResult {
  DiscretePlan plan;
  double objective = 0.0;
  double kkt_residual = 0.0;
  double marginal_residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Projects onto {gamma >= 0, gamma 1 = mu, gamma^T 1 = nu} (and the mask, if
// given) with Dykstra's alternating projections.
Eigen::MatrixXd project_transport_polytope(const Eigen::MatrixXd& x, const Eigen::VectorXd& mu,
                                           const Eigen::VectorXd& nu,
                                           const Eigen::MatrixXd* mask = nullptr);

// Exact minimizer of the L2-regularized transport problem for small instances
// (n, m <= 64) by projected gradient. Non-convergence is reported, not thrown.
OracleResult exact_plan_oracle(const Eigen::MatrixXd& cost, const Eigen::VectorXd& mu,
                               const Eigen::VectorXd& nu, double lambda,
                               const OracleOptions& options = {});

}  // namespace otpr::ot
