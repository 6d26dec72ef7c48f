#include "otpr/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "otpr/error.hpp"

namespace otpr::ot {

void CostSpec::validate() const {
  if (!(weight_negq >= 0.0) || !(weight_relation >= 0.0) || !std::isfinite(weight_negq) ||
      !std::isfinite(weight_relation))
    throw ConfigError("cost weights must be finite and non-negative");
  if (mode == CostMode::kWeightedSum && weight_negq == 0.0 && weight_relation == 0.0)
    throw ConfigError("weighted_sum cost needs at least one non-zero weight");
}

void KeypointSet::validate() const {
  if (states.size() != actions.size())
    throw ShapeError("keypoint states and actions differ in count");
  if (!std::isfinite(match_tolerance) || match_tolerance < 0.0)
    throw ConfigError("keypoint match_tolerance must be finite and >= 0");
  for (std::size_t i = 1; i < states.size(); ++i) {
    if (states[i].size() != states[0].size() || actions[i].size() != actions[0].size())
      throw ShapeError("keypoint dimensions are not uniform");
  }
}

Eigen::MatrixXd KeypointSet::state_matrix() const {
  if (states.empty()) return {};
  Eigen::MatrixXd out(states[0].size(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = states[i];
  return out;
}

Eigen::MatrixXd KeypointSet::action_matrix() const {
  if (actions.empty()) return {};
  Eigen::MatrixXd out(actions[0].size(), static_cast<Eigen::Index>(actions.size()));
  for (std::size_t i = 0; i < actions.size(); ++i)
    out.col(static_cast<Eigen::Index>(i)) = actions[i];
  return out;
}

namespace {

void require_positive_lambda(double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
}

}  // namespace

double penalty_f(double u_val, double v_val, double cost, double lambda, int mask) {
  require_positive_lambda(lambda);
  const double slack = std::max(u_val + v_val - cost, 0.0);
  return -static_cast<double>(mask) * slack * slack / (4.0 * lambda);
}

double compatibility(double u_val, double v_val, double cost, double lambda, int mask) {
  require_positive_lambda(lambda);
  const double slack = std::max(u_val + v_val - cost, 0.0);
  return static_cast<double>(mask) * slack / (2.0 * lambda);
}

Eigen::MatrixXd relation_vectors(const Eigen::MatrixXd& points, const Eigen::MatrixXd& keypoints,
                                 const RelationConfig& config) {
  if (keypoints.cols() == 0) throw PreconditionError("relation vectors need at least one keypoint");
  if (points.rows() != keypoints.rows()) throw ShapeError("relation vector dimension mismatch");
  if (!(config.rho > 0.0)) throw ConfigError("relation temperature rho must be positive");

  // ||x - k||^2 = ||x||^2 - 2 k.x + ||k||^2; the ||x||^2 term cancels in the
  // softmax so only the last two are needed.
  Eigen::MatrixXd logits = 2.0 * keypoints.transpose() * points;
  logits.colwise() -= keypoints.colwise().squaredNorm().transpose();
  logits /= config.rho;
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double top = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - top).exp();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

Eigen::VectorXd relation_vector(const Eigen::VectorXd& point,
                                std::span<const Eigen::VectorXd> keypoints,
                                const RelationConfig& config) {
  if (keypoints.empty()) throw PreconditionError("relation vectors need at least one keypoint");
  Eigen::MatrixXd kp(point.size(), static_cast<Eigen::Index>(keypoints.size()));
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (keypoints[i].size() != point.size()) throw ShapeError("relation vector dimension mismatch");
    kp.col(static_cast<Eigen::Index>(i)) = keypoints[i];
  }
  return relation_vectors(point, kp, config).col(0);
}

double js_divergence(const Eigen::Ref<const Eigen::VectorXd>& p,
                     const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (p.size() != q.size()) throw ShapeError("js_divergence: length mismatch");
  double kl_p = 0.0;
  double kl_q = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) kl_q += q[i] * std::log(q[i] / m);
  }
  return std::clamp(0.5 * (kl_p + kl_q), 0.0, std::log(2.0));
}

Eigen::MatrixXd relation_cost_matrix(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                     const KeypointSet& keypoints,
                                     const RelationConfig& state_config,
                                     const RelationConfig& action_config) {
  if (keypoints.empty()) throw PreconditionError("relation cost needs keypoints");
  const Eigen::MatrixXd rs = relation_vectors(states, keypoints.state_matrix(), state_config);
  const Eigen::MatrixXd ra = relation_vectors(actions, keypoints.action_matrix(), action_config);
  Eigen::MatrixXd out(states.cols(), actions.cols());
  for (Eigen::Index j = 0; j < actions.cols(); ++j)
    for (Eigen::Index i = 0; i < states.cols(); ++i) out(i, j) = js_divergence(rs.col(i), ra.col(j));
  return out;
}

double masked_cost(const Eigen::VectorXd& s, const Eigen::VectorXd& a, const KeypointSet& keypoints,
                   const RelationConfig& state_config, const RelationConfig& action_config) {
  if (keypoints.empty()) throw PreconditionError("masked cost needs keypoints");
  return relation_cost_matrix(s, a, keypoints, state_config, action_config)(0, 0);
}

namespace {

std::vector<std::size_t> matching(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& pts,
                                  double tolerance) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].size() == x.size() && (pts[i] - x).norm() <= tolerance) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<std::size_t> matching_state_keypoints(const Eigen::VectorXd& s,
                                                  const KeypointSet& keypoints) {
  return matching(s, keypoints.states, keypoints.match_tolerance);
}

std::vector<std::size_t> matching_action_keypoints(const Eigen::VectorXd& a,
                                                   const KeypointSet& keypoints) {
  return matching(a, keypoints.actions, keypoints.match_tolerance);
}

int mask_value(const Eigen::VectorXd& s, const Eigen::VectorXd& a, const KeypointSet& keypoints) {
  const auto s_hits = matching_state_keypoints(s, keypoints);
  const auto a_hits = matching_action_keypoints(a, keypoints);
  if (s_hits.empty() && a_hits.empty()) return 1;
  for (std::size_t i : s_hits)
    if (std::find(a_hits.begin(), a_hits.end(), i) != a_hits.end()) return 1;
  return 0;
}

int mask_from_ids(std::optional<std::size_t> state_keypoint,
                  std::optional<std::size_t> action_keypoint) {
  if (!state_keypoint && !action_keypoint) return 1;
  if (state_keypoint && action_keypoint && *state_keypoint == *action_keypoint) return 1;
  return 0;
}

double median_heuristic_rho(const Eigen::MatrixXd& points, const Eigen::MatrixXd& keypoints) {
  if (points.cols() == 0 || keypoints.cols() == 0)
    throw PreconditionError("median heuristic needs points and keypoints");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(points.cols() * keypoints.cols()));
  for (Eigen::Index j = 0; j < keypoints.cols(); ++j)
    for (Eigen::Index i = 0; i < points.cols(); ++i)
      d.push_back((points.col(i) - keypoints.col(j)).squaredNorm());
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  // Coincident point sets would give rho = 0.
  return std::max(*mid, 1e-12);
}

double regularized_objective(const Eigen::MatrixXd& cost, const Eigen::MatrixXd& gamma,
                             const Eigen::VectorXd& mu, const Eigen::VectorXd& nu, double lambda) {
  const Eigen::MatrixXd base = mu * nu.transpose();
  return (cost.array() * gamma.array()).sum() +
         lambda * (gamma.array().square() / base.array()).sum();
}

namespace {

// Euclidean projection onto {X : X 1 = mu, X^T 1 = nu}.
void project_affine(Eigen::MatrixXd& x, const Eigen::VectorXd& mu, const Eigen::VectorXd& nu) {
  const double n = static_cast<double>(x.rows());
  const double m = static_cast<double>(x.cols());
  const Eigen::VectorXd row_res = mu - x.rowwise().sum();
  const double total = row_res.sum();
  const Eigen::VectorXd col_res = nu - x.colwise().sum().transpose();
  const Eigen::VectorXd a = row_res / m;
  const Eigen::VectorXd b = (col_res.array() - total / m) / n;
  x.colwise() += a;
  x.rowwise() += b.transpose();
}

void project_box(Eigen::MatrixXd& x, const Eigen::MatrixXd* mask) {
  x = x.cwiseMax(0.0);
  if (mask) x = x.cwiseProduct(*mask);
}

double marginal_error(const Eigen::MatrixXd& x, const Eigen::VectorXd& mu,
                      const Eigen::VectorXd& nu) {
  return std::max((x.rowwise().sum() - mu).cwiseAbs().maxCoeff(),
                  (x.colwise().sum().transpose() - nu).cwiseAbs().maxCoeff());
}

}  // namespace

Eigen::MatrixXd project_transport_polytope(const Eigen::MatrixXd& y, const Eigen::VectorXd& mu,
                                           const Eigen::VectorXd& nu, const Eigen::MatrixXd* mask) {
  constexpr int kMaxSweeps = 200000;
  constexpr double kTolerance = 1e-14;
  // Dykstra between the affine set (no correction term needed) and the
  // non-negative, mask-respecting box.
  Eigen::MatrixXd x = y;
  Eigen::MatrixXd correction = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  Eigen::MatrixXd a;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    a = x;
    project_affine(a, mu, nu);
    Eigen::MatrixXd shifted = a + correction;
    Eigen::MatrixXd next = shifted;
    project_box(next, mask);
    correction = shifted - next;
    const double change = (next - x).cwiseAbs().maxCoeff();
    x = std::move(next);
    if (change < kTolerance && marginal_error(x, mu, nu) < 1e-13) break;
  }
  return x;
}

OracleResult exact_plan_oracle(const Eigen::MatrixXd& cost, const Eigen::VectorXd& mu,
                               const Eigen::VectorXd& nu, double lambda,
                               const OracleOptions& options) {
  require_positive_lambda(lambda);
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  if (n == 0 || m == 0 || n > 64 || m > 64)
    throw PreconditionError("exact_plan_oracle supports 1..64 rows and columns");
  if (mu.size() != n || nu.size() != m) throw ShapeError("marginal lengths do not match cost");
  if ((mu.array() <= 0.0).any() || (nu.array() <= 0.0).any())
    throw PreconditionError("marginals must be strictly positive");
  if (std::abs(mu.sum() - 1.0) > 1e-9 || std::abs(nu.sum() - 1.0) > 1e-9)
    throw PreconditionError("marginals must each sum to 1");
  const Eigen::MatrixXd* mask = options.mask ? &*options.mask : nullptr;
  if (mask && (mask->rows() != n || mask->cols() != m)) throw ShapeError("mask shape mismatch");

  const Eigen::MatrixXd inv_base = (mu * nu.transpose()).cwiseInverse();
  const double lipschitz = 2.0 * lambda * inv_base.maxCoeff();
  const double step = 1.0 / lipschitz;

  OracleResult result;
  Eigen::MatrixXd gamma = project_transport_polytope(mu * nu.transpose(), mu, nu, mask);
  for (int it = 1; it <= options.max_iterations; ++it) {
    const Eigen::MatrixXd grad = cost + 2.0 * lambda * gamma.cwiseProduct(inv_base);
    Eigen::MatrixXd next = project_transport_polytope(gamma - step * grad, mu, nu, mask);
    // Norm of the gradient mapping: zero exactly at a KKT point.
    result.kkt_residual = (gamma - next).cwiseAbs().maxCoeff() / step;
    gamma = std::move(next);
    result.iterations = it;
    if (result.kkt_residual < options.kkt_tolerance) {
      result.converged = true;
      break;
    }
  }
  result.plan = DiscretePlan{gamma, mu, nu};
  result.objective = regularized_objective(cost, gamma, mu, nu, lambda);
  result.marginal_residual = marginal_error(gamma, mu, nu);
  return result;
}

}  // namespace otpr::ot
