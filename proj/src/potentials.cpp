#include "otpr/potentials.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "otpr/error.hpp"

namespace otpr::potentials {

void DualPair::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("dual lambda must be positive");
  if (u_net.output_dim() != 1 || v_net.output_dim() != 1)
    throw ShapeError("potential networks must have scalar output");
  cost_spec.validate();
  if (keypoints) keypoints->validate();
  if (!(state_relation.rho > 0.0) || !(action_relation.rho > 0.0))
    throw ConfigError("relation temperatures must be positive");
}

DualPair make_dual(int state_dim, int action_dim, double lambda, const ot::CostSpec& cost,
                   const std::vector<int>& hidden, std::uint64_t seed,
                   nn::Activation activation) {
  std::vector<int> us{state_dim};
  std::vector<int> vs{action_dim};
  for (int h : hidden) {
    us.push_back(h);
    vs.push_back(h);
  }
  us.push_back(1);
  vs.push_back(1);
  DualPair d;
  d.u_net = nn::mlp_init(us, activation, derive_seed(seed, 0));
  d.v_net = nn::mlp_init(vs, activation, derive_seed(seed, 1));
  d.lambda = lambda;
  d.cost_spec = cost;
  d.u_opt = nn::adam_init(d.u_net);
  d.v_opt = nn::adam_init(d.v_net);
  d.validate();
  return d;
}

void set_keypoints(DualPair& dual, ot::KeypointSet keypoints, const Eigen::MatrixXd& state_sample,
                   const Eigen::MatrixXd& action_sample) {
  keypoints.validate();
  if (keypoints.empty()) throw PreconditionError("masked transport needs at least one keypoint");
  dual.state_relation.rho = ot::median_heuristic_rho(state_sample, keypoints.state_matrix());
  dual.action_relation.rho = ot::median_heuristic_rho(action_sample, keypoints.action_matrix());
  dual.keypoints = std::move(keypoints);
}

namespace {

Eigen::VectorXd normalized_neg_q(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& s,
                                 const Eigen::MatrixXd& a) {
  if (!q) throw PreconditionError("cost needs a Q function");
  Eigen::VectorXd neg = -q(s, a);
  if (dual.cost_spec.normalization == ot::Normalization::kZScore)
    neg = (neg.array() - dual.cost_norm.mean) / dual.cost_norm.std;
  return neg;
}

const ot::KeypointSet& require_keypoints(const DualPair& dual) {
  if (!dual.masked()) throw PreconditionError("relation cost needs keypoints");
  return *dual.keypoints;
}

// All (s_i, a_j) pairs as columns, i fastest (column-major b x m).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> cross(const Eigen::MatrixXd& s,
                                                  const Eigen::MatrixXd& a) {
  const Eigen::Index b = s.cols();
  const Eigen::Index m = a.cols();
  Eigen::MatrixXd cs(s.rows(), b * m);
  Eigen::MatrixXd ca(a.rows(), b * m);
  for (Eigen::Index j = 0; j < m; ++j) {
    cs.middleCols(j * b, b) = s;
    ca.middleCols(j * b, b) = a.col(j).replicate(1, b);
  }
  return {std::move(cs), std::move(ca)};
}

double weight_q(const ot::CostSpec& spec) {
  return spec.mode == ot::CostMode::kWeightedSum ? spec.weight_negq : 1.0;
}
double weight_g(const ot::CostSpec& spec) {
  return spec.mode == ot::CostMode::kWeightedSum ? spec.weight_relation : 1.0;
}

}  // namespace

Eigen::MatrixXd cost_matrix(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                            const Eigen::MatrixXd& actions) {
  const ot::CostSpec& spec = dual.cost_spec;
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(states.cols(), actions.cols());
  if (spec.uses_q()) {
    const auto [cs, ca] = cross(states, actions);
    const Eigen::VectorXd c = normalized_neg_q(dual, q, cs, ca);
    cost += weight_q(spec) * Eigen::Map<const Eigen::MatrixXd>(c.data(), states.cols(),
                                                               actions.cols());
  }
  if (spec.uses_relation()) {
    cost += weight_g(spec) * ot::relation_cost_matrix(states, actions, require_keypoints(dual),
                                                      dual.state_relation, dual.action_relation);
  }
  return cost;
}

Eigen::VectorXd pair_costs(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                           const Eigen::MatrixXd& actions) {
  if (states.cols() != actions.cols()) throw ShapeError("paired costs need equal batch sizes");
  const ot::CostSpec& spec = dual.cost_spec;
  Eigen::VectorXd cost = Eigen::VectorXd::Zero(states.cols());
  if (spec.uses_q()) cost += weight_q(spec) * normalized_neg_q(dual, q, states, actions);
  if (spec.uses_relation()) {
    const ot::KeypointSet& kp = require_keypoints(dual);
    const Eigen::MatrixXd rs = ot::relation_vectors(states, kp.state_matrix(), dual.state_relation);
    const Eigen::MatrixXd ra =
        ot::relation_vectors(actions, kp.action_matrix(), dual.action_relation);
    for (Eigen::Index j = 0; j < cost.size(); ++j)
      cost[j] += weight_g(spec) * ot::js_divergence(rs.col(j), ra.col(j));
  }
  return cost;
}

void refresh_cost_normalization(DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& actions) {
  if (!dual.cost_spec.uses_q() || dual.cost_spec.normalization != ot::Normalization::kZScore)
    return;
  if (!q) throw PreconditionError("cost needs a Q function");
  const auto [cs, ca] = cross(states, actions);
  const Eigen::VectorXd neg = -q(cs, ca);
  const double mean = neg.mean();
  const double var = (neg.array() - mean).square().mean();
  dual.cost_norm.mean = mean;
  dual.cost_norm.std = var > 1e-16 ? std::sqrt(var) : 1.0;
}

Eigen::MatrixXd mask_from_ids(const std::vector<std::optional<std::size_t>>& state_ids,
                              const std::vector<std::optional<std::size_t>>& action_ids) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(state_ids.size()),
                    static_cast<Eigen::Index>(action_ids.size()));
  for (std::size_t j = 0; j < action_ids.size(); ++j)
    for (std::size_t i = 0; i < state_ids.size(); ++i)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          ot::mask_from_ids(state_ids[i], action_ids[j]);
  return m;
}

Eigen::MatrixXd geometric_mask(const DualPair& dual, const Eigen::MatrixXd& states,
                               const Eigen::MatrixXd& actions) {
  if (!dual.masked()) return Eigen::MatrixXd::Ones(states.cols(), actions.cols());
  std::vector<std::optional<std::size_t>> sid(static_cast<std::size_t>(states.cols()));
  std::vector<std::optional<std::size_t>> aid(static_cast<std::size_t>(actions.cols()));
  // A point matching several keypoints (overlapping keypoints) keeps the first.
  for (Eigen::Index i = 0; i < states.cols(); ++i) {
    const auto hits = ot::matching_state_keypoints(states.col(i), *dual.keypoints);
    if (!hits.empty()) sid[static_cast<std::size_t>(i)] = hits.front();
  }
  for (Eigen::Index j = 0; j < actions.cols(); ++j) {
    const auto hits = ot::matching_action_keypoints(actions.col(j), *dual.keypoints);
    if (!hits.empty()) aid[static_cast<std::size_t>(j)] = hits.front();
  }
  return mask_from_ids(sid, aid);
}

double dual_objective_from_values(const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                                  const Eigen::MatrixXd& cost, const Eigen::MatrixXd& mask,
                                  double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (cost.rows() != u.size() || cost.cols() != v.size() || mask.rows() != u.size() ||
      mask.cols() != v.size())
    throw ShapeError("dual objective: cost/mask shape mismatch");
  if (u.size() == 0 || v.size() == 0) throw PreconditionError("dual objective needs samples");
  Eigen::MatrixXd slack = (-cost).colwise() + u;
  slack.rowwise() += v.transpose();
  const double penalty =
      (mask.array() * slack.array().max(0.0).square()).mean() / (4.0 * lambda);
  return u.mean() + v.mean() - penalty;
}

double dual_objective_batch(const DualPair& dual, const QFn& q, const Eigen::MatrixXd& states,
                            const Eigen::MatrixXd& actions,
                            const std::optional<Eigen::MatrixXd>& mask) {
  const Eigen::VectorXd u = nn::forward(dual.u_net, states).row(0).transpose();
  const Eigen::VectorXd v = nn::forward(dual.v_net, actions).row(0).transpose();
  const Eigen::MatrixXd cost = cost_matrix(dual, q, states, actions);
  return dual_objective_from_values(u, v, cost,
                                    mask ? *mask : geometric_mask(dual, states, actions),
                                    dual.lambda);
}

DualGradient dual_gradient(const DualPair& dual, const Eigen::MatrixXd& states,
                           const Eigen::MatrixXd& actions, const Eigen::MatrixXd& cost,
                           const Eigen::MatrixXd& mask) {
  nn::ForwardCache uc;
  nn::ForwardCache vc;
  const Eigen::VectorXd u = nn::forward(dual.u_net, states, uc).row(0).transpose();
  const Eigen::VectorXd v = nn::forward(dual.v_net, actions, vc).row(0).transpose();
  const auto b = static_cast<double>(u.size());
  const auto m = static_cast<double>(v.size());

  DualGradient g;
  g.objective = dual_objective_from_values(u, v, cost, mask, dual.lambda);
  Eigen::MatrixXd slack = (-cost).colwise() + u;
  slack.rowwise() += v.transpose();
  const Eigen::MatrixXd h =
      mask.cwiseProduct(slack.cwiseMax(0.0)) / (2.0 * dual.lambda);

  // dJ/du_i = 1/b - sum_j H_ij / (b m), and symmetrically for v.
  const Eigen::RowVectorXd du = (1.0 / b - h.rowwise().sum().array() / (b * m)).matrix().transpose();
  const Eigen::RowVectorXd dv = (1.0 / m - h.colwise().sum().array() / (b * m)).matrix();
  g.u_grad = dual.u_net.zeros_like();
  g.v_grad = dual.v_net.zeros_like();
  nn::backward(dual.u_net, uc, du, g.u_grad);
  nn::backward(dual.v_net, vc, dv, g.v_grad);
  return g;
}

Eigen::MatrixXd compatibility_matrix(const DualPair& dual, const QFn& q,
                                     const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                     const std::optional<Eigen::MatrixXd>& mask) {
  const Eigen::VectorXd u = nn::forward(dual.u_net, states).row(0).transpose();
  const Eigen::VectorXd v = nn::forward(dual.v_net, actions).row(0).transpose();
  Eigen::MatrixXd slack = (-cost_matrix(dual, q, states, actions)).colwise() + u;
  slack.rowwise() += v.transpose();
  const Eigen::MatrixXd m = mask ? *mask : geometric_mask(dual, states, actions);
  if (m.rows() != slack.rows() || m.cols() != slack.cols()) throw ShapeError("mask shape mismatch");
  return m.cwiseProduct(slack.cwiseMax(0.0)) / (2.0 * dual.lambda);
}

Eigen::VectorXd compatibility_pairs(const DualPair& dual, const QFn& q,
                                    const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) {
  const Eigen::VectorXd u = nn::forward(dual.u_net, states).row(0).transpose();
  const Eigen::VectorXd v = nn::forward(dual.v_net, actions).row(0).transpose();
  const Eigen::VectorXd c = pair_costs(dual, q, states, actions);
  Eigen::VectorXd h(c.size());
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    int mask = 1;
    if (dual.masked()) mask = ot::mask_value(states.col(j), actions.col(j), *dual.keypoints);
    h[j] = ot::compatibility(u[j], v[j], c[j], dual.lambda, mask);
  }
  return h;
}

Eigen::MatrixXd plan_from_potentials(const DualPair& dual, const QFn& q,
                                     const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                     const std::optional<Eigen::MatrixXd>& mask,
                                     const std::optional<Eigen::VectorXd>& mu,
                                     const std::optional<Eigen::VectorXd>& nu) {
  if (states.cols() == 0 || actions.cols() == 0)
    throw PreconditionError("plan needs non-empty state and action lists");
  const Eigen::VectorXd mw =
      mu ? *mu : Eigen::VectorXd::Constant(states.cols(), 1.0 / static_cast<double>(states.cols()));
  const Eigen::VectorXd nw = nu ? *nu
                                : Eigen::VectorXd::Constant(actions.cols(),
                                                            1.0 / static_cast<double>(actions.cols()));
  if (mw.size() != states.cols() || nw.size() != actions.cols())
    throw ShapeError("plan marginal weights have the wrong length");
  return mw.asDiagonal() * compatibility_matrix(dual, q, states, actions, mask) * nw.asDiagonal();
}

void DualTrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("dual batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("dual lr must be positive");
  if (lr_final && !(*lr_final > 0.0)) throw ConfigError("dual lr_final must be positive");
  if (iterations < 0) throw ConfigError("dual iterations must be >= 0");
  if (!(grad_clip > 0.0)) throw ConfigError("dual grad_clip must be positive");
  if (norm_batch < 1) throw ConfigError("dual norm_batch must be >= 1");
}

DualSampler buffer_sampler(const rl::ReplayBuffer& buffer, bool append_demo_actions) {
  std::vector<std::size_t> experts;
  if (append_demo_actions)
    for (std::size_t i = 0; i < buffer.size(); ++i)
      if (buffer.keypoint_id(i)) experts.push_back(i);
  return [&buffer, experts = std::move(experts)](std::size_t batch_size, Rng& rng) {
    if (buffer.size() < batch_size)
      throw PreconditionError("buffer holds fewer transitions than the dual batch size");
    DualBatch out;
    const rl::Batch sb = buffer.sample(batch_size, rng);
    const rl::Batch ab = buffer.sample(batch_size, rng);
    out.states = sb.s;
    out.state_ids = sb.keypoint;
    out.actions = ab.a;
    out.action_ids = ab.keypoint;
    if (!experts.empty()) {
      // Extra demonstration actions so that masked cells are not too rare.
      const std::size_t extra = std::min(batch_size, experts.size());
      std::vector<std::size_t> picks(extra);
      std::uniform_int_distribution<std::size_t> pick(0, experts.size() - 1);
      for (std::size_t& k : picks) k = experts[pick(rng)];
      const rl::Batch demo = buffer.gather(picks);
      const Eigen::Index base = out.actions.cols();
      out.actions.conservativeResize(Eigen::NoChange, base + demo.a.cols());
      out.actions.rightCols(demo.a.cols()) = demo.a;
      out.action_ids.insert(out.action_ids.end(), demo.keypoint.begin(), demo.keypoint.end());
    }
    return out;
  };
}

DualTrainReport train_potentials(DualPair& dual, const DualSampler& sampler, const QFn& q,
                                 const DualTrainConfig& config) {
  config.validate();
  dual.validate();
  DualTrainReport report;
  if (config.iterations == 0) return report;

  Rng rng(config.seed);
  if (dual.cost_spec.uses_q() && dual.cost_spec.normalization == ot::Normalization::kZScore) {
    const DualBatch nb = sampler(static_cast<std::size_t>(config.norm_batch), rng);
    refresh_cost_normalization(dual, q, nb.states, nb.actions);
  }

  report.objective_trace.reserve(static_cast<std::size_t>(config.iterations));
  for (int it = 0; it < config.iterations; ++it) {
    double lr = config.lr;
    if (config.lr_final && config.iterations > 1)
      lr += (*config.lr_final - config.lr) * it / (config.iterations - 1.0);

    const DualBatch batch = sampler(static_cast<std::size_t>(config.batch_size), rng);
    const Eigen::MatrixXd cost = cost_matrix(dual, q, batch.states, batch.actions);
    Eigen::MatrixXd mask;
    if (!dual.masked())
      mask = Eigen::MatrixXd::Ones(cost.rows(), cost.cols());
    else if (batch.state_ids.size() == static_cast<std::size_t>(cost.rows()) &&
             batch.action_ids.size() == static_cast<std::size_t>(cost.cols()))
      mask = mask_from_ids(batch.state_ids, batch.action_ids);
    else
      mask = geometric_mask(dual, batch.states, batch.actions);

    DualGradient g = dual_gradient(dual, batch.states, batch.actions, cost, mask);
    if (!std::isfinite(g.objective))
      throw NumericalError("dual objective is not finite at iteration " + std::to_string(it));
    report.objective_trace.push_back(g.objective);

    // Adam minimizes, so step on -J.
    g.u_grad.values() *= -1.0;
    g.v_grad.values() *= -1.0;
    nn::clip_global_norm(g.u_grad, config.grad_clip);
    nn::clip_global_norm(g.v_grad, config.grad_clip);
    nn::adam_update(dual.u_opt, dual.u_net, g.u_grad, lr);
    nn::adam_update(dual.v_opt, dual.v_net, g.v_grad, lr);
  }

  const std::size_t n = report.objective_trace.size();
  const std::size_t k = std::max<std::size_t>(1, n / 10);
  auto mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + k; ++i) s += report.objective_trace[i];
    return s / static_cast<double>(k);
  };
  report.first_decile_mean = mean(0);
  report.last_decile_mean = mean(n - k);
  return report;
}

DualTrainReport train_potentials(DualPair& dual, const rl::ReplayBuffer& buffer, const QFn& q,
                                 const DualTrainConfig& config) {
  if (buffer.empty()) throw PreconditionError("cannot train potentials on an empty buffer");
  if (buffer.size() < static_cast<std::size_t>(config.batch_size))
    throw PreconditionError("buffer holds fewer transitions than the dual batch size");
  return train_potentials(dual, buffer_sampler(buffer, config.append_demo_actions), q, config);
}

}  // namespace otpr::potentials
