#include "otpr/policy.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "otpr/error.hpp"

namespace otpr::policy {

namespace {

// Resampling draws come from a stream that proposal indices never reach.
constexpr std::uint64_t kResampleStream = 0xffffffffull;

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double peak = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - peak).exp();
  return e / e.sum();
}

}  // namespace

const char* to_string(Guidance g) {
  switch (g) {
    case Guidance::kH: return "H";
    case Guidance::kQ: return "Q";
    case Guidance::kA: return "A";
  }
  return "?";
}

Guidance guidance_from_string(std::string_view name) {
  if (name == "H" || name == "h") return Guidance::kH;
  if (name == "Q" || name == "q") return Guidance::kQ;
  if (name == "A" || name == "a") return Guidance::kA;
  throw ConfigError("unknown guidance '" + std::string(name) + "' (expected H, Q or A)");
}

void OtprPolicy::validate() const {
  if (score == nullptr) throw PreconditionError("policy has no score model");
  if (num_proposals < 1) throw ConfigError("number of proposals must be >= 1");
  if (!(softmax_temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  schedule.validate();
  if (mode == Mode::kEval || num_proposals == 1) return;
  if (guidance == Guidance::kH && dual == nullptr)
    throw PreconditionError("H guidance needs dual potentials");
  if (guidance == Guidance::kA && critic == nullptr)
    throw PreconditionError("A guidance needs a critic");
  if (guidance == Guidance::kQ && critic == nullptr && !q_override)
    throw PreconditionError("Q guidance needs a critic or a Q function");
}

potentials::QFn OtprPolicy::q_fn() const {
  if (q_override) return q_override;
  if (critic != nullptr) return critic_q_fn(*critic);
  return {};
}

potentials::QFn critic_q_fn(const rl::CriticPair& critic) {
  return [&critic](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
    return rl::q_values(critic.q, s, a);
  };
}

Eigen::MatrixXd propose_actions(const OtprPolicy& policy, const Eigen::VectorXd& state, int count,
                                std::uint64_t seed) {
  if (count < 1) throw PreconditionError("need at least one proposal");
  if (policy.score == nullptr) throw PreconditionError("policy has no score model");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(count));
  for (int l = 0; l < count; ++l) seeds[static_cast<std::size_t>(l)] = derive_seed(seed, l);
  return diffusion::sample_reverse_batch(diffusion::model_score_fn(*policy.score),
                                         state.replicate(1, count), policy.schedule,
                                         policy.sampler, seeds, policy.score->action_dim);
}

Eigen::VectorXd guidance_scores(const OtprPolicy& policy, const Eigen::VectorXd& state,
                                const Eigen::MatrixXd& actions) {
  if (actions.cols() == 0) throw PreconditionError("no actions to score");
  const Eigen::MatrixXd states = state.replicate(1, actions.cols());
  switch (policy.guidance) {
    case Guidance::kH:
      if (policy.dual == nullptr) throw PreconditionError("H guidance needs dual potentials");
      return potentials::compatibility_pairs(*policy.dual, policy.q_fn(), states, actions);
    case Guidance::kQ: {
      const potentials::QFn q = policy.q_fn();
      if (!q) throw PreconditionError("Q guidance needs a critic or a Q function");
      return softmax(q(states, actions) / policy.softmax_temperature);
    }
    case Guidance::kA: {
      if (policy.critic == nullptr) throw PreconditionError("A guidance needs a critic");
      const Eigen::VectorXd q = policy.q_fn()(states, actions);
      const double v = rl::v_values(policy.critic->v, state)[0];
      return softmax((q.array() - v).matrix() / policy.softmax_temperature);
    }
  }
  return {};
}

Resampled resample(const Eigen::VectorXd& scores, Rng& rng) {
  if (scores.size() == 0) throw PreconditionError("cannot resample from an empty list");
  if (!scores.allFinite() || (scores.array() < 0.0).any())
    throw PreconditionError("resampling scores must be finite and non-negative");
  Resampled out;
  const double total = scores.sum();
  out.probabilities = total > 0.0
                          ? Eigen::VectorXd(scores / total)
                          : Eigen::VectorXd::Constant(scores.size(), 1.0 / scores.size());
  const double r = uniform01(rng);
  double acc = 0.0;
  out.index = scores.size() - 1;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    acc += out.probabilities[i];
    if (r < acc && out.probabilities[i] > 0.0) {
      out.index = i;
      break;
    }
  }
  // Guard against rounding leaving the tail index with zero probability.
  while (out.probabilities[out.index] == 0.0) --out.index;
  return out;
}

namespace {

ActResult choose(const OtprPolicy& policy, const Eigen::VectorXd& state, Eigen::MatrixXd proposals,
                 std::uint64_t seed) {
  ActResult out;
  if (proposals.cols() == 1) {
    out.probabilities = Eigen::VectorXd::Ones(1);
  } else {
    Rng rng(derive_seed(seed, kResampleStream));
    const Resampled r = resample(guidance_scores(policy, state, proposals), rng);
    out.index = r.index;
    out.probabilities = r.probabilities;
  }
  out.action = proposals.col(out.index);
  out.proposals = std::move(proposals);
  return out;
}

int proposal_count(const OtprPolicy& policy) {
  return policy.mode == Mode::kEval ? 1 : policy.num_proposals;
}

}  // namespace

ActResult act_detailed(const OtprPolicy& policy, const Eigen::VectorXd& state, std::uint64_t seed) {
  policy.validate();
  return choose(policy, state, propose_actions(policy, state, proposal_count(policy), seed), seed);
}

Eigen::VectorXd act(const OtprPolicy& policy, const Eigen::VectorXd& state, std::uint64_t seed) {
  return act_detailed(policy, state, seed).action;
}

Eigen::MatrixXd act_batch(const OtprPolicy& policy, const Eigen::MatrixXd& states,
                          std::span<const std::uint64_t> seeds) {
  policy.validate();
  if (seeds.size() != static_cast<std::size_t>(states.cols()))
    throw ShapeError("act_batch: one seed per state required");
  const int count = proposal_count(policy);
  const Eigen::Index n = states.cols();
  Eigen::MatrixXd stacked(states.rows(), n * count);
  std::vector<std::uint64_t> all_seeds(static_cast<std::size_t>(n * count));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int l = 0; l < count; ++l) {
      stacked.col(j * count + l) = states.col(j);
      all_seeds[static_cast<std::size_t>(j * count + l)] = derive_seed(seeds[j], l);
    }
  }
  const Eigen::MatrixXd proposals = diffusion::sample_reverse_batch(
      diffusion::model_score_fn(*policy.score), stacked, policy.schedule, policy.sampler, all_seeds,
      policy.score->action_dim);
  Eigen::MatrixXd out(proposals.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    out.col(j) =
        choose(policy, states.col(j), proposals.middleCols(j * count, count), seeds[j]).action;
  return out;
}

}  // namespace otpr::policy
