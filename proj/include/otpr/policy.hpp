#pragma once

#include <cstdint>
#include <span>

#include <Eigen/Dense>

#include "otpr/diffusion.hpp"
#include "otpr/potentials.hpp"
#include "otpr/rl.hpp"
#include "otpr/rng.hpp"

namespace otpr::policy {

enum class Guidance { kH, kQ, kA };
enum class Mode { kTrain, kEval };

const char* to_string(Guidance g);
Guidance guidance_from_string(std::string_view name);

// Diffusion policy with compatibility-based resampling. Holds non-owning
// pointers; the referenced models must outlive the policy and must not change
// during a rollout.
struct OtprPolicy {
  const diffusion::ScoreModel* score = nullptr;
  diffusion::DiffusionSchedule schedule;
  diffusion::SamplerOptions sampler;
  const potentials::DualPair* dual = nullptr;  // needed for H guidance
  const rl::CriticPair* critic = nullptr;      // needed for Q/A guidance and -Q costs
  int num_proposals = 8;
  Guidance guidance = Guidance::kH;
  Mode mode = Mode::kTrain;
  double softmax_temperature = 1.0;
  // Overrides the critic's Q in the transport cost and Q/A scores (e.g. an
  // exact Q on toy tasks).
  potentials::QFn q_override;

  void validate() const;
  potentials::QFn q_fn() const;
};

// Online Q network of a critic as a QFn.
potentials::QFn critic_q_fn(const rl::CriticPair& critic);

// L reverse-diffusion samples for one state (action_dim x L). Sample l uses
// the stream derive_seed(seed, l).
Eigen::MatrixXd propose_actions(const OtprPolicy& policy, const Eigen::VectorXd& state, int count,
                                std::uint64_t seed);

// Non-negative scores of the columns of `actions` at `state`.
Eigen::VectorXd guidance_scores(const OtprPolicy& policy, const Eigen::VectorXd& state,
                                const Eigen::MatrixXd& actions);

struct Resampled {
  Eigen::Index index = 0;
  Eigen::VectorXd probabilities;
};

// Categorical draw with p = scores / sum(scores); uniform when the sum is 0.
Resampled resample(const Eigen::VectorXd& scores, Rng& rng);

struct ActResult {
  Eigen::VectorXd action;
  Eigen::MatrixXd proposals;
  Eigen::VectorXd probabilities;
  Eigen::Index index = 0;
};

ActResult act_detailed(const OtprPolicy& policy, const Eigen::VectorXd& state, std::uint64_t seed);
Eigen::VectorXd act(const OtprPolicy& policy, const Eigen::VectorXd& state, std::uint64_t seed);

// act() for each column, with every proposal of every state drawn in one
// batched sampler call. Column j equals act(policy, states.col(j), seeds[j])
// up to floating-point rounding of the batched products.
Eigen::MatrixXd act_batch(const OtprPolicy& policy, const Eigen::MatrixXd& states,
                          std::span<const std::uint64_t> seeds);

}  // namespace otpr::policy
