#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "otpr/nn.hpp"
#include "otpr/ot.hpp"
#include "otpr/rng.hpp"

namespace otpr::rl {

struct Transition {
  Eigen::VectorXd s;
  Eigen::VectorXd a;
  double r = 0.0;
  Eigen::VectorXd s_next;
  bool done = false;
  bool expert = false;
};

// Column-batched transitions. keypoint[i] is the keypoint id of an expert
// transition (its index among expert transitions in push order).
struct Batch {
  Eigen::MatrixXd s;
  Eigen::MatrixXd a;
  Eigen::VectorXd r;
  Eigen::MatrixXd s_next;
  Eigen::VectorXd done;
  std::vector<std::optional<std::size_t>> keypoint;

  Eigen::Index size() const { return s.cols(); }
};

inline constexpr const char* kBufferMagic = "OTPR-BUF-1";

// FIFO replay storage. With pin_expert, expert transitions are kept apart
// and only evicted once no ordinary transition is left to evict.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 250000, bool pin_expert = true);

  void push(Transition t);
  std::size_t size() const { return pinned_.size() + ring_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return size() == 0; }
  bool pin_expert() const { return pin_expert_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }

  // Index order: pinned experts first (oldest first), then the ring.
  const Transition& at(std::size_t i) const;
  std::optional<std::size_t> keypoint_id(std::size_t i) const;
  std::size_t expert_count() const;

  // Uniform without replacement within one batch.
  std::vector<std::size_t> sample_indices(std::size_t batch_size, Rng& rng) const;
  Batch sample(std::size_t batch_size, Rng& rng) const;
  Batch sample(std::size_t batch_size, std::uint64_t seed) const;
  Batch gather(std::span<const std::size_t> indices) const;

  // Expert (s, a) pairs indexed by keypoint id.
  ot::KeypointSet keypoints() const;

  void save(const std::filesystem::path& path) const;
  static ReplayBuffer load(const std::filesystem::path& path);

 private:
  struct Entry {
    Transition t;
    std::optional<std::size_t> keypoint;
  };
  const Entry& entry(std::size_t i) const;

  std::size_t capacity_;
  bool pin_expert_;
  int state_dim_ = -1;
  int action_dim_ = -1;
  std::size_t next_keypoint_ = 0;
  std::deque<Entry> pinned_;
  std::deque<Entry> ring_;
};

struct CriticConfig {
  std::vector<int> hidden = {256, 256};
  double discount = 0.99;
  double expectile = 0.7;
  double lr = 3e-4;
  double polyak = 0.005;
  int batch_size = 256;

  void validate() const;
};

// IQL critic: Q(s, a), V(s) and a slow Polyak copy of Q.
struct CriticPair {
  nn::ParamSet q;
  nn::ParamSet v;
  nn::ParamSet target_q;
  nn::AdamState q_opt;
  nn::AdamState v_opt;
  double discount = 0.99;
  double expectile = 0.7;
};

CriticPair make_critic(int state_dim, int action_dim, const CriticConfig& config,
                       std::uint64_t seed);

// Q for paired columns of S and A.
Eigen::VectorXd q_values(const nn::ParamSet& q, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a);
Eigen::VectorXd v_values(const nn::ParamSet& v, const Eigen::MatrixXd& s);

// |tau - 1{diff < 0}| * diff^2
double expectile_loss(double diff, double tau);

double discounted_return(std::span<const double> rewards, double kappa);

// Mean expectile loss of (target_q - V(s)) with its gradient in V's params.
nn::LossAndGrad value_loss(const nn::ParamSet& v, const Eigen::MatrixXd& s,
                           const Eigen::VectorXd& target_q, double tau);

// Mean squared error of Q(s, a) against r + discount * (1 - done) * next_v.
nn::LossAndGrad q_loss(const nn::ParamSet& q, const Batch& batch, const Eigen::VectorXd& next_v,
                       double discount);

struct CriticLosses {
  double v_loss = 0.0;
  double q_loss = 0.0;
};

// One IQL step on a batch: V toward target Q by expectile regression, Q
// toward the one-step backup through V, then the Polyak target update.
CriticLosses critic_update(CriticPair& critic, const Batch& batch, const CriticConfig& config);

// `updates` minibatch steps sampled from the buffer. Returns the losses of the
// last step.
CriticLosses train_critic(CriticPair& critic, const ReplayBuffer& buffer,
                          const CriticConfig& config, int updates, Rng& rng);

}  // namespace otpr::rl
