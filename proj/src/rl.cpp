#include "otpr/rl.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "otpr/binary_io.hpp"
#include "otpr/error.hpp"

namespace otpr::rl {

ReplayBuffer::ReplayBuffer(std::size_t capacity, bool pin_expert)
    : capacity_(capacity), pin_expert_(pin_expert) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be >= 1");
}

void ReplayBuffer::push(Transition t) {
  if (state_dim_ < 0) {
    state_dim_ = static_cast<int>(t.s.size());
    action_dim_ = static_cast<int>(t.a.size());
  }
  if (t.s.size() != state_dim_ || t.s_next.size() != state_dim_ || t.a.size() != action_dim_)
    throw ShapeError("transition dimensions differ from the buffer's");
  if (!std::isfinite(t.r)) throw NumericalError("transition reward is not finite");

  if (size() == capacity_) {
    if (!ring_.empty())
      ring_.pop_front();
    else
      pinned_.pop_front();
  }
  Entry e{std::move(t), std::nullopt};
  if (e.t.expert) e.keypoint = next_keypoint_++;
  if (pin_expert_ && e.t.expert)
    pinned_.push_back(std::move(e));
  else
    ring_.push_back(std::move(e));
}

const ReplayBuffer::Entry& ReplayBuffer::entry(std::size_t i) const {
  if (i >= size()) throw RangeError("replay buffer index out of range");
  return i < pinned_.size() ? pinned_[i] : ring_[i - pinned_.size()];
}

const Transition& ReplayBuffer::at(std::size_t i) const { return entry(i).t; }

std::optional<std::size_t> ReplayBuffer::keypoint_id(std::size_t i) const {
  return entry(i).keypoint;
}

std::size_t ReplayBuffer::expert_count() const {
  std::size_t n = pinned_.size();
  for (const Entry& e : ring_) n += e.t.expert ? 1 : 0;
  return n;
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t batch_size, Rng& rng) const {
  const std::size_t n = size();
  if (batch_size == 0 || batch_size > n)
    throw PreconditionError("cannot sample " + std::to_string(batch_size) +
                            " transitions from a buffer of " + std::to_string(n));
  // Floyd's algorithm: uniform subset, O(batch) draws.
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  for (std::size_t j = n - batch_size; j < n; ++j) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, j)(rng);
    if (std::find(out.begin(), out.end(), k) == out.end())
      out.push_back(k);
    else
      out.push_back(j);
  }
  return out;
}

Batch ReplayBuffer::gather(std::span<const std::size_t> indices) const {
  const auto b = static_cast<Eigen::Index>(indices.size());
  Batch batch;
  batch.s.resize(state_dim_, b);
  batch.a.resize(action_dim_, b);
  batch.r.resize(b);
  batch.s_next.resize(state_dim_, b);
  batch.done.resize(b);
  batch.keypoint.resize(indices.size());
  for (Eigen::Index j = 0; j < b; ++j) {
    const Entry& e = entry(indices[static_cast<std::size_t>(j)]);
    batch.s.col(j) = e.t.s;
    batch.a.col(j) = e.t.a;
    batch.r[j] = e.t.r;
    batch.s_next.col(j) = e.t.s_next;
    batch.done[j] = e.t.done ? 1.0 : 0.0;
    batch.keypoint[static_cast<std::size_t>(j)] = e.keypoint;
  }
  return batch;
}

Batch ReplayBuffer::sample(std::size_t batch_size, Rng& rng) const {
  const auto idx = sample_indices(batch_size, rng);
  return gather(idx);
}

Batch ReplayBuffer::sample(std::size_t batch_size, std::uint64_t seed) const {
  Rng rng(seed);
  return sample(batch_size, rng);
}

ot::KeypointSet ReplayBuffer::keypoints() const {
  std::vector<const Entry*> experts;
  for (const Entry& e : pinned_) experts.push_back(&e);
  for (const Entry& e : ring_)
    if (e.keypoint) experts.push_back(&e);
  std::sort(experts.begin(), experts.end(),
            [](const Entry* a, const Entry* b) { return *a->keypoint < *b->keypoint; });
  ot::KeypointSet kp;
  for (const Entry* e : experts) {
    kp.states.push_back(e->t.s);
    kp.actions.push_back(e->t.a);
  }
  return kp;
}

void ReplayBuffer::save(const std::filesystem::path& path) const {
  io::BinaryWriter out(path);
  out.magic(kBufferMagic);
  out.u64(capacity_);
  out.u8(pin_expert_ ? 1 : 0);
  out.u32(static_cast<std::uint32_t>(std::max(state_dim_, 0)));
  out.u32(static_cast<std::uint32_t>(std::max(action_dim_, 0)));
  out.u64(size());
  for (std::size_t i = 0; i < size(); ++i) {
    const Transition& t = at(i);
    out.f64s({t.s.data(), static_cast<std::size_t>(t.s.size())});
    out.f64s({t.a.data(), static_cast<std::size_t>(t.a.size())});
    out.f64(t.r);
    out.f64s({t.s_next.data(), static_cast<std::size_t>(t.s_next.size())});
    out.f64(t.done ? 1.0 : 0.0);
    out.f64(t.expert ? 1.0 : 0.0);
  }
  out.finish();
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  in.expect_magic(kBufferMagic);
  const std::uint64_t capacity = in.u64();
  const bool pin = in.u8() != 0;
  const int sdim = static_cast<int>(in.u32());
  const int adim = static_cast<int>(in.u32());
  const std::uint64_t count = in.u64();
  if (capacity == 0 || count > capacity) throw IoError("corrupt buffer snapshot header");
  ReplayBuffer buf(capacity, pin);
  for (std::uint64_t k = 0; k < count; ++k) {
    Transition t;
    t.s.resize(sdim);
    t.a.resize(adim);
    t.s_next.resize(sdim);
    in.f64s({t.s.data(), static_cast<std::size_t>(sdim)});
    in.f64s({t.a.data(), static_cast<std::size_t>(adim)});
    t.r = in.f64();
    in.f64s({t.s_next.data(), static_cast<std::size_t>(sdim)});
    t.done = in.f64() != 0.0;
    t.expert = in.f64() != 0.0;
    buf.push(std::move(t));
  }
  return buf;
}

void CriticConfig::validate() const {
  if (!(discount > 0.0 && discount < 1.0)) throw ConfigError("critic discount must be in (0,1)");
  if (!(expectile > 0.0 && expectile < 1.0)) throw ConfigError("expectile must be in (0,1)");
  if (!(lr > 0.0)) throw ConfigError("critic lr must be positive");
  if (!(polyak > 0.0 && polyak <= 1.0)) throw ConfigError("polyak rate must be in (0,1]");
  if (batch_size < 1) throw ConfigError("critic batch_size must be >= 1");
  for (int h : hidden)
    if (h < 1) throw ConfigError("critic hidden sizes must be >= 1");
}

CriticPair make_critic(int state_dim, int action_dim, const CriticConfig& config,
                       std::uint64_t seed) {
  config.validate();
  std::vector<int> q_sizes{state_dim + action_dim};
  std::vector<int> v_sizes{state_dim};
  for (int h : config.hidden) {
    q_sizes.push_back(h);
    v_sizes.push_back(h);
  }
  q_sizes.push_back(1);
  v_sizes.push_back(1);
  CriticPair c;
  c.q = nn::mlp_init(q_sizes, nn::Activation::kSilu, derive_seed(seed, 0));
  c.v = nn::mlp_init(v_sizes, nn::Activation::kSilu, derive_seed(seed, 1));
  c.target_q = c.q;
  c.q_opt = nn::adam_init(c.q);
  c.v_opt = nn::adam_init(c.v);
  c.discount = config.discount;
  c.expectile = config.expectile;
  return c;
}

namespace {

Eigen::MatrixXd stack(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
  if (s.cols() != a.cols()) throw ShapeError("state and action batches differ in size");
  Eigen::MatrixXd x(s.rows() + a.rows(), s.cols());
  x << s, a;
  return x;
}

}  // namespace

Eigen::VectorXd q_values(const nn::ParamSet& q, const Eigen::MatrixXd& s,
                         const Eigen::MatrixXd& a) {
  return nn::forward(q, stack(s, a)).row(0).transpose();
}

Eigen::VectorXd v_values(const nn::ParamSet& v, const Eigen::MatrixXd& s) {
  return nn::forward(v, s).row(0).transpose();
}

double expectile_loss(double diff, double tau) {
  return std::abs(tau - (diff < 0.0 ? 1.0 : 0.0)) * diff * diff;
}

double discounted_return(std::span<const double> rewards, double kappa) {
  double total = 0.0;
  double scale = 1.0;
  for (double r : rewards) {
    total += scale * r;
    scale *= kappa;
  }
  return total;
}

nn::LossAndGrad value_loss(const nn::ParamSet& v, const Eigen::MatrixXd& s,
                           const Eigen::VectorXd& target_q, double tau) {
  nn::ForwardCache cache;
  const Eigen::VectorXd pred = nn::forward(v, s, cache).row(0).transpose();
  const auto b = static_cast<double>(pred.size());
  nn::LossAndGrad out;
  out.grad = v.zeros_like();
  Eigen::MatrixXd upstream(1, pred.size());
  for (Eigen::Index j = 0; j < pred.size(); ++j) {
    const double diff = target_q[j] - pred[j];
    const double w = std::abs(tau - (diff < 0.0 ? 1.0 : 0.0));
    out.value += w * diff * diff / b;
    upstream(0, j) = -2.0 * w * diff / b;
  }
  nn::backward(v, cache, upstream, out.grad);
  return out;
}

nn::LossAndGrad q_loss(const nn::ParamSet& q, const Batch& batch, const Eigen::VectorXd& next_v,
                       double discount) {
  nn::ForwardCache cache;
  const Eigen::VectorXd pred = nn::forward(q, stack(batch.s, batch.a), cache).row(0).transpose();
  const Eigen::VectorXd target =
      batch.r.array() + discount * (1.0 - batch.done.array()) * next_v.array();
  const Eigen::VectorXd err = pred - target;
  const auto b = static_cast<double>(pred.size());
  nn::LossAndGrad out;
  out.value = err.squaredNorm() / b;
  out.grad = q.zeros_like();
  nn::backward(q, cache, (2.0 / b) * err.transpose(), out.grad);
  return out;
}

CriticLosses critic_update(CriticPair& critic, const Batch& batch, const CriticConfig& config) {
  CriticLosses losses;
  const Eigen::VectorXd target_q = q_values(critic.target_q, batch.s, batch.a);
  const nn::LossAndGrad lv = value_loss(critic.v, batch.s, target_q, critic.expectile);
  nn::adam_update(critic.v_opt, critic.v, lv.grad, config.lr);
  losses.v_loss = lv.value;

  const Eigen::VectorXd next_v = v_values(critic.v, batch.s_next);
  const nn::LossAndGrad lq = q_loss(critic.q, batch, next_v, critic.discount);
  nn::adam_update(critic.q_opt, critic.q, lq.grad, config.lr);
  losses.q_loss = lq.value;

  nn::polyak_update(critic.target_q, critic.q, config.polyak);
  if (!std::isfinite(losses.v_loss) || !std::isfinite(losses.q_loss))
    throw NumericalError("critic loss is not finite");
  return losses;
}

CriticLosses train_critic(CriticPair& critic, const ReplayBuffer& buffer,
                          const CriticConfig& config, int updates, Rng& rng) {
  if (buffer.size() < static_cast<std::size_t>(config.batch_size))
    throw PreconditionError("buffer holds fewer transitions than the critic batch size");
  CriticLosses last;
  for (int k = 0; k < updates; ++k) {
    const Batch batch = buffer.sample(static_cast<std::size_t>(config.batch_size), rng);
    last = critic_update(critic, batch, config);
  }
  return last;
}

}  // namespace otpr::rl
