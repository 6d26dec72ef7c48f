#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace otpr::nn {

enum class Activation : std::uint8_t {
  kIdentity = 0,
  kTanh = 1,
  kSilu = 2,
  kRelu = 3,
};

std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

// Parameters of a fully connected network, stored as one flat vector so that
// optimizers, clipping, Polyak averaging and checkpoints can treat them as a
// single array. Weight matrices are column-major views into that vector.
//
// Layer l maps h_l (size layer_sizes[l]) to h_{l+1} (size layer_sizes[l+1]).
// Hidden layers use activations()[l]; the last layer is linear. With
// residual() set, hidden layers (1,2), (3,4), ... form two-layer blocks:
// h_{l+1} = act(W_l h_l + b_l) + h_{l-1} for the second layer of each block
// whose input and output widths agree.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(std::vector<int> layer_sizes, std::vector<Activation> activations,
           bool residual = false);

  const std::vector<int>& layer_sizes() const { return sizes_; }
  const std::vector<Activation>& activations() const { return acts_; }
  bool residual() const { return residual_; }
  std::size_t num_layers() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  bool skips_into(std::size_t layer) const;

  Eigen::Map<Eigen::MatrixXd> weight(std::size_t layer);
  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t layer) const;
  Eigen::Map<Eigen::VectorXd> bias(std::size_t layer);
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;

  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  ParamSet zeros_like() const;
  bool same_shape(const ParamSet& other) const;
  bool all_finite() const { return values_.allFinite(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.same_shape(b) && a.values_ == b.values_;
  }

 private:
  std::vector<int> sizes_;
  std::vector<Activation> acts_;
  bool residual_ = false;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
  Eigen::VectorXd values_;
};

// Scaled-uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0.
ParamSet mlp_init(std::span<const int> layer_sizes, Activation hidden_activation,
                  std::uint64_t seed, bool residual = false);

// Intermediate values of a batched forward pass (one sample per column).
struct ForwardCache {
  std::vector<Eigen::MatrixXd> inputs;       // h_0 .. h_n
  std::vector<Eigen::MatrixXd> preactivations;  // z_0 .. z_{n-1}
};

Eigen::MatrixXd forward(const ParamSet& params, const Eigen::MatrixXd& x);
Eigen::MatrixXd forward(const ParamSet& params, const Eigen::MatrixXd& x,
                        ForwardCache& cache);

// Reverse pass for the batch in `cache`. `upstream` is dL/d(output). Parameter
// gradients are accumulated into `grads`; the input gradient is returned.
Eigen::MatrixXd backward(const ParamSet& params, const ForwardCache& cache,
                         const Eigen::MatrixXd& upstream, ParamSet& grads);

struct GradResult {
  Eigen::VectorXd output;
  ParamSet param_grads;
  Eigen::VectorXd input_grad;
};

// Single-sample value and exact gradients of <upstream_grad, output>.
GradResult forward_with_grad(const ParamSet& params, const Eigen::VectorXd& input,
                             const Eigen::VectorXd& upstream_grad);

struct AdamState {
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState adam_init(const ParamSet& params);

// In-place update with bias correction. Throws NumericalError on non-finite
// gradients, leaving params and state untouched.
void adam_update(AdamState& state, ParamSet& params, const ParamSet& grads, double lr);

// Value-semantics form of adam_update.
std::pair<ParamSet, AdamState> adam_step(AdamState state, ParamSet params,
                                         const ParamSet& grads, double lr);

// Rescales grads so that their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_global_norm(ParamSet& grads, double max_norm);

// target <- (1 - rate) * target + rate * online
void polyak_update(ParamSet& target, const ParamSet& online, double rate);

struct LossAndGrad {
  double value = 0.0;
  ParamSet grad;
};

using LossFn = std::function<LossAndGrad(const ParamSet&)>;

struct FdOptions {
  double step = 1e-5;
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error of near-zero components.
  double abs_floor = 1e-6;
};

struct FdReport {
  double max_rel_error = 0.0;
  bool pass = true;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

FdReport finite_diff_check(const LossFn& loss, const ParamSet& params, double tol,
                           const FdOptions& options = {});

}  // namespace otpr::nn
