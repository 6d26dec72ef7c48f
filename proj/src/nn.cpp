#include "otpr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "otpr/error.hpp"
#include "otpr/rng.hpp"

namespace otpr::nn {

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::kIdentity: return "identity";
    case Activation::kTanh: return "tanh";
    case Activation::kSilu: return "silu";
    case Activation::kRelu: return "relu";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "tanh") return Activation::kTanh;
  if (name == "silu") return Activation::kSilu;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

namespace {

void validate_sizes(std::span<const int> sizes) {
  if (sizes.size() < 2) throw ConfigError("layer_sizes needs at least two entries");
  for (int s : sizes)
    if (s < 1) throw ConfigError("layer_sizes entries must be >= 1");
}

void apply_activation(Activation act, const Eigen::MatrixXd& z, Eigen::MatrixXd& out) {
  switch (act) {
    case Activation::kIdentity: out = z; break;
    case Activation::kTanh: out = z.array().tanh(); break;
    case Activation::kSilu: out = z.array() / (1.0 + (-z.array()).exp()); break;
    case Activation::kRelu: out = z.cwiseMax(0.0); break;
  }
}

// dz = dh * act'(z)
void activation_backward(Activation act, const Eigen::MatrixXd& z,
                         const Eigen::MatrixXd& dh, Eigen::MatrixXd& dz) {
  switch (act) {
    case Activation::kIdentity: dz = dh; break;
    case Activation::kTanh: {
      Eigen::ArrayXXd t = z.array().tanh();
      dz = dh.array() * (1.0 - t.square());
      break;
    }
    case Activation::kSilu: {
      Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
      dz = dh.array() * sig * (1.0 + z.array() * (1.0 - sig));
      break;
    }
    case Activation::kRelu:
      dz = dh.array() * (z.array() > 0.0).cast<double>();
      break;
  }
}

}  // namespace

ParamSet::ParamSet(std::vector<int> layer_sizes, std::vector<Activation> activations,
                   bool residual)
    : sizes_(std::move(layer_sizes)), acts_(std::move(activations)), residual_(residual) {
  validate_sizes(sizes_);
  if (acts_.size() != sizes_.size() - 2)
    throw ConfigError("need one activation per hidden layer");
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    weight_offsets_.push_back(offset);
    offset += static_cast<std::size_t>(sizes_[l]) * static_cast<std::size_t>(sizes_[l + 1]);
    bias_offsets_.push_back(offset);
    offset += static_cast<std::size_t>(sizes_[l + 1]);
  }
  values_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
}

bool ParamSet::skips_into(std::size_t layer) const {
  const std::size_t n = num_layers();
  if (!residual_ || layer < 2 || layer + 1 >= n || layer % 2 != 0) return false;
  return sizes_[layer - 1] == sizes_[layer + 1];
}

Eigen::Map<Eigen::MatrixXd> ParamSet::weight(std::size_t l) {
  return {values_.data() + weight_offsets_[l], sizes_[l + 1], sizes_[l]};
}
Eigen::Map<const Eigen::MatrixXd> ParamSet::weight(std::size_t l) const {
  return {values_.data() + weight_offsets_[l], sizes_[l + 1], sizes_[l]};
}
Eigen::Map<Eigen::VectorXd> ParamSet::bias(std::size_t l) {
  return {values_.data() + bias_offsets_[l], sizes_[l + 1]};
}
Eigen::Map<const Eigen::VectorXd> ParamSet::bias(std::size_t l) const {
  return {values_.data() + bias_offsets_[l], sizes_[l + 1]};
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out = *this;
  out.values_.setZero();
  return out;
}

bool ParamSet::same_shape(const ParamSet& other) const {
  return sizes_ == other.sizes_ && acts_ == other.acts_ && residual_ == other.residual_;
}

ParamSet mlp_init(std::span<const int> layer_sizes, Activation hidden_activation,
                  std::uint64_t seed, bool residual) {
  validate_sizes(layer_sizes);
  std::vector<int> sizes(layer_sizes.begin(), layer_sizes.end());
  std::vector<Activation> acts(sizes.size() - 2, hidden_activation);
  ParamSet params(std::move(sizes), std::move(acts), residual);
  Rng rng(seed);
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(params.layer_sizes()[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = params.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
  }
  return params;
}

Eigen::MatrixXd forward(const ParamSet& params, const Eigen::MatrixXd& x,
                        ForwardCache& cache) {
  if (x.rows() != params.input_dim())
    throw ShapeError("network input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(params.input_dim()));
  const std::size_t n = params.num_layers();
  cache.inputs.resize(n + 1);
  cache.preactivations.resize(n);
  cache.inputs[0] = x;
  for (std::size_t l = 0; l < n; ++l) {
    Eigen::MatrixXd& z = cache.preactivations[l];
    z.noalias() = params.weight(l) * cache.inputs[l];
    z.colwise() += params.bias(l);
    if (l + 1 == n) {
      cache.inputs[l + 1] = z;
    } else {
      apply_activation(params.activations()[l], z, cache.inputs[l + 1]);
      if (params.skips_into(l)) cache.inputs[l + 1] += cache.inputs[l - 1];
    }
  }
  return cache.inputs[n];
}

Eigen::MatrixXd forward(const ParamSet& params, const Eigen::MatrixXd& x) {
  ForwardCache cache;
  return forward(params, x, cache);
}

Eigen::MatrixXd backward(const ParamSet& params, const ForwardCache& cache,
                         const Eigen::MatrixXd& upstream, ParamSet& grads) {
  const std::size_t n = params.num_layers();
  if (upstream.rows() != params.output_dim() || upstream.cols() != cache.inputs[n].cols())
    throw ShapeError("upstream gradient shape does not match network output");
  if (!grads.same_shape(params)) throw ShapeError("gradient buffer shape mismatch");

  const Eigen::Index batch = upstream.cols();
  std::vector<Eigen::MatrixXd> dh(n + 1);
  for (std::size_t l = 0; l <= n; ++l)
    dh[l] = Eigen::MatrixXd::Zero(params.layer_sizes()[l], batch);
  dh[n] = upstream;

  Eigen::MatrixXd dz;
  for (std::size_t l = n; l-- > 0;) {
    if (l + 1 == n) {
      dz = dh[l + 1];
    } else {
      activation_backward(params.activations()[l], cache.preactivations[l], dh[l + 1], dz);
      if (params.skips_into(l)) dh[l - 1] += dh[l + 1];
    }
    grads.weight(l).noalias() += dz * cache.inputs[l].transpose();
    grads.bias(l) += dz.rowwise().sum();
    dh[l].noalias() += params.weight(l).transpose() * dz;
  }
  return dh[0];
}

GradResult forward_with_grad(const ParamSet& params, const Eigen::VectorXd& input,
                             const Eigen::VectorXd& upstream_grad) {
  if (input.size() != params.input_dim()) throw ShapeError("input length mismatch");
  if (upstream_grad.size() != params.output_dim())
    throw ShapeError("upstream gradient length mismatch");
  ForwardCache cache;
  GradResult result;
  result.output = forward(params, input, cache);
  result.param_grads = params.zeros_like();
  result.input_grad = backward(params, cache, upstream_grad, result.param_grads);
  return result;
}

AdamState adam_init(const ParamSet& params) {
  AdamState state;
  state.first_moment = Eigen::VectorXd::Zero(params.values().size());
  state.second_moment = Eigen::VectorXd::Zero(params.values().size());
  return state;
}

void adam_update(AdamState& state, ParamSet& params, const ParamSet& grads, double lr) {
  if (!grads.same_shape(params) || state.first_moment.size() != params.values().size())
    throw ShapeError("adam: shapes disagree");
  if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!grads.all_finite()) throw NumericalError("adam: non-finite gradient");

  const Eigen::VectorXd& g = grads.values();
  state.step += 1;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * g.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  params.values().array() -=
      lr * (state.first_moment.array() / c1) /
      ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

std::pair<ParamSet, AdamState> adam_step(AdamState state, ParamSet params,
                                         const ParamSet& grads, double lr) {
  adam_update(state, params, grads, lr);
  return {std::move(params), std::move(state)};
}

double clip_global_norm(ParamSet& grads, double max_norm) {
  const double norm = grads.values().norm();
  if (norm > max_norm && norm > 0.0) grads.values() *= max_norm / norm;
  return norm;
}

void polyak_update(ParamSet& target, const ParamSet& online, double rate) {
  if (!target.same_shape(online)) throw ShapeError("polyak: shapes disagree");
  target.values() = (1.0 - rate) * target.values() + rate * online.values();
}

FdReport finite_diff_check(const LossFn& loss, const ParamSet& params, double tol,
                           const FdOptions& options) {
  FdReport report;
  const LossAndGrad base = loss(params);
  const std::size_t n = params.size();

  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (n > options.max_coords) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  ParamSet probe = params;
  for (std::size_t idx : coords) {
    const auto i = static_cast<Eigen::Index>(idx);
    const double original = params.values()[i];
    probe.values()[i] = original + options.step;
    const double plus = loss(probe).value;
    probe.values()[i] = original - options.step;
    const double minus = loss(probe).value;
    probe.values()[i] = original;

    const double numeric = (plus - minus) / (2.0 * options.step);
    const double analytic = base.grad.values()[i];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    // NaN compares false, so a non-finite error always becomes the worst.
    if (report.coords_checked == 0 ||
        (std::isfinite(report.max_rel_error) && !(rel <= report.max_rel_error))) {
      report.max_rel_error = rel;
      report.worst_index = idx;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.coords_checked;
  }
  report.pass = std::isfinite(report.max_rel_error) && report.max_rel_error <= tol;
  return report;
}

}  // namespace otpr::nn
