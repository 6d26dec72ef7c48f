#pragma once

#include <Eigen/Dense>

#include "otpr/error.hpp"

namespace otpr {

// Axis-aligned action bounds.
struct ActionBox {
  Eigen::VectorXd low;
  Eigen::VectorXd high;

  static ActionBox symmetric(int dim, double bound) {
    return {Eigen::VectorXd::Constant(dim, -bound), Eigen::VectorXd::Constant(dim, bound)};
  }

  int dim() const { return static_cast<int>(low.size()); }

  void validate() const {
    if (low.size() != high.size()) throw ShapeError("action box bounds differ in length");
    if (!low.allFinite() || !high.allFinite()) throw ConfigError("action box must be finite");
    if ((low.array() > high.array()).any()) throw ConfigError("action box has low > high");
  }

  bool contains(const Eigen::VectorXd& a) const {
    return (a.array() >= low.array()).all() && (a.array() <= high.array()).all();
  }

  Eigen::VectorXd clip(const Eigen::VectorXd& a) const { return a.cwiseMax(low).cwiseMin(high); }

  // Clips every column of a (dim x b) matrix.
  void clip_columns(Eigen::MatrixXd& a) const {
    a = a.cwiseMax(low.replicate(1, a.cols())).cwiseMin(high.replicate(1, a.cols()));
  }
};

}  // namespace otpr
