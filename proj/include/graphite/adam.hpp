#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "graphite/errors.hpp"
#include "graphite/tensor.hpp"

namespace graphite {

struct AdamOptions {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for a fixed list of parameters. The list is bound on the
/// first step; later steps must pass parameters with the same shapes.
struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step_count = 0;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {
    if (!(options_.learning_rate > 0)) throw Error("adam: learning rate must be positive");
  }

  /// theta -= lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected moments.
  void step(std::span<Parameter* const> params) {
    if (state_.first_moment.empty()) {
      for (const Parameter* p : params) {
        state_.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        state_.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (params.size() != state_.first_moment.size()) {
      throw ShapeError("adam: parameter count changed between steps");
    }
    ++state_.step_count;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step_count));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step_count));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      Matrix& m = state_.first_moment[k];
      Matrix& v = state_.second_moment[k];
      if (p.grad.rows() != m.rows() || p.grad.cols() != m.cols() ||
          p.value.rows() != m.rows() || p.value.cols() != m.cols()) {
        throw ShapeError("adam: shape mismatch for parameter '" + p.name + "'");
      }
      m = b1 * m + (1.0 - b1) * p.grad;
      v = b2 * v + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= options_.learning_rate * (m.array() / c1) /
                         ((v.array() / c2).sqrt() + options_.epsilon);
    }
  }

  const AdamState& state() const { return state_; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  AdamState state_;
};

}  // namespace graphite
