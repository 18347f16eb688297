#pragma once

#include <cmath>
#include <Eigen/Dense>

namespace dcpref {

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int max_iterations = 2000;
  double grad_tolerance = 1e-5;
  // Stop when the best objective improved by less than plateau_tolerance over
  // the last plateau_window iterations. A window of 0 disables the check.
  int plateau_window = 100;
  double plateau_tolerance = 1e-4;
};

/// Adam ascent on a maximization objective.
class Adam {
 public:
  Adam(Eigen::Index dim, const AdamConfig& config)
      : config_(config), m_(Eigen::VectorXd::Zero(dim)), v_(Eigen::VectorXd::Zero(dim)) {}

  void ascend(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
    v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(config_.beta1, t_);
    const double c2 = 1.0 - std::pow(config_.beta2, t_);
    params.array() +=
        config_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.epsilon);
  }

  int iterations() const { return t_; }

 private:
  AdamConfig config_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  int t_ = 0;
};

/// Result of a maximization run: best iterate and bookkeeping.
struct OptimizeResult {
  Eigen::VectorXd best;
  double best_value = 0.0;
  double initial_value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Runs Adam on `objective(params, grad) -> value`, keeping the best iterate.
/// `project` (may be empty) is applied after every step.
template <class Objective, class Project>
OptimizeResult adam_maximize(Eigen::VectorXd params, const AdamConfig& config, Objective&& objective,
                             Project&& project) {
  Adam adam(params.size(), config);
  Eigen::VectorXd grad(params.size());
  OptimizeResult out;
  out.best = params;
  out.best_value = objective(params, grad);
  out.initial_value = out.best_value;
  double window_start_best = out.best_value;
  int window_start_iter = 0;
  for (int it = 1; it <= config.max_iterations; ++it) {
    if (!grad.allFinite()) break;
    if (grad.norm() < config.grad_tolerance) {
      out.converged = true;
      break;
    }
    adam.ascend(params, grad);
    project(params);
    const double value = objective(params, grad);
    out.iterations = it;
    if (std::isfinite(value) && value > out.best_value) {
      out.best_value = value;
      out.best = params;
    }
    if (config.plateau_window > 0 && it - window_start_iter >= config.plateau_window) {
      if (out.best_value - window_start_best < config.plateau_tolerance) {
        out.converged = true;
        break;
      }
      window_start_best = out.best_value;
      window_start_iter = it;
    }
  }
  return out;
}

}  // namespace dcpref
