#pragma once

#include <Eigen/Dense>

namespace dcpref {

struct KernelParams {
  double signal_variance = 1.0;
  double lengthscale = 1.0;
};

/// Squared-exponential covariance sigma^2 exp(-|a-b|^2 / (2 l^2)).
double se_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const KernelParams& params);

/// Gram matrix over the rows of `x`.
Eigen::MatrixXd se_gram(const Eigen::MatrixXd& x, const KernelParams& params);

/// Cross covariance, rows of `a` against rows of `b`.
Eigen::MatrixXd se_cross(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const KernelParams& params);

/// Squared distances between rows of `a` and rows of `b`.
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct LogPrior {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// Zero-mean multivariate normal log density of `u` under covariance `gram`.
/// Factorizes with jitter escalation; throws IllConditionedKernel on failure.
LogPrior gp_log_prior(const Eigen::VectorXd& u, const Eigen::MatrixXd& gram);

}  // namespace dcpref
