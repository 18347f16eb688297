#pragma once

#include "dcpref/kernel.hpp"
#include "dcpref/surrogate.hpp"

namespace dcpref {

/// DC-GP: SE-kernel GP prior on utilities with the nested-logit chain likelihood.
///
/// Kernel hyperparameters and nest scales are optimized jointly with the
/// utilities by Adam in the whitened coordinates u = R w (K = R R^T), then u
/// is refined by Newton steps at the optimized hyperparameters. The Laplace
/// covariance is (W + K^{-1})^{-1} with W the PSD part of the negative chain
/// Hessian.
class GpSurrogate final : public Surrogate {
 public:
  explicit GpSurrogate(SurrogateConfig config = {});

  void fit(const FitData& data) override;
  void predict(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var) const override;
  std::unique_ptr<Surrogate> clone() const override { return std::make_unique<GpSurrogate>(*this); }

  const KernelParams& kernel() const { return kernel_; }

  /// Joint objective in whitened coordinates, exposed for gradient checks.
  /// params = [w (n), log signal variance, log lengthscale, logit lambdas...].
  double whitened_objective(const Eigen::MatrixXd& xl, const CompiledChain& compiled,
                            const Eigen::VectorXd& params, Eigen::VectorXd* grad) const;

 private:
  void finalize(const Eigen::MatrixXd& xl, const CompiledChain& compiled);
  void newton_refine(const CompiledChain& compiled);

  SurrogateConfig config_;
  KernelParams kernel_;
  double log_lengthscale_center_ = 0.0;
  int nest_count_ = 0;
  bool learn_lambdas_ = true;
  Eigen::VectorXd rho_;

  Eigen::MatrixXd xl_;
  Eigen::MatrixXd chol_k_;     // R
  Eigen::VectorXd alpha_;      // K^{-1} u*
  Eigen::MatrixXd sqrt_w_;     // S = W^{1/2}
  Eigen::MatrixXd chol_b_;     // chol(I + S K S)
};

}  // namespace dcpref
