#pragma once

// DC-DGP: one hidden layer of d GPs feeding a top-layer GP, with inducing
// points in both layers and an approximate-EP energy standing in for log P(u).
//
// Both layers use whitened inducing values s = R v (K_zz = R R^T), so the
// prior over v is standard normal. The approximate posterior over each v is
// q(v) ∝ N(v; 0, I) t(v)^N with one shared Gaussian factor t of natural
// parameters (eta, Lambda = C C^T); the cavity uses t^(N-1).
//
// Utilities get the prior N(0, a2 K), where K is the top-layer SE kernel
// averaged over the hidden posterior; predictions use the same kernel.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/surrogate.hpp"

namespace dcpref {

struct DgpConfig {
  int hidden_dim = 1;
  int max_inducing = 50;
  double hidden_signal = 0.01;       // initial hidden-layer signal variance a1
  double hidden_noise = 0.01;        // sigma_h^2, held fixed while fitting
  double factor_seed = 1e-2;         // initial diagonal of each factor's C
  int fit_rounds = 3;                // alternations between the u and theta blocks
};

struct LayerFactor {
  Eigen::VectorXd eta;   // M
  Eigen::MatrixXd chol;  // M x M, lower triangular
};

struct DgpParams {
  double log_a1 = 0.0;  // hidden-layer signal variance
  double log_l1 = 0.0;  // hidden-layer lengthscale
  double log_a2 = 0.0;  // top-layer signal variance
  double log_l2 = 0.0;  // top-layer lengthscale
  double log_noise = 0.0;          // log sigma_h^2
  Eigen::MatrixXd z1;              // M x p
  Eigen::MatrixXd mean_weights;    // d x p, linear mean of the hidden layer
  Eigen::MatrixXd z2;              // M x d
  std::vector<LayerFactor> hidden; // d factors
  LayerFactor top;

  int inducing_count() const { return static_cast<int>(z1.rows()); }
  int hidden_dim() const { return static_cast<int>(z2.cols()); }
  int input_dim() const { return static_cast<int>(z1.cols()); }

  /// Flattens all parameters (lower triangles only for the factors).
  Eigen::VectorXd pack() const;
  /// Inverse of pack for a parameter set of the same shape.
  void unpack(const Eigen::VectorXd& flat);
  /// Same shape, all zeros.
  DgpParams zeros_like() const;
};

struct EpState {
  DgpParams params;
  int data_count = 1;  // N
};

/// Initial state: inducing inputs are a random subset of the rows of `x`
/// (all rows when there are at most max_inducing), the top-layer inducing
/// inputs are the hidden-layer means at those rows, and every factor is zero
/// so that the posterior equals the prior.
EpState init_inducing(const Eigen::MatrixXd& x, const DgpConfig& config, Rng& rng);

struct PropagatedMoments {
  Eigen::VectorXd hidden_mean;  // d
  Eigen::VectorXd hidden_var;   // d, includes sigma_h^2
  double mean = 0.0;            // top-layer m(x)
  double var = 0.0;             // top-layer v(x), without the sigma_h^2 floor
};

/// Moments at x under the cavity (`cavity` = true) or the full posterior.
PropagatedMoments propagate_moments(const Eigen::VectorXd& x, const EpState& state, bool cavity);

struct EnergyResult {
  double value = 0.0;
  Eigen::VectorXd grad_u;
  DgpParams grad;
  Eigen::VectorXd cavity_var;  // V_i used inside each log Z_i
  Eigen::VectorXd cavity_mean; // m_i
  Eigen::VectorXd utilities;   // u (equal to the input unless whitened)
};

/// J = (1-N) phi(theta) + N phi(theta_cavity) - phi(theta_prior) + sum_i log Z_i
/// with log Z_i = log N(u_i; m_i, v_i + sigma_h^2). Rows of `x` are the data.
EnergyResult ep_energy(const Eigen::VectorXd& u, const Eigen::MatrixXd& x, const EpState& state,
                       bool want_grad);

/// Same energy in whitened coordinates u_i = m_i + sqrt(V_i) eps_i, where
/// each log Z_i becomes the standard normal log density of eps_i. When
/// `u_adjoint` is non-empty, grad_u and grad also include the derivative of
/// u_adjoint . u(eps, theta), so an outer objective L(u) can be chained in by
/// passing dL/du. grad_u is then the gradient wrt eps.
EnergyResult ep_energy_whitened(const Eigen::VectorXd& eps, const Eigen::MatrixXd& x, const EpState& state,
                                bool want_grad, const Eigen::VectorXd& u_adjoint = Eigen::VectorXd());

namespace detail {

/// Quantities of the averaged top-layer kernel over a set of inputs that do
/// not depend on the hidden mean weights W or on l2.
struct DeepKernelInputs {
  Eigen::MatrixXd x;                    // n x p
  Eigen::MatrixXd base_mean;            // d x n, hidden mean minus W x
  std::vector<Eigen::ArrayXXd> diff_var;  // per hidden unit, n x n variance of h_i - h_j
  double noise_ratio = 0.0;             // sigma_h^2 / a2
};

DeepKernelInputs deep_kernel_inputs(const Eigen::MatrixXd& x, const EpState& state);

/// Unit-scale kernel E[exp(-|h_i - h_j|^2 / 2 l2^2)] with 1 + sigma_h^2 / a2
/// on the diagonal; multiply by a2 for the prior covariance of u.
Eigen::MatrixXd deep_kernel(const DeepKernelInputs& in, const Eigen::MatrixXd& w, double log_l2);

/// Gradients wrt W and log l2 given the symmetric adjoint of the kernel.
void deep_kernel_backward(const DeepKernelInputs& in, const Eigen::MatrixXd& w, double log_l2,
                          const Eigen::MatrixXd& k, const Eigen::MatrixXd& k_adj, Eigen::MatrixXd& grad_w,
                          double& grad_log_l2);

}  // namespace detail

class DgpSurrogate final : public Surrogate {
 public:
  DgpSurrogate(DgpConfig dgp, SurrogateConfig config, std::uint64_t seed);

  void fit(const FitData& data) override;
  void predict(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var) const override;
  std::unique_ptr<Surrogate> clone() const override { return std::make_unique<DgpSurrogate>(*this); }

  const EpState& ep_state() const { return ep_; }

 private:
  void grow_inducing(const Eigen::MatrixXd& xl, const std::vector<InstanceId>& ids);
  Eigen::MatrixXd prior_covariance(const Eigen::MatrixXd& xl) const;
  double hyperprior(const DgpParams& p, DgpParams* grad) const;
  void newton_refine(const CompiledChain& compiled, const Eigen::MatrixXd& xl);
  void finalize(const CompiledChain& compiled, const Eigen::MatrixXd& xl);

  DgpConfig dgp_;
  SurrogateConfig config_;
  Rng rng_;
  EpState ep_;
  std::vector<InstanceId> inducing_ids_;
  double log_l1_center_ = 0.0;
  double log_l2_center_ = 0.0;
  int nest_count_ = 0;
  bool learn_lambdas_ = true;
  Eigen::VectorXd rho_;
  Eigen::VectorXd weight_norms_;  // row norms of W, fixed at initialization

  // Prediction cache.
  Eigen::MatrixXd xl_;
  Eigen::VectorXd alpha_;      // K^{-1} u*
  Eigen::MatrixXd reduction_;  // K^{-1} - K^{-1} Sigma K^{-1}
};

}  // namespace dcpref
