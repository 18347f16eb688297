#pragma once

// Interface shared by the DC-GP and DC-DGP utility models.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/adam.hpp"
#include "dcpref/choice.hpp"
#include "dcpref/pref_graph.hpp"

namespace dcpref {

enum class SurrogateKind { gp, dgp1, dgp5 };

std::string to_string(SurrogateKind kind);
SurrogateKind surrogate_kind_from_string(const std::string& name);

struct SurrogateConfig {
  AdamConfig adam;
  double lambda_init = 0.7;
  // When set, the nest scales are held at these values instead of being learned.
  std::optional<std::vector<double>> fixed_lambdas;
  // Standard deviation of the log-normal hyperpriors on kernel parameters.
  double hyperprior_sd = 1.0;
  // Standard deviation of the normal prior on the logit of each nest scale.
  double lambda_prior_sd = 1.0;
  double hessian_step = 1e-5;
  int newton_iterations = 25;
};

/// What a fit needs to know about the session. `features` holds every
/// instance of the pool (row = instance id); `labeled` lists X^l.
struct FitData {
  const Eigen::MatrixXd* features = nullptr;
  std::vector<InstanceId> labeled;
  const PreferenceChain* chain = nullptr;
  const NestConfig* nests = nullptr;  // membership is used; lambdas are ignored
};

struct SurrogateState {
  SurrogateKind kind = SurrogateKind::gp;
  std::vector<InstanceId> ids;  // X^l, in the order of u_star
  Eigen::VectorXd u_star;
  Eigen::MatrixXd hessian;      // Hessian of the log objective wrt u at u_star
  Eigen::MatrixXd covariance;   // Laplace covariance
  std::vector<double> lambdas;  // fitted nest scales
  int x_star_index = 0;         // argmax of u_star
  double mu_max = 0.0;          // max predicted mean over X^l
  double objective = 0.0;
  double initial_objective = 0.0;
  double gradient_norm = 0.0;   // norm of the u-gradient at u_star
  int iterations = 0;
  bool converged = false;
  bool variance_fallback = false;

  int index_of(InstanceId id) const;
};

class Surrogate {
 public:
  virtual ~Surrogate() = default;

  virtual void fit(const FitData& data) = 0;

  /// Predictive mean and variance for each row of `x`.
  virtual void predict(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var) const = 0;

  virtual std::unique_ptr<Surrogate> clone() const = 0;

  const SurrogateState& state() const { return state_; }
  bool fitted() const { return fitted_; }

 protected:
  SurrogateState state_;
  bool fitted_ = false;
};

struct DgpConfig;
std::unique_ptr<Surrogate> make_surrogate(SurrogateKind kind, const SurrogateConfig& config, std::uint64_t seed);

namespace detail {

/// Central-difference Hessian of the chain log-likelihood wrt u.
Eigen::MatrixXd chain_hessian(const CompiledChain& compiled, const Eigen::VectorXd& u,
                              std::span<const double> lambdas, double step);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace detail

}  // namespace dcpref
