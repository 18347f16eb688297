#pragma once

#include <string>

#include "dcpref/choice.hpp"

namespace dcpref {

enum class AcquisitionKind { pi, ucb };

std::string to_string(AcquisitionKind kind);
AcquisitionKind acquisition_kind_from_string(const std::string& name);

struct AcquisitionInput {
  double mu_i = 0.0;
  double sigma_i = 0.0;
  double mu_max = 0.0;
  double sigma_star = 0.0;
  double lambda_m = 1.0;  // candidate's nest scale if it shares the incumbent's nest, else 1
};

/// gamma = sqrt(1 + pi (sigma_i^2 + sigma_*^2) / (8 lambda^2)).
double pi_gamma(const AcquisitionInput& inp);

/// Probability that the candidate beats the incumbent under the logistic
/// approximation of the normal-Gumbel convolution.
double prob_improvement(const AcquisitionInput& inp);

/// tau_t = 2 log(t^(p/2 + 2) pi^2 / (3 delta)).
double ucb_tau(int t, int p, double delta);

/// mu + sqrt(tau_t) sigma for a given delta.
double adaptive_ucb(double mu, double sigma, int t, int p, double delta);

/// Same, drawing delta uniformly on (0, 1).
double adaptive_ucb(double mu, double sigma, int t, int p, Rng& rng);

/// Uniform draw on the open interval (0, 1).
double draw_delta(Rng& rng);

}  // namespace dcpref
