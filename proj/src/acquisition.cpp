#include "dcpref/acquisition.hpp"

#include <cmath>
#include <numbers>

#include "dcpref/errors.hpp"

namespace dcpref {

std::string to_string(AcquisitionKind kind) { return kind == AcquisitionKind::pi ? "pi" : "ucb"; }

AcquisitionKind acquisition_kind_from_string(const std::string& name) {
  if (name == "pi") return AcquisitionKind::pi;
  if (name == "ucb") return AcquisitionKind::ucb;
  throw ConfigurationError("unknown acquisition '" + name + "' (expected pi or ucb)");
}

double pi_gamma(const AcquisitionInput& inp) {
  check_lambda(inp.lambda_m);
  if (inp.sigma_i < 0.0 || inp.sigma_star < 0.0) throw InvalidParameter("standard deviations must be non-negative");
  const double lam = inp.lambda_m;
  const double s2 = inp.sigma_i * inp.sigma_i + inp.sigma_star * inp.sigma_star;
  return std::sqrt(1.0 + std::numbers::pi * s2 / (8.0 * lam * lam));
}

double prob_improvement(const AcquisitionInput& inp) {
  const double z = (inp.mu_i - inp.mu_max) / (pi_gamma(inp) * inp.lambda_m);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double ucb_tau(int t, int p, double delta) {
  if (t < 1) throw InvalidParameter("query step must be at least 1");
  if (p < 1) throw InvalidParameter("dimension must be at least 1");
  if (!(delta > 0.0 && delta <= 1.0)) throw InvalidParameter("delta must lie in (0, 1]");
  const double pi2 = std::numbers::pi * std::numbers::pi;
  return 2.0 * ((p / 2.0 + 2.0) * std::log(static_cast<double>(t)) + std::log(pi2 / (3.0 * delta)));
}

double adaptive_ucb(double mu, double sigma, int t, int p, double delta) {
  return mu + std::sqrt(ucb_tau(t, p, delta)) * sigma;
}

double draw_delta(Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double d = 0.0;
  while (d <= 0.0) d = unit(rng);
  return d;
}

double adaptive_ucb(double mu, double sigma, int t, int p, Rng& rng) {
  return adaptive_ucb(mu, sigma, t, p, draw_delta(rng));
}

}  // namespace dcpref
