#pragma once

// Synthetic latent utility functions on the unit cube and their
// discretized, nested instance pools.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/choice.hpp"

namespace dcpref {

enum class LatentFunction { f2d, f4d, f6d };

struct LatentFunctionSpec {
  LatentFunction which = LatentFunction::f2d;
  std::string name;
  int dimension = 2;
  int points_per_dim = 22;
  std::vector<Eigen::VectorXd> centers;  // local maxima, coordinates in {0.15, 0.65}
  bool merge_permutations = false;       // one nest per coordinate multiset
};

LatentFunctionSpec latent_spec(LatentFunction which);
/// Accepts "2d", "4d", "6d" (case-insensitive, optional leading "f").
LatentFunctionSpec latent_spec(const std::string& name);

/// f2D = max(0, -1 + sum_i g(x_i)); f4D and f6D = sum_i g(x_i), with
/// g(x) = sin x + x/3 + sin 12x. Throws DomainError outside [0, 1]^p.
double latent_value(const LatentFunctionSpec& spec, const Eigen::VectorXd& x);

struct Grid {
  std::vector<Instance> instances;
  std::vector<double> values;  // latent value of each instance
  int nest_count = 0;
  std::vector<double> nest_center_value;  // latent value at each nest's center
};

/// Full grid on [0,1]^p, each point assigned to its nearest center
/// (Euclidean; ties go to the first center in enumeration order).
Grid build_grid(const LatentFunctionSpec& spec);

/// Mean nest scales 0.80, 0.75, ... in steps of -0.05, one per nest.
std::vector<double> lambda_means(int nest_count);

/// Truncated normal on [lo, hi] by rejection.
double sample_truncated_normal(double mean, double sd, double lo, double hi, Rng& rng);

/// Nest scales indexed by nest id: nests ranked by center value (descending)
/// receive the means of lambda_means in order; each lambda is drawn from a
/// normal with sd = 2 * mean truncated to mean +- 0.05.
std::vector<double> sample_lambdas(const std::vector<double>& nest_center_value, Rng& rng);

}  // namespace dcpref
