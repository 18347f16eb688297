#pragma once

// Nested-logit probability kernel: joint GEV distribution of the unobserved
// utility terms, pairwise and three-way ranking probabilities with exact
// gradients, and a sampler for correlated Gumbel noise.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace dcpref {

using Rng = std::mt19937_64;
using InstanceId = int;
using NestId = int;

struct Instance {
  InstanceId id = 0;
  Eigen::VectorXd features;
  NestId nest_id = 0;
};

/// Nest partition with one scale parameter per nest.
///
/// `membership[i]` is the nest of instance `i`; instance ids are dense
/// indices into the dataset. Each scale must satisfy 0 < lambda <= 1.
struct NestConfig {
  std::vector<double> lambdas;
  std::vector<NestId> membership;

  int nest_count() const { return static_cast<int>(lambdas.size()); }
  NestId nest_of(InstanceId id) const { return membership.at(static_cast<std::size_t>(id)); }

  /// Throws InvalidParameter on a scale outside (0, 1] or an unknown nest id.
  void validate() const;
};

/// Throws InvalidParameter unless 0 < lambda <= 1.
void check_lambda(double lambda);

/// Joint CDF of the unobserved utility terms, evaluated at `eps`
/// (eps[i] belongs to instance i of `nests.membership`).
double joint_gumbel_cdf(std::span<const double> eps, const NestConfig& nests);

struct PairLogProb {
  double value = 0.0;    // log P(i beats j)
  double d_ui = 0.0;
  double d_uj = 0.0;
  double d_lambda = 0.0;  // derivative wrt lambdas[lambda_nest]
  NestId lambda_nest = -1;  // -1 when the pair spans two nests
};

/// log P(x_i > x_j). Same nest m: logistic in (u_i - u_j) / lambda_m;
/// different nests: plain logistic in u_i - u_j.
PairLogProb pairwise_log_prob(double u_i, double u_j, NestId nest_i, NestId nest_j,
                              std::span<const double> lambdas);

/// The five nest patterns for an ordered triple (i, j, k).
enum class TripletCase : int {
  all_same = 1,        // m == m' == m''
  tail_shared = 2,     // j and k share a nest, i elsewhere
  all_distinct = 3,    // catch-all: no two share a nest
  head_shared = 4,     // i and j share a nest, k elsewhere
  ends_shared = 5,     // i and k share a nest, j elsewhere
};

TripletCase classify_triplet(NestId nest_i, NestId nest_j, NestId nest_k);

struct TripletLogProb {
  double value = 0.0;  // log P(x_i > x_j > x_k)
  std::array<double, 3> d_u{};  // wrt (u_i, u_j, u_k)
  double d_lambda = 0.0;
  NestId lambda_nest = -1;
  TripletCase kind = TripletCase::all_distinct;
  bool clamped = false;  // probability fell below the 1e-300 floor
};

inline constexpr double kProbabilityFloor = 1e-300;

/// log P(x_i > x_j > x_k) for utilities u = (u_i, u_j, u_k).
/// Throws DegenerateProbability (carrying the case index) when the raw
/// expression is NaN or negative beyond rounding.
TripletLogProb triplet_log_prob(const std::array<double, 3>& u,
                                const std::array<NestId, 3>& nests,
                                std::span<const double> lambdas);

/// Draw one standard positive stable variate with Laplace transform
/// exp(-t^alpha) (Chambers-Mallows-Stuck / Kanter form).
double sample_positive_stable(double alpha, Rng& rng);

/// Draw unobserved utility terms whose joint CDF is joint_gumbel_cdf.
Eigen::VectorXd sample_nested_gumbel(const NestConfig& nests, Rng& rng);

}  // namespace dcpref
