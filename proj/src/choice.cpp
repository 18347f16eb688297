#include "dcpref/choice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dcpref/detail/dual.hpp"
#include "dcpref/errors.hpp"

namespace dcpref {

namespace {

using D4 = detail::Dual<4>;

constexpr std::size_t kSlotLambda = 3;

double log_sigmoid(double z) {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

// sigmoid(-z) without overflow
double sigmoid_neg(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

template <std::size_t K>
D4 logsumexp(const std::array<D4, K>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& x : xs) m = std::max(m, x.v);
  D4 s(0.0);
  for (const auto& x : xs) s = s + detail::exp(x - D4(m));
  return detail::log(s) + D4(m);
}

D4 softplus(const D4& z) {
  if (z.v > 0.0) return z + detail::log1p(detail::exp(-z));
  return detail::log1p(detail::exp(z));
}

// log(exp(y) - 1) for y > 0
D4 log_expm1(const D4& y) {
  if (y.v > 30.0) return y + detail::log1p(-detail::exp(-y));
  return detail::log(detail::expm1(y));
}

double lambda_at(std::span<const double> lambdas, NestId nest) {
  if (nest < 0 || static_cast<std::size_t>(nest) >= lambdas.size()) {
    throw InvalidParameter("nest id " + std::to_string(nest) + " has no scale parameter");
  }
  const double lam = lambdas[static_cast<std::size_t>(nest)];
  check_lambda(lam);
  return lam;
}

}  // namespace

void check_lambda(double lambda) {
  if (!(lambda > 0.0 && lambda <= 1.0)) {
    throw InvalidParameter("nest scale must lie in (0, 1], got " + std::to_string(lambda));
  }
}

void NestConfig::validate() const {
  for (double lam : lambdas) check_lambda(lam);
  for (NestId m : membership) {
    if (m < 0 || m >= nest_count()) {
      throw InvalidParameter("instance assigned to unknown nest " + std::to_string(m));
    }
  }
}

double joint_gumbel_cdf(std::span<const double> eps, const NestConfig& nests) {
  nests.validate();
  if (eps.size() != nests.membership.size()) {
    throw InvalidParameter("noise vector length does not match nest membership");
  }
  const int m_count = nests.nest_count();
  // per-nest log-sum-exp of -eps / lambda
  std::vector<double> peak(static_cast<std::size_t>(m_count), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto m = static_cast<std::size_t>(nests.membership[i]);
    peak[m] = std::max(peak[m], -eps[i] / nests.lambdas[m]);
  }
  std::vector<double> acc(static_cast<std::size_t>(m_count), 0.0);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto m = static_cast<std::size_t>(nests.membership[i]);
    acc[m] += std::exp(-eps[i] / nests.lambdas[m] - peak[m]);
  }
  double total = 0.0;
  for (std::size_t m = 0; m < acc.size(); ++m) {
    if (acc[m] == 0.0) continue;
    total += std::exp(nests.lambdas[m] * (peak[m] + std::log(acc[m])));
  }
  return std::exp(-total);
}

PairLogProb pairwise_log_prob(double u_i, double u_j, NestId nest_i, NestId nest_j,
                              std::span<const double> lambdas) {
  const double lam_i = lambda_at(lambdas, nest_i);
  lambda_at(lambdas, nest_j);
  PairLogProb out;
  const double diff = u_i - u_j;
  if (nest_i == nest_j) {
    const double z = diff / lam_i;
    const double s = sigmoid_neg(z);
    out.value = log_sigmoid(z);
    out.d_ui = s / lam_i;
    out.d_uj = -s / lam_i;
    out.d_lambda = -s * diff / (lam_i * lam_i);
    out.lambda_nest = nest_i;
  } else {
    const double s = sigmoid_neg(diff);
    out.value = log_sigmoid(diff);
    out.d_ui = s;
    out.d_uj = -s;
  }
  return out;
}

TripletCase classify_triplet(NestId nest_i, NestId nest_j, NestId nest_k) {
  if (nest_i == nest_j && nest_j == nest_k) return TripletCase::all_same;
  if (nest_j == nest_k) return TripletCase::tail_shared;
  if (nest_i == nest_j) return TripletCase::head_shared;
  if (nest_i == nest_k) return TripletCase::ends_shared;
  return TripletCase::all_distinct;
}

TripletLogProb triplet_log_prob(const std::array<double, 3>& u,
                                const std::array<NestId, 3>& nests,
                                std::span<const double> lambdas) {
  for (NestId m : nests) lambda_at(lambdas, m);
  TripletLogProb out;
  out.kind = classify_triplet(nests[0], nests[1], nests[2]);
  const int case_index = static_cast<int>(out.kind);

  // Every expression is invariant to a common shift of the utilities.
  const double shift = std::max({u[0], u[1], u[2]});
  const D4 xi = D4::variable(u[0] - shift, 0);
  const D4 xj = D4::variable(u[1] - shift, 1);
  const D4 xk = D4::variable(u[2] - shift, 2);

  NestId lambda_nest = -1;
  switch (out.kind) {
    case TripletCase::all_same:
    case TripletCase::head_shared:
    case TripletCase::ends_shared:
      lambda_nest = nests[0];
      break;
    case TripletCase::tail_shared:
      lambda_nest = nests[1];
      break;
    case TripletCase::all_distinct:
      break;
  }
  const D4 lam = lambda_nest >= 0
                     ? D4::variable(lambdas[static_cast<std::size_t>(lambda_nest)], kSlotLambda)
                     : D4(1.0);

  // P(i > j > k) = P(j > k) - P(j is the best of the three)
  D4 log_p;
  bool have_log = true;
  D4 linear_p;
  switch (out.kind) {
    case TripletCase::all_same: {
      const D4 a = xi / lam, b = xj / lam, c = xk / lam;
      log_p = a + b - logsumexp(std::array{b, c}) - logsumexp(std::array{a, b, c});
      break;
    }
    case TripletCase::tail_shared: {
      const D4 b = xj / lam, c = xk / lam;
      const D4 inner = logsumexp(std::array{b, c});
      log_p = b - inner + xi - logsumexp(std::array{xi, lam * inner});
      break;
    }
    case TripletCase::all_distinct: {
      log_p = xi + xj - logsumexp(std::array{xj, xk}) - logsumexp(std::array{xi, xj, xk});
      break;
    }
    case TripletCase::head_shared: {
      // No cancellation-free form; evaluate the difference directly.
      const D4 a = xi / lam, b = xj / lam;
      const D4 inner = logsumexp(std::array{b, a});
      const D4 first = detail::exp(xj - logsumexp(std::array{xj, xk}));
      const D4 second = detail::exp(b + (lam - D4(1.0)) * inner -
                                    logsumexp(std::array{xk, lam * inner}));
      linear_p = first - second;
      have_log = false;
      if (std::isnan(linear_p.v) || linear_p.v < -1e-12) {
        throw DegenerateProbability(case_index, "ranking probability evaluated to " +
                                                    std::to_string(linear_p.v) + " in case " +
                                                    std::to_string(case_index));
      }
      break;
    }
    case TripletCase::ends_shared: {
      const D4 a = xi / lam, c = xk / lam;
      const D4 log_t = lam * logsumexp(std::array{a, c});
      // T - e^{u_k} = e^{u_k} * expm1(lam * softplus((u_i - u_k) / lam))
      const D4 log_gap = xk + log_expm1(lam * softplus(a - c));
      log_p = xj + log_gap - logsumexp(std::array{xj, xk}) - logsumexp(std::array{xj, log_t});
      break;
    }
  }

  const double log_floor = std::log(kProbabilityFloor);
  if (have_log) {
    if (std::isnan(log_p.v)) {
      throw DegenerateProbability(case_index,
                                  "ranking probability is NaN in case " + std::to_string(case_index));
    }
    if (log_p.v < log_floor) {
      out.value = log_floor;
      out.clamped = true;
    } else {
      out.value = log_p.v;
      out.d_u = {log_p.d[0], log_p.d[1], log_p.d[2]};
      out.d_lambda = log_p.d[kSlotLambda];
    }
  } else {
    if (linear_p.v < kProbabilityFloor) {
      out.value = log_floor;
      out.clamped = true;
    } else {
      const D4 lp = detail::log(linear_p);
      out.value = lp.v;
      out.d_u = {lp.d[0], lp.d[1], lp.d[2]};
      out.d_lambda = lp.d[kSlotLambda];
    }
  }
  out.lambda_nest = lambda_nest;
  if (lambda_nest < 0) out.d_lambda = 0.0;
  return out;
}

double sample_positive_stable(double alpha, Rng& rng) {
  check_lambda(alpha);
  if (alpha == 1.0) return 1.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double v = 0.0;
  while (v <= 0.0) v = unit(rng);
  const double angle = std::numbers::pi * v;
  double w = 0.0;
  while (w <= 0.0) w = unit(rng);
  const double expo = -std::log(w);
  const double log_s = std::log(std::sin(alpha * angle)) - std::log(std::sin(angle)) / alpha +
                       (1.0 - alpha) / alpha *
                           (std::log(std::sin((1.0 - alpha) * angle)) - std::log(expo));
  return std::exp(log_s);
}

Eigen::VectorXd sample_nested_gumbel(const NestConfig& nests, Rng& rng) {
  nests.validate();
  const int m_count = nests.nest_count();
  std::vector<double> log_stable(static_cast<std::size_t>(m_count));
  for (int m = 0; m < m_count; ++m) {
    log_stable[static_cast<std::size_t>(m)] =
        std::log(sample_positive_stable(nests.lambdas[static_cast<std::size_t>(m)], rng));
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd eps(static_cast<Eigen::Index>(nests.membership.size()));
  for (std::size_t i = 0; i < nests.membership.size(); ++i) {
    double v = 0.0;
    while (v <= 0.0) v = unit(rng);
    const double gumbel = -std::log(-std::log(v));
    const auto m = static_cast<std::size_t>(nests.membership[i]);
    eps(static_cast<Eigen::Index>(i)) = nests.lambdas[m] * (gumbel + log_stable[m]);
  }
  return eps;
}

}  // namespace dcpref
