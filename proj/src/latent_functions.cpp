#include "dcpref/latent_functions.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>

#include "dcpref/errors.hpp"

namespace dcpref {

namespace {

double bump(double x) { return std::sin(x) + x / 3.0 + std::sin(12.0 * x); }

std::vector<Eigen::VectorXd> corner_centers(int p) {
  std::vector<Eigen::VectorXd> out;
  for (int mask = 0; mask < (1 << p); ++mask) {
    Eigen::VectorXd c(p);
    // first coordinate is the most significant bit
    for (int k = 0; k < p; ++k) c(k) = (mask >> (p - 1 - k)) & 1 ? 0.65 : 0.15;
    out.push_back(c);
  }
  return out;
}

}  // namespace

LatentFunctionSpec latent_spec(LatentFunction which) {
  LatentFunctionSpec s;
  s.which = which;
  switch (which) {
    case LatentFunction::f2d:
      s.name = "f2D";
      s.dimension = 2;
      s.points_per_dim = 22;
      s.merge_permutations = false;
      break;
    case LatentFunction::f4d:
      s.name = "f4D";
      s.dimension = 4;
      s.points_per_dim = 6;
      s.merge_permutations = true;
      break;
    case LatentFunction::f6d:
      s.name = "f6D";
      s.dimension = 6;
      s.points_per_dim = 5;
      s.merge_permutations = true;
      break;
  }
  s.centers = corner_centers(s.dimension);
  return s;
}

LatentFunctionSpec latent_spec(const std::string& name) {
  std::string key;
  for (char ch : name) key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (!key.empty() && key.front() == 'f') key.erase(key.begin());
  if (key == "2d") return latent_spec(LatentFunction::f2d);
  if (key == "4d") return latent_spec(LatentFunction::f4d);
  if (key == "6d") return latent_spec(LatentFunction::f6d);
  throw ConfigurationError("unknown latent function '" + name + "' (expected 2d, 4d or 6d)");
}

double latent_value(const LatentFunctionSpec& spec, const Eigen::VectorXd& x) {
  if (x.size() != spec.dimension) throw DomainError("input dimension does not match " + spec.name);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!(x(i) >= 0.0 && x(i) <= 1.0)) throw DomainError("input outside [0, 1]");
    sum += bump(x(i));
  }
  if (spec.which == LatentFunction::f2d) return std::max(0.0, -1.0 + sum);
  return sum;
}

Grid build_grid(const LatentFunctionSpec& spec) {
  const int p = spec.dimension;
  const int k = spec.points_per_dim;
  std::vector<double> axis(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) axis[static_cast<std::size_t>(i)] = static_cast<double>(i) / (k - 1);

  // nest of each center
  std::vector<int> center_nest(spec.centers.size());
  int nest_count = 0;
  if (spec.merge_permutations) {
    for (std::size_t c = 0; c < spec.centers.size(); ++c) {
      center_nest[c] = static_cast<int>((spec.centers[c].array() > 0.4).count());
    }
    nest_count = p + 1;
  } else {
    std::iota(center_nest.begin(), center_nest.end(), 0);
    nest_count = static_cast<int>(spec.centers.size());
  }

  Grid g;
  g.nest_count = nest_count;
  g.nest_center_value.assign(static_cast<std::size_t>(nest_count), 0.0);
  for (std::size_t c = 0; c < spec.centers.size(); ++c) {
    g.nest_center_value[static_cast<std::size_t>(center_nest[c])] = latent_value(spec, spec.centers[c]);
  }

  long total = 1;
  for (int d = 0; d < p; ++d) total *= k;
  g.instances.reserve(static_cast<std::size_t>(total));
  g.values.reserve(static_cast<std::size_t>(total));
  std::vector<int> digit(static_cast<std::size_t>(p), 0);
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    for (int d = p - 1; d >= 0; --d) {
      digit[static_cast<std::size_t>(d)] = static_cast<int>(rem % k);
      rem /= k;
    }
    Eigen::VectorXd x(p);
    for (int d = 0; d < p; ++d) x(d) = axis[static_cast<std::size_t>(digit[static_cast<std::size_t>(d)])];
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < spec.centers.size(); ++c) {
      const double dist = (x - spec.centers[c]).squaredNorm();
      if (dist < best) {
        best = dist;
        nearest = c;
      }
    }
    Instance inst;
    inst.id = static_cast<InstanceId>(idx);
    inst.features = x;
    inst.nest_id = center_nest[nearest];
    g.values.push_back(latent_value(spec, x));
    g.instances.push_back(std::move(inst));
  }
  return g;
}

std::vector<double> lambda_means(int nest_count) {
  if (nest_count < 1) throw InvalidParameter("nest count must be positive");
  std::vector<double> out;
  for (int m = 0; m < nest_count; ++m) out.push_back((80 - 5 * m) / 100.0);
  if (out.back() - 0.05 <= 0.0) throw InvalidParameter("too many nests for the scale schedule");
  return out;
}

double sample_truncated_normal(double mean, double sd, double lo, double hi, Rng& rng) {
  if (!(lo < hi) || !(sd > 0.0)) throw InvalidParameter("invalid truncated normal");
  std::normal_distribution<double> gauss(mean, sd);
  for (;;) {
    const double v = gauss(rng);
    if (v >= lo && v <= hi) return v;
  }
}

std::vector<double> sample_lambdas(const std::vector<double>& nest_center_value, Rng& rng) {
  const int n = static_cast<int>(nest_center_value.size());
  const std::vector<double> means = lambda_means(n);
  std::vector<int> rank(static_cast<std::size_t>(n));
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
    return nest_center_value[static_cast<std::size_t>(a)] > nest_center_value[static_cast<std::size_t>(b)];
  });
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const double mu = means[static_cast<std::size_t>(r)];
    out[static_cast<std::size_t>(rank[static_cast<std::size_t>(r)])] =
        std::min(1.0, sample_truncated_normal(mu, 2.0 * mu, mu - 0.05, mu + 0.05, rng));
  }
  return out;
}

}  // namespace dcpref
