#pragma once

// Forward-mode dual numbers with a fixed number of tangent directions.
// Used to get exact gradients of the closed-form ranking probabilities.

#include <array>
#include <cmath>
#include <cstddef>

namespace dcpref::detail {

template <std::size_t N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constants are convenient

  static Dual variable(double value, std::size_t slot) {
    Dual x(value);
    x.d[slot] = 1.0;
    return x;
  }
};

template <std::size_t N>
Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v + b.v);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = a.d[k] + b.d[k];
  return r;
}

template <std::size_t N>
Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v - b.v);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = a.d[k] - b.d[k];
  return r;
}

template <std::size_t N>
Dual<N> operator-(const Dual<N>& a) {
  Dual<N> r(-a.v);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = -a.d[k];
  return r;
}

template <std::size_t N>
Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v * b.v);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = a.d[k] * b.v + a.v * b.d[k];
  return r;
}

template <std::size_t N>
Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  const double inv = 1.0 / b.v;
  Dual<N> r(a.v * inv);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = (a.d[k] - r.v * b.d[k]) * inv;
  return r;
}

// Applies a scalar function with known derivative.
template <std::size_t N>
Dual<N> chain(const Dual<N>& a, double value, double slope) {
  Dual<N> r(value);
  for (std::size_t k = 0; k < N; ++k) r.d[k] = slope * a.d[k];
  return r;
}

template <std::size_t N>
Dual<N> exp(const Dual<N>& a) {
  const double e = std::exp(a.v);
  return chain(a, e, e);
}

template <std::size_t N>
Dual<N> log(const Dual<N>& a) {
  return chain(a, std::log(a.v), 1.0 / a.v);
}

template <std::size_t N>
Dual<N> log1p(const Dual<N>& a) {
  return chain(a, std::log1p(a.v), 1.0 / (1.0 + a.v));
}

template <std::size_t N>
Dual<N> expm1(const Dual<N>& a) {
  return chain(a, std::expm1(a.v), std::exp(a.v));
}

// base^power for a positive base.
template <std::size_t N>
Dual<N> pow(const Dual<N>& base, const Dual<N>& power) {
  return exp(power * log(base));
}

}  // namespace dcpref::detail
