#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dcpref/acquisition.hpp"

using namespace dcpref;

TEST_CASE("probability improvement at the incumbent mean is one half") {
  for (double s : {0.0, 0.3, 2.0})
    for (double lam : {0.4, 1.0}) CHECK(prob_improvement({1.7, s, 1.7, 0.5 * s, lam}) == 0.5);
}

TEST_CASE("noise-free reduction") {
  CHECK(pi_gamma({0.0, 0.0, 0.0, 0.0, 0.6}) == 1.0);
  CHECK(prob_improvement({std::log(9.0), 0.0, 0.0, 0.0, 1.0}) == doctest::Approx(0.9).epsilon(1e-14));
}

TEST_CASE("gamma formula") {
  const AcquisitionInput in{0.0, 0.8, 0.0, 0.6, 0.5};
  CHECK(pi_gamma(in) == doctest::Approx(std::sqrt(1.0 + std::numbers::pi * 1.0 / (8.0 * 0.25))).epsilon(1e-14));
}

TEST_CASE("probability improvement is monotone and bounded") {
  double prev = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double mu = -5.0 + 0.1 * k;
    const double p = prob_improvement({mu, 0.7, 0.0, 0.4, 0.8});
    CHECK(p > prev);
    CHECK(p < 1.0);
    prev = p;
  }
  CHECK(prob_improvement({0.0, 0.7, 1.0, 0.4, 0.8}) < prob_improvement({0.0, 0.7, 0.5, 0.4, 0.8}));
  // larger sigma pulls a positive gap toward one half
  double last = 1.0;
  for (double s : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    const double p = prob_improvement({1.0, s, 0.0, 0.0, 1.0});
    CHECK(p < last);
    CHECK(p > 0.5);
    last = p;
  }
}

TEST_CASE("shift invariance") {
  for (double shift : {-3.0, 0.0, 10.0}) {
    CHECK(prob_improvement({0.4 + shift, 0.3, 0.1 + shift, 0.2, 0.7}) ==
          doctest::Approx(prob_improvement({0.4, 0.3, 0.1, 0.2, 0.7})).epsilon(1e-12));
  }
}

TEST_CASE("ucb exploration weight") {
  CHECK(std::abs(ucb_tau(1, 2, 1.0) - 2.0 * std::log(std::numbers::pi * std::numbers::pi / 3.0)) < 1e-12);
  CHECK(adaptive_ucb(0.2, 1.0, 1, 2, 1.0) == doctest::Approx(0.2 + std::sqrt(2.0 * std::log(std::numbers::pi * std::numbers::pi / 3.0))));
  CHECK(adaptive_ucb(-1.3, 0.0, 7, 6, 0.2) == -1.3);
  for (int t = 1; t < 30; ++t) CHECK(ucb_tau(t + 1, 6, 0.5) > ucb_tau(t, 6, 0.5));
  CHECK(adaptive_ucb(0.5, 0.3, 4, 2, 0.5) < adaptive_ucb(0.6, 0.3, 4, 2, 0.5));
  CHECK(adaptive_ucb(0.5, 0.3, 4, 2, 0.5) < adaptive_ucb(0.5, 0.4, 4, 2, 0.5));
}

TEST_CASE("delta draws stay in the open unit interval") {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const double d = draw_delta(rng);
    CHECK(d > 0.0);
    CHECK(d < 1.0);
  }
  CHECK(to_string(AcquisitionKind::ucb) == "ucb");
  CHECK(acquisition_kind_from_string("pi") == AcquisitionKind::pi);
}
