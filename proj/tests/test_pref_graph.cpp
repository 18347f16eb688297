#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dcpref/errors.hpp"
#include "dcpref/pref_graph.hpp"

using namespace dcpref;

namespace {

NestConfig nests_of(std::vector<NestId> membership, double lambda = 0.7) {
  int count = 0;
  for (NestId m : membership) count = std::max(count, m + 1);
  return NestConfig{std::vector<double>(static_cast<std::size_t>(count), lambda), std::move(membership)};
}

bool has_offspring(const PreferenceChain& c, InstanceId parent, InstanceId child) {
  return std::find(c.offsprings.begin(), c.offsprings.end(), Relation{parent, child}) != c.offsprings.end();
}

}  // namespace

TEST_CASE("transitive order becomes the main path") {
  // a=0, b=1, c=2; D = {a>b, b>c, a>c}; arcs a>b and b>c selected
  const ComparisonSet d{{0, 1}, {1, 2}, {0, 2}};
  const auto chain = chain_from_selected_arcs(d, {{0, 1}, {1, 2}});
  CHECK(chain.main_path == std::vector<InstanceId>{0, 1, 2});
  CHECK(chain.offsprings.empty());
}

TEST_CASE("two nests with a phase-2 arc") {
  // a=0, b=1 (nest 0); c=2, d=3 (nest 1); phase-2 arc a>c
  const ComparisonSet d{{0, 1}, {2, 3}, {0, 2}};
  const auto chain = chain_from_selected_arcs(d, {{0, 1}, {2, 3}});
  CHECK(chain.main_path == std::vector<InstanceId>{0, 2, 3});
  CHECK(chain.offsprings == std::vector<Relation>{{0, 1}});
  Rng rng(1);
  CHECK(build_initial_chain(d, nests_of({0, 0, 1, 1}), rng) == chain);
}

TEST_CASE("single arc gives a two-node chain") {
  Rng rng(2);
  const auto chain = build_initial_chain({{4, 7}}, nests_of({0, 0, 0, 0, 0, 0, 0, 0}), rng);
  CHECK(chain.main_path == std::vector<InstanceId>{4, 7});
  CHECK(chain.top() == 4);
}

TEST_CASE("empty comparison set is rejected") {
  Rng rng(3);
  CHECK_THROWS_AS(build_initial_chain({}, nests_of({0, 0}), rng), InvalidState);
}

TEST_CASE("extending the chain") {
  PreferenceChain ab{{0, 1}, {}};
  SUBCASE("new instance beats the top") {
    CHECK(extend_chain(ab, 2, true).main_path == std::vector<InstanceId>{2, 0, 1});
  }
  SUBCASE("new instance loses to the top") {
    const auto c = extend_chain(ab, 2, false);
    CHECK(c.main_path == ab.main_path);
    CHECK(has_offspring(c, 0, 2));
  }
  SUBCASE("top already has an offspring") {
    PreferenceChain with_d{{0, 1}, {{0, 3}}};
    const auto c = extend_chain(with_d, 2, false);
    CHECK(has_offspring(c, 0, 3));
    CHECK(has_offspring(c, 0, 2));
    CHECK(c.main_path == with_d.main_path);
  }
  SUBCASE("ids already in the chain are rejected") {
    CHECK_THROWS(extend_chain(ab, 1, true));
  }
}

TEST_CASE("likelihood factorization of an 8-node chain") {
  PreferenceChain chain;
  for (int i = 0; i < 8; ++i) chain.main_path.push_back(i);
  const NestConfig nests = nests_of({0, 1, 0, 1, 1, 0, 0, 1}, 0.8);
  Eigen::VectorXd u(8);
  u << 1.2, 0.3, -0.5, 2.0, 0.1, -1.0, 0.4, 0.9;
  double want = 0.0;
  for (int s : {0, 3}) {
    want += triplet_log_prob({u(s), u(s + 1), u(s + 2)},
                             {nests.membership[s], nests.membership[s + 1], nests.membership[s + 2]}, nests.lambdas)
                .value;
  }
  want += pairwise_log_prob(u(6), u(7), nests.membership[6], nests.membership[7], nests.lambdas).value;
  CHECK(chain_log_likelihood(chain, u, nests).value == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("trivial chains") {
  const NestConfig nests = nests_of({0, 0, 0});
  PreferenceChain single{{1}, {}};
  CHECK(chain_log_likelihood(single, Eigen::VectorXd::Zero(3), nests).value == 0.0);
  PreferenceChain with_child{{0, 1}, {{0, 2}}};
  CHECK(chain_log_likelihood(with_child, Eigen::VectorXd::Zero(3), nests).value ==
        doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-14));
}

TEST_CASE("likelihood is translation invariant within one nest") {
  Rng rng(4);
  std::normal_distribution<double> g;
  PreferenceChain chain{{0, 1, 2, 3, 4}, {{0, 5}}};
  const NestConfig nests = nests_of({0, 0, 0, 0, 0, 0}, 0.6);
  Eigen::VectorXd u(6);
  for (int i = 0; i < 6; ++i) u(i) = g(rng);
  const double a = chain_log_likelihood(chain, u, nests).value;
  const double b = chain_log_likelihood(chain, (u.array() + 3.7).matrix(), nests).value;
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("likelihood gradient matches central differences for random chains") {
  Rng rng(5);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> nest_pick(0, 2);
  std::uniform_real_distribution<double> lam(0.4, 1.0);
  for (int len = 1; len <= 12; ++len) {
    for (int rep = 0; rep < 5; ++rep) {
      const int extra = len / 3;
      const int n = len + extra;
      std::vector<NestId> membership(static_cast<std::size_t>(n));
      for (auto& m : membership) m = nest_pick(rng);
      NestConfig nests{{lam(rng), lam(rng), lam(rng)}, membership};
      PreferenceChain chain;
      for (int i = 0; i < len; ++i) chain.main_path.push_back(i);
      for (int k = 0; k < extra; ++k) chain.offsprings.push_back({k % len, len + k});
      Eigen::VectorXd u(n);
      for (int i = 0; i < n; ++i) u(i) = g(rng);
      const auto r = chain_log_likelihood(chain, u, nests);
      const double h = 1e-6;
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd up = u, dn = u;
        up(i) += h;
        dn(i) -= h;
        const double fd = (chain_log_likelihood(chain, up, nests).value - chain_log_likelihood(chain, dn, nests).value) / (2 * h);
        CHECK(std::abs(r.grad_u(i) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      }
      for (int m = 0; m < 3; ++m) {
        NestConfig up = nests, dn = nests;
        up.lambdas[m] = std::min(1.0, nests.lambdas[m] + h);
        dn.lambdas[m] = nests.lambdas[m] - h;
        const double fd = (chain_log_likelihood(chain, u, up).value - chain_log_likelihood(chain, u, dn).value) /
                          (up.lambdas[m] - dn.lambdas[m]);
        CHECK(std::abs(r.grad_lambda(m) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("initial chain properties over random comparison sets") {
  Rng rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    // Two instances per nest, one within-nest arc each, then a random total
    // order of the winners observed through consecutive arcs.
    const int nests_n = 2 + rep % 4;
    std::vector<NestId> membership;
    ComparisonSet d;
    std::vector<InstanceId> winners;
    for (int m = 0; m < nests_n; ++m) {
      membership.push_back(m);
      membership.push_back(m);
      d.push_back({2 * m, 2 * m + 1});
      winners.push_back(2 * m);
    }
    std::shuffle(winners.begin(), winners.end(), rng);
    for (std::size_t k = 0; k + 1 < winners.size(); ++k) d.push_back({winners[k], winners[k + 1]});
    const auto chain = build_initial_chain(d, nests_of(membership), rng);
    auto path = chain.main_path;
    std::sort(path.begin(), path.end());
    CHECK(std::adjacent_find(path.begin(), path.end()) == path.end());
    CHECK(chain.top() == winners.front());
    CHECK(chain.main_path.size() == winners.size() + 1);
    for (const auto& off : chain.offsprings) CHECK_FALSE(std::binary_search(path.begin(), path.end(), off.loser));
    CHECK(chain.members().size() == membership.size());
  }
}
