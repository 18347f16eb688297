#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "dcpref/dgp_surrogate.hpp"
#include "dcpref/errors.hpp"

using namespace dcpref;

namespace {

EpState random_state(int n, int p, int d, int m, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd x(n, p);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < p; ++k) x(i, k) = g(rng);
  DgpConfig cfg;
  cfg.hidden_dim = d;
  cfg.max_inducing = m;
  EpState st = init_inducing(x, cfg, rng);
  auto& prm = st.params;
  prm.log_a1 = 0.3 * g(rng);
  prm.log_l1 = 0.3 * g(rng) + 0.5;
  prm.log_a2 = 0.3 * g(rng);
  prm.log_l2 = 0.3 * g(rng);
  prm.log_noise = std::log(0.05);
  for (int r = 0; r < prm.mean_weights.rows(); ++r)
    for (int c = 0; c < prm.mean_weights.cols(); ++c) prm.mean_weights(r, c) = 0.5 * g(rng);
  auto randomize = [&](LayerFactor& f) {
    for (int i = 0; i < f.eta.size(); ++i) f.eta(i) = 0.2 * g(rng);
    for (int i = 0; i < f.chol.rows(); ++i)
      for (int j = 0; j <= i; ++j) f.chol(i, j) = (i == j ? 0.3 : 0.05) * g(rng);
  };
  for (auto& f : prm.hidden) randomize(f);
  randomize(prm.top);
  st.data_count = n;
  return st;
}

Eigen::MatrixXd random_inputs(int n, int p, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd x(n, p);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < p; ++k) x(i, k) = g(rng);
  return x;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("pack and unpack round-trip") {
  Rng rng(1);
  const EpState st = random_state(8, 2, 2, 5, rng);
  DgpParams copy = st.params.zeros_like();
  copy.unpack(st.params.pack());
  CHECK((copy.pack() - st.params.pack()).norm() == 0.0);
  CHECK(copy.z1 == st.params.z1);
  CHECK(copy.top.chol == st.params.top.chol);
}

TEST_CASE("zero factors leave the prior: cavity equals posterior") {
  Rng rng(2);
  Eigen::MatrixXd x = random_inputs(6, 2, rng);
  DgpConfig cfg;
  EpState st = init_inducing(x, cfg, rng);
  st.data_count = 6;
  const auto a = propagate_moments(x.row(0).transpose(), st, true);
  const auto b = propagate_moments(x.row(0).transpose(), st, false);
  CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-12));
  CHECK(a.var == doctest::Approx(b.var).epsilon(1e-12));
  CHECK(a.var >= 0.0);
  CHECK(a.hidden_var(0) >= std::exp(st.params.log_noise) - 1e-15);
}

TEST_CASE("energy gradient wrt u matches central differences") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 7;
    EpState st = random_state(n, 2, 1 + rep % 2, 5, rng);
    Eigen::MatrixXd x = random_inputs(n, 2, rng);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd u(n);
    for (int i = 0; i < n; ++i) u(i) = g(rng);
    const auto r = ep_energy(u, x, st, true);
    for (int i = 0; i < n; ++i) {
      const double h = 1e-5;
      Eigen::VectorXd up = u, dn = u;
      up(i) += h;
      dn(i) -= h;
      const double fd = (ep_energy(up, x, st, false).value - ep_energy(dn, x, st, false).value) / (2 * h);
      CHECK(rel_err(r.grad_u(i), fd) < 1e-6);
    }
  }
}

TEST_CASE("energy gradient wrt every parameter group matches central differences") {
  Rng rng(4);
  for (int rep = 0; rep < 6; ++rep) {
    const int n = 6, p = 2, d = 1 + rep % 2, m = 4;
    EpState st = random_state(n, p, d, m, rng);
    Eigen::MatrixXd x = random_inputs(n, p, rng);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd u(n);
    for (int i = 0; i < n; ++i) u(i) = g(rng);
    const auto r = ep_energy(u, x, st, true);
    const Eigen::VectorXd analytic = r.grad.pack();
    const Eigen::VectorXd theta = st.params.pack();
    double worst = 0.0;
    Eigen::Index worst_at = -1;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      const double h = 1e-5;
      EpState a = st, b = st;
      Eigen::VectorXd tp = theta, tm = theta;
      tp(k) += h;
      tm(k) -= h;
      a.params.unpack(tp);
      b.params.unpack(tm);
      const double fd = (ep_energy(u, x, a, false).value - ep_energy(u, x, b, false).value) / (2 * h);
      const double e = rel_err(analytic(k), fd);
      if (e > worst) {
        worst = e;
        worst_at = k;
      }
    }
    INFO("worst parameter index " << worst_at << " of " << theta.size());
    CHECK(analytic.norm() > 1e-2);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("energy rejects mismatched inputs") {
  Rng rng(5);
  EpState st = random_state(5, 2, 1, 4, rng);
  Eigen::MatrixXd x = random_inputs(5, 3, rng);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(5);
  CHECK_THROWS(ep_energy(u, x, st, false));
}

TEST_CASE("whitened energy with an outer adjoint matches central differences") {
  Rng rng(6);
  for (int rep = 0; rep < 6; ++rep) {
    const int n = 6, p = 2, d = 1 + rep % 2, m = 4;
    EpState st = random_state(n, p, d, m, rng);
    Eigen::MatrixXd x = random_inputs(n, p, rng);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd eps(n), outer(n);
    for (int i = 0; i < n; ++i) eps(i) = g(rng), outer(i) = g(rng);
    // total(eps, theta) = J(eps, theta) + outer . u(eps, theta)
    auto total = [&](const Eigen::VectorXd& e, const EpState& s) {
      const auto r = ep_energy_whitened(e, x, s, false);
      return r.value + outer.dot(r.utilities);
    };
    const auto r = ep_energy_whitened(eps, x, st, true, outer);
    const double h = 1e-5;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd up = eps, dn = eps;
      up(i) += h;
      dn(i) -= h;
      CHECK(rel_err(r.grad_u(i), (total(up, st) - total(dn, st)) / (2 * h)) < 1e-6);
    }
    const Eigen::VectorXd analytic = r.grad.pack();
    const Eigen::VectorXd theta = st.params.pack();
    double worst = 0.0;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      EpState a = st, b = st;
      Eigen::VectorXd tp = theta, tm = theta;
      tp(k) += h;
      tm(k) -= h;
      a.params.unpack(tp);
      b.params.unpack(tm);
      worst = std::max(worst, rel_err(analytic(k), (total(eps, a) - total(eps, b)) / (2 * h)));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("whitened utilities are the cavity moments at eps = 0") {
  Rng rng(7);
  EpState st = random_state(5, 2, 1, 4, rng);
  Eigen::MatrixXd x = random_inputs(5, 2, rng);
  const auto r = ep_energy_whitened(Eigen::VectorXd::Zero(5), x, st, false);
  CHECK((r.utilities - r.cavity_mean).norm() == 0.0);
  const auto plain = ep_energy(r.utilities, x, st, false);
  CHECK((plain.cavity_var - r.cavity_var).norm() == 0.0);
}

namespace {

double spearman(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  auto ranks = [](const Eigen::VectorXd& v) {
    std::vector<int> idx(static_cast<std::size_t>(v.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return v(x) < v(y); });
    Eigen::VectorXd r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r(idx[k]) = static_cast<double>(k);
    return r;
  };
  const Eigen::VectorXd ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  return 1.0 - 6.0 * (ra - rb).squaredNorm() / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("one hidden unit ranks a monotone 1D problem like the GP") {
  const int n = 15;
  Eigen::MatrixXd x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = static_cast<double>(i) / (n - 1);
  PreferenceChain chain;
  for (int i = n - 1; i >= 0; --i) chain.main_path.push_back(i);  // larger x preferred
  NestConfig two{{0.8, 0.8}, std::vector<NestId>(n, 0)};
  for (int i = 0; i < n; ++i) two.membership[static_cast<std::size_t>(i)] = i % 2;
  std::vector<InstanceId> labeled(n);
  for (int i = 0; i < n; ++i) labeled[static_cast<std::size_t>(i)] = i;
  const FitData data{&x, labeled, &chain, &two};

  auto gp = make_surrogate(SurrogateKind::gp, {}, 1);
  auto dgp = make_surrogate(SurrogateKind::dgp1, {}, 1);
  gp->fit(data);
  dgp->fit(data);
  Eigen::MatrixXd grid(40, 1);
  for (int i = 0; i < 40; ++i) grid(i, 0) = static_cast<double>(i) / 39.0;
  Eigen::VectorXd mg, vg, md, vd;
  gp->predict(grid, mg, vg);
  dgp->predict(grid, md, vd);
  CHECK(spearman(mg, md) >= 0.8);
  CHECK(vd.minCoeff() > 0.0);
  const auto& st = dgp->state();
  CHECK(st.ids[static_cast<std::size_t>(st.x_star_index)] == n - 1);
}

TEST_CASE("inducing initialization takes rows of the labeled inputs") {
  Rng rng(11);
  const Eigen::MatrixXd x = random_inputs(5, 3, rng);
  DgpConfig cfg;
  cfg.hidden_dim = 2;
  Rng a(42), b(42);
  const EpState sa = init_inducing(x, cfg, a);
  const EpState sb = init_inducing(x, cfg, b);
  REQUIRE(sa.params.z1.rows() == 5);
  CHECK(sa.params.z2.rows() == 5);
  CHECK(sa.params.z2.cols() == 2);
  CHECK((sa.params.pack() - sb.params.pack()).norm() == 0.0);
  std::vector<bool> seen(5, false);
  for (int m = 0; m < 5; ++m) {
    for (int i = 0; i < 5; ++i) {
      if ((sa.params.z1.row(m) - x.row(i)).norm() == 0.0) seen[static_cast<std::size_t>(i)] = true;
    }
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }));

  cfg.max_inducing = 3;
  Rng c(42);
  const EpState capped = init_inducing(random_inputs(9, 3, rng), cfg, c);
  CHECK(capped.params.inducing_count() == 3);
  CHECK_THROWS_AS(init_inducing(x.topRows(1), cfg, c), InvalidParameter);
}

TEST_CASE("a near-deterministic identity hidden layer reduces to a sparse GP") {
  // Hidden layer h(x) = x with almost no variance, so the top layer is a
  // plain GP over x conditioned on q(v) with s = R v. The reference below
  // is that sparse-GP predictive computed directly.
  Rng rng(12);
  const int m = 6;
  Eigen::MatrixXd x(m, 1);
  for (int i = 0; i < m; ++i) x(i, 0) = -1.0 + 0.4 * i;
  DgpConfig cfg;
  cfg.hidden_noise = 1e-8;
  EpState st = init_inducing(x, cfg, rng);
  auto& prm = st.params;
  prm.log_a1 = std::log(1e-8);
  prm.mean_weights.setOnes();
  prm.z2 = prm.z1;
  prm.log_a2 = std::log(1.5);
  prm.log_l2 = std::log(0.7);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < m; ++i) prm.top.eta(i) = 0.3 * g(rng);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j <= i; ++j) prm.top.chol(i, j) = (i == j ? 0.4 : 0.1) * g(rng);
  st.data_count = 3;

  const double a2 = 1.5, l2 = 0.7;
  auto k = [&](double p, double q) { return a2 * std::exp(-0.5 * (p - q) * (p - q) / (l2 * l2)); };
  Eigen::MatrixXd kzz(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) kzz(i, j) = k(prm.z2(i, 0), prm.z2(j, 0));
  kzz.diagonal().array() += 1e-6 * a2;
  const Eigen::MatrixXd r = kzz.llt().matrixL();
  const Eigen::MatrixXd c = prm.top.chol.triangularView<Eigen::Lower>();
  const Eigen::MatrixXd prec = Eigen::MatrixXd::Identity(m, m) + 3.0 * c * c.transpose();
  const Eigen::MatrixXd cov = prec.inverse();
  const Eigen::VectorXd mu = cov * (3.0 * prm.top.eta);

  for (double xs : {-1.3, -0.55, 0.0, 0.35, 1.1, 2.5}) {
    Eigen::VectorXd kx(m);
    for (int i = 0; i < m; ++i) kx(i) = k(xs, prm.z2(i, 0));
    const Eigen::VectorXd w = r.triangularView<Eigen::Lower>().solve(kx);  // R^{-1} k
    const double mean = w.dot(mu);
    const double var = a2 - w.squaredNorm() + w.dot(cov * w);
    const auto got = propagate_moments(Eigen::VectorXd::Constant(1, xs), st, false);
    CHECK(std::abs(got.mean - mean) <= 0.05 * std::max(1.0, std::abs(mean)));
    CHECK(std::abs(got.var - var) <= 0.05 * var);
  }
}

TEST_CASE("with zero factors the energy is the sum of predictive log densities") {
  Rng rng(13);
  const Eigen::MatrixXd x = random_inputs(7, 2, rng);
  DgpConfig cfg;
  EpState st = init_inducing(x, cfg, rng);
  st.data_count = 7;
  Eigen::VectorXd u(7);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 7; ++i) u(i) = g(rng);
  const auto e = ep_energy(u, x, st, false);
  const double noise = std::exp(st.params.log_noise);
  double expect = 0.0;
  for (int i = 0; i < 7; ++i) {
    const auto pm = propagate_moments(x.row(i).transpose(), st, true);
    const double v = pm.var + noise;
    CHECK(e.cavity_var(i) >= noise);
    CHECK(e.cavity_var(i) == doctest::Approx(v).epsilon(1e-10));
    expect += -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (u(i) - pm.mean) * (u(i) - pm.mean) / v;
  }
  CHECK(e.value == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("a single comparison puts the winner above the loser") {
  Eigen::MatrixXd x(2, 2);
  x << 0.2, 0.7, 0.8, 0.1;
  PreferenceChain chain;
  chain.main_path = {1, 0};
  NestConfig nests{{0.8, 0.8}, {0, 1}};
  const FitData data{&x, {0, 1}, &chain, &nests};
  auto dgp = make_surrogate(SurrogateKind::dgp1, {}, 3);
  dgp->fit(data);
  const auto& st = dgp->state();
  CHECK(st.u_star(st.index_of(1)) > st.u_star(st.index_of(0)));
  CHECK(st.ids[static_cast<std::size_t>(st.x_star_index)] == 1);
}

TEST_CASE("fitted predictions are positive, deterministic and revert far from data") {
  const int n = 20;
  Eigen::MatrixXd x(n, 1);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < n; ++i) x(i, 0) = unif(rng);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return x(a, 0) > x(b, 0); });
  PreferenceChain chain;
  chain.main_path = order;
  const NestConfig nests{{1.0}, std::vector<NestId>(n, 0)};
  std::vector<InstanceId> labeled(n);
  for (int i = 0; i < n; ++i) labeled[static_cast<std::size_t>(i)] = i;
  const FitData data{&x, labeled, &chain, &nests};
  SurrogateConfig cfg;
  cfg.fixed_lambdas = std::vector<double>{1.0};

  for (const auto kind : {SurrogateKind::dgp1, SurrogateKind::dgp5}) {
    CAPTURE(static_cast<int>(kind));
    auto dgp = make_surrogate(kind, cfg, 5);
    dgp->fit(data);
    const auto& st = dgp->state();
    CHECK(st.objective >= st.initial_objective);

    Eigen::VectorXd fitted(n);
    for (int i = 0; i < n; ++i) fitted(i) = st.u_star(st.index_of(i));
    CHECK(spearman(x.col(0), fitted) >= 0.9);

    Rng probe_rng(14);
    const Eigen::MatrixXd probe = random_inputs(10000, 1, probe_rng) * 3.0;
    Eigen::VectorXd mean, var, mean2, var2;
    dgp->predict(probe, mean, var);
    CHECK(var.minCoeff() > 0.0);
    CHECK(mean.allFinite());
    dgp->predict(probe, mean2, var2);
    CHECK((mean - mean2).norm() == 0.0);
    CHECK((var - var2).norm() == 0.0);

    // The mean at a training input is within two predictive sd of u*.
    Eigen::VectorXd ml, vl;
    dgp->predict(x, ml, vl);
    for (int i = 0; i < n; ++i) CHECK(std::abs(ml(i) - fitted(i)) <= 2.0 * std::sqrt(vl(i)));

    const auto& prm = dynamic_cast<const DgpSurrogate&>(*dgp).ep_state().params;
    Eigen::MatrixXd remote(1, 1);
    remote << 50.0;
    Eigen::VectorXd mr, vr;
    dgp->predict(remote, mr, vr);
    CHECK(vr(0) >= 0.5 * std::exp(prm.log_a2));
  }
}

TEST_CASE("averaged kernel gradients wrt W and l2 match central differences") {
  Rng rng(21);
  EpState st = random_state(7, 3, 2, 5, rng);
  const Eigen::MatrixXd x = random_inputs(7, 3, rng);
  const detail::DeepKernelInputs kin = detail::deep_kernel_inputs(x, st);
  const Eigen::MatrixXd w = st.params.mean_weights;
  const double log_l2 = 0.2;
  Eigen::MatrixXd adj = random_inputs(7, 7, rng);
  adj = 0.5 * (adj + adj.transpose()).eval();
  auto f = [&](const Eigen::MatrixXd& ww, double ll) {
    return (adj.array() * detail::deep_kernel(kin, ww, ll).array()).sum();
  };
  const Eigen::MatrixXd k = detail::deep_kernel(kin, w, log_l2);
  CHECK((k - k.transpose()).norm() == 0.0);
  Eigen::MatrixXd grad_w;
  double grad_l2 = 0.0;
  detail::deep_kernel_backward(kin, w, log_l2, k, adj, grad_w, grad_l2);
  const double h = 1e-6;
  CHECK(rel_err(grad_l2, (f(w, log_l2 + h) - f(w, log_l2 - h)) / (2 * h)) < 1e-6);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      Eigen::MatrixXd wp = w, wm = w;
      wp(r, c) += h;
      wm(r, c) -= h;
      CHECK(rel_err(grad_w(r, c), (f(wp, log_l2) - f(wm, log_l2)) / (2 * h)) < 1e-6);
    }
  }
}
