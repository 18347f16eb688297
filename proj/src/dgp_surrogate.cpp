#include "dcpref/dgp_surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <unordered_map>
#include <utility>

#include "dcpref/errors.hpp"
#include "dcpref/kernel.hpp"
#include "dcpref/linalg.hpp"

namespace dcpref {

namespace {

// Relative jitter folded into both inducing Gram matrices.
constexpr double kRelJitter = 1e-6;
constexpr double kLogBound = 10.0;
constexpr double kRhoBound = 12.0;

struct FactorMoments {
  Eigen::VectorXd h;
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  double phi = 0.0;  // 0.5 h^T P^{-1} h - 0.5 log|P|
};

FactorMoments factor_moments(const LayerFactor& f, double scale) {
  const Eigen::Index m = f.eta.size();
  const Eigen::MatrixXd c = f.chol.triangularView<Eigen::Lower>();
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(m, m) + scale * (c * c.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) throw NumericalMomentError("factor precision is not positive definite");
  FactorMoments out;
  out.h = scale * f.eta;
  out.sigma = llt.solve(Eigen::MatrixXd::Identity(m, m));
  out.sigma = symmetrize(out.sigma);
  out.mu = out.sigma * out.h;
  const Eigen::MatrixXd l = llt.matrixL();
  out.phi = 0.5 * out.h.dot(out.mu) - 0.5 * log_det_from_cholesky(l);
  return out;
}

Eigen::MatrixXd inducing_gram(const Eigen::MatrixXd& z, double a, double l) {
  Eigen::MatrixXd k = se_gram(z, {a, l});
  k.diagonal().array() += kRelJitter * a;
  return k;
}

// Everything about one posterior (full or cavity) that does not depend on x.
struct ForwardCache {
  double a1 = 0, l1 = 0, a2 = 0, l2 = 0, noise = 0;
  Eigen::MatrixXd k1, r1, k2, r2;
  std::vector<FactorMoments> hidden;
  FactorMoments top;
  Eigen::VectorXd b;      // R2^{-T} mu_top
  Eigen::MatrixXd bm;     // R2^{-T} (mu mu^T + Sigma - I) R2^{-1}
  Eigen::MatrixXd dsum;   // |z_m - z_m'|^2 / (4 l2^2)
};

ForwardCache build_cache(const DgpParams& p, double scale) {
  ForwardCache c;
  c.a1 = std::exp(p.log_a1);
  c.l1 = std::exp(p.log_l1);
  c.a2 = std::exp(p.log_a2);
  c.l2 = std::exp(p.log_l2);
  c.noise = std::exp(p.log_noise);
  c.k1 = inducing_gram(p.z1, c.a1, c.l1);
  c.r1 = cholesky_with_jitter(c.k1).lower;
  c.k2 = inducing_gram(p.z2, c.a2, c.l2);
  c.r2 = cholesky_with_jitter(c.k2).lower;
  for (const auto& f : p.hidden) c.hidden.push_back(factor_moments(f, scale));
  c.top = factor_moments(p.top, scale);
  const auto r2 = std::as_const(c.r2).triangularView<Eigen::Lower>();
  c.b = r2.transpose().solve(c.top.mu);
  const Eigen::Index m = p.z2.rows();
  Eigen::MatrixXd cm = c.top.mu * c.top.mu.transpose() + c.top.sigma - Eigen::MatrixXd::Identity(m, m);
  Eigen::MatrixXd t = r2.transpose().solve(cm);                   // R^{-T} Cm
  c.bm = symmetrize(r2.transpose().solve(t.transpose()).transpose());  // (R^{-T} (R^{-T} Cm)^T)^T
  c.dsum = squared_distances(p.z2, p.z2) / (4.0 * c.l2 * c.l2);
  return c;
}

struct HiddenBatch {
  Eigen::MatrixXd kx;  // M x n
  Eigen::MatrixXd a;   // R1^{-1} kx
  Eigen::MatrixXd mh;  // d x n
  Eigen::MatrixXd vh;  // d x n
  std::vector<Eigen::MatrixXd> sigma_a;  // Sigma_j a, per j
};

HiddenBatch hidden_batch(const DgpParams& p, const ForwardCache& c, const Eigen::MatrixXd& x) {
  HiddenBatch hb;
  hb.kx = se_cross(p.z1, x, {c.a1, c.l1});
  hb.a = c.r1.triangularView<Eigen::Lower>().solve(hb.kx);
  const Eigen::Index d = p.hidden_dim();
  hb.mh = p.mean_weights * x.transpose();
  hb.vh.resize(d, x.rows());
  const Eigen::RowVectorXd aa = hb.a.colwise().squaredNorm();
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto& f = c.hidden[static_cast<std::size_t>(j)];
    hb.mh.row(j) += f.mu.transpose() * hb.a;
    hb.sigma_a.push_back(f.sigma * hb.a);
    hb.vh.row(j) = (c.a1 - aa.array() + hb.a.cwiseProduct(hb.sigma_a.back()).colwise().sum().array() + c.noise)
                       .matrix();
  }
  return hb;
}

// Per hidden unit, the variance of h(xa_i) - h(xb_j) under the hidden
// posterior: vh_i + vh_j - 2 cov_ij, where cov_ij is the posterior
// covariance of the hidden GP. The hidden noise is independent per input.
std::vector<Eigen::ArrayXXd> difference_variances(const DgpParams& p, const ForwardCache& c,
                                                  const Eigen::MatrixXd& xa, const HiddenBatch& ha,
                                                  const Eigen::MatrixXd& xb, const HiddenBatch& hb) {
  const Eigen::MatrixXd shared = se_cross(xa, xb, {c.a1, c.l1}) - ha.a.transpose() * hb.a;
  std::vector<Eigen::ArrayXXd> out;
  for (Eigen::Index d = 0; d < p.hidden_dim(); ++d) {
    const Eigen::MatrixXd cov = shared + ha.sigma_a[static_cast<std::size_t>(d)].transpose() * hb.a;
    Eigen::ArrayXXd s = (-2.0 * cov).array();
    s.colwise() += ha.vh.row(d).transpose().array();
    s.rowwise() += hb.vh.row(d).array();
    out.push_back(s.max(0.0));
  }
  return out;
}

// Unit-scale top-layer kernel averaged over the hidden values.
Eigen::MatrixXd averaged_kernel(const Eigen::MatrixXd& mha, const Eigen::MatrixXd& mhb,
                                const std::vector<Eigen::ArrayXXd>& dvar, double l2sq) {
  Eigen::ArrayXXd logk = Eigen::ArrayXXd::Zero(mha.cols(), mhb.cols());
  for (std::size_t d = 0; d < dvar.size(); ++d) {
    const Eigen::ArrayXXd s = dvar[d] + l2sq;
    Eigen::ArrayXXd diff = Eigen::ArrayXXd::Zero(mha.cols(), mhb.cols());
    diff.colwise() += mha.row(static_cast<Eigen::Index>(d)).transpose().array();
    diff.rowwise() -= mhb.row(static_cast<Eigen::Index>(d)).array();
    logk += 0.5 * (l2sq / s).log() - 0.5 * diff.square() / s;
  }
  return logk.exp().matrix();
}

struct PointTop {
  Eigen::MatrixXd delta;  // M x d, mh_j - z_mj
  Eigen::VectorXd s, t;   // l2^2 + vh, l2^2 / 2 + vh
  Eigen::VectorXd psi1;
  Eigen::MatrixXd psi2;
  double m = 0.0;
  double v = 0.0;
};

void top_moments(const DgpParams& p, const ForwardCache& c, const Eigen::VectorXd& mh, const Eigen::VectorXd& vh,
                 const Eigen::MatrixXd& bm, PointTop& out) {
  const double l2sq = c.l2 * c.l2;
  out.delta = (-p.z2).rowwise() + mh.transpose();
  out.s = (l2sq + vh.array()).matrix();
  out.t = (0.5 * l2sq + vh.array()).matrix();
  if (out.s.minCoeff() <= 0.0 || out.t.minCoeff() <= 0.0) {
    throw NumericalMomentError("hidden-layer variance is not positive");
  }
  const Eigen::MatrixXd d2 = out.delta.array().square().matrix();
  const double c1 = std::log(c.a2) + 0.5 * (l2sq / out.s.array()).log().sum();
  out.psi1 = (c1 - (d2 * (0.5 / out.s.array()).matrix()).array()).exp().matrix();
  const double c2 = 2.0 * std::log(c.a2) + 0.5 * (l2sq / (2.0 * out.t.array())).log().sum();
  const Eigen::VectorXd inv_t = out.t.cwiseInverse();
  const Eigen::VectorXd q = d2 * (0.125 * inv_t);
  Eigen::MatrixXd e = 0.25 * (out.delta * inv_t.asDiagonal() * out.delta.transpose());
  e.colwise() += q;
  e.rowwise() += q.transpose();
  out.psi2 = (c2 - c.dsum.array() - e.array()).exp().matrix();
  out.m = out.psi1.dot(c.b);
  out.v = c.a2 + bm.cwiseProduct(out.psi2).sum() - out.m * out.m;
}

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a) {
  const Eigen::MatrixXd l = cholesky_with_jitter(a).lower;
  const auto lt = l.triangularView<Eigen::Lower>();
  const Eigen::MatrixXd li = lt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return li.transpose() * li;
}

LayerFactor zero_factor(Eigen::Index m) {
  return {Eigen::VectorXd::Zero(m), Eigen::MatrixXd::Zero(m, m)};
}

// Adjoint of the shared-factor parameters given the data-term adjoints of
// the cavity moments, including the log-normalizer terms of the energy.
void factor_backward(const LayerFactor& f, const FactorMoments& q, const FactorMoments& cav, double n,
                     const Eigen::VectorXd& mu_bar, const Eigen::MatrixXd& sigma_bar, LayerFactor& out) {
  const Eigen::MatrixXd total = symmetrize(sigma_bar + mu_bar * cav.h.transpose());
  Eigen::VectorXd h_c = cav.sigma * mu_bar + n * cav.mu;
  Eigen::MatrixXd p_c = -cav.sigma * total * cav.sigma -
                        0.5 * n * (cav.mu * cav.mu.transpose() + cav.sigma);
  const Eigen::VectorXd h_q = (1.0 - n) * q.mu;
  const Eigen::MatrixXd p_q = -0.5 * (1.0 - n) * (q.mu * q.mu.transpose() + q.sigma);
  out.eta = (n - 1.0) * h_c + n * h_q;
  const Eigen::MatrixXd lam_bar = symmetrize((n - 1.0) * p_c + n * p_q);
  const Eigen::MatrixXd c = f.chol.triangularView<Eigen::Lower>();
  out.chol = (2.0 * lam_bar * c).triangularView<Eigen::Lower>();
}

// Gradient of sum_{m,i} F_mi k(a_m, b_i) wrt the rows of a, for an SE kernel
// with weights F already multiplied by the kernel values.
Eigen::MatrixXd se_input_grad(const Eigen::MatrixXd& weighted, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              double lsq) {
  const Eigen::VectorXd rs = weighted.rowwise().sum();
  return -(rs.asDiagonal() * a - weighted * b) / lsq;
}

std::vector<int> choose_inducing(int n, int m, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (m >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& features, const std::vector<InstanceId>& ids) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), features.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(ids[i]);
  return out;
}

}  // namespace

Eigen::VectorXd DgpParams::pack() const {
  const Eigen::Index m = z1.rows();
  const Eigen::Index tri = m * (m + 1) / 2;
  const Eigen::Index size = 5 + z1.size() + mean_weights.size() + z2.size() +
                            static_cast<Eigen::Index>(hidden.size() + 1) * (m + tri);
  Eigen::VectorXd out(size);
  Eigen::Index k = 0;
  for (double v : {log_a1, log_l1, log_a2, log_l2, log_noise}) out(k++) = v;
  auto put = [&](const Eigen::MatrixXd& mat) {
    out.segment(k, mat.size()) = Eigen::Map<const Eigen::VectorXd>(mat.data(), mat.size());
    k += mat.size();
  };
  auto put_factor = [&](const LayerFactor& f) {
    out.segment(k, m) = f.eta;
    k += m;
    for (Eigen::Index col = 0; col < m; ++col)
      for (Eigen::Index row = col; row < m; ++row) out(k++) = f.chol(row, col);
  };
  put(z1);
  put(mean_weights);
  put(z2);
  for (const auto& f : hidden) put_factor(f);
  put_factor(top);
  return out;
}

void DgpParams::unpack(const Eigen::VectorXd& flat) {
  const Eigen::Index m = z1.rows();
  Eigen::Index k = 0;
  for (double* v : {&log_a1, &log_l1, &log_a2, &log_l2, &log_noise}) *v = flat(k++);
  auto get = [&](Eigen::MatrixXd& mat) {
    Eigen::Map<Eigen::VectorXd>(mat.data(), mat.size()) = flat.segment(k, mat.size());
    k += mat.size();
  };
  auto get_factor = [&](LayerFactor& f) {
    f.eta = flat.segment(k, m);
    k += m;
    f.chol.setZero(m, m);
    for (Eigen::Index col = 0; col < m; ++col)
      for (Eigen::Index row = col; row < m; ++row) f.chol(row, col) = flat(k++);
  };
  get(z1);
  get(mean_weights);
  get(z2);
  for (auto& f : hidden) get_factor(f);
  get_factor(top);
  if (k != flat.size()) throw InvalidParameter("parameter vector has the wrong length");
}

DgpParams DgpParams::zeros_like() const {
  DgpParams out = *this;
  out.unpack(Eigen::VectorXd::Zero(pack().size()));
  return out;
}

EpState init_inducing(const Eigen::MatrixXd& x, const DgpConfig& config, Rng& rng) {
  const auto n = static_cast<int>(x.rows());
  if (n < 2) throw InvalidParameter("inducing initialization needs at least two instances");
  if (config.hidden_dim < 1) throw InvalidParameter("hidden dimension must be at least 1");
  if (config.max_inducing < 2) throw InvalidParameter("at least two inducing points are required");
  if (!(config.hidden_noise > 0.0)) throw InvalidParameter("hidden noise must be positive");
  const int m = std::min(config.max_inducing, n);
  const auto rows = choose_inducing(n, m, rng);
  const Eigen::Index p = x.cols();
  const Eigen::Index d = config.hidden_dim;

  EpState st;
  st.data_count = n;
  DgpParams& prm = st.params;
  prm.z1.resize(m, p);
  for (int i = 0; i < m; ++i) prm.z1.row(i) = x.row(rows[static_cast<std::size_t>(i)]);
  std::normal_distribution<double> gauss(0.0, 1.0);
  prm.mean_weights.resize(d, p);
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index c = 0; c < p; ++c) prm.mean_weights(j, c) = gauss(rng);
    // Each projection gets unit median spacing, well above the initial hidden noise.
    const Eigen::MatrixXd projected = x * prm.mean_weights.row(j).transpose();
    const double spacing = median_pairwise_distance(projected);
    if (spacing > 0.0) prm.mean_weights.row(j) /= spacing;
  }
  prm.z2 = prm.z1 * prm.mean_weights.transpose();
  prm.log_a1 = std::log(config.hidden_signal);
  prm.log_l1 = std::log(median_pairwise_distance(x));
  prm.log_a2 = 0.0;
  prm.log_l2 = std::log(median_pairwise_distance(prm.z2));
  prm.log_noise = std::log(config.hidden_noise);
  prm.hidden.assign(static_cast<std::size_t>(d), zero_factor(m));
  prm.top = zero_factor(m);
  return st;
}

PropagatedMoments propagate_moments(const Eigen::VectorXd& x, const EpState& state, bool cavity) {
  const DgpParams& p = state.params;
  if (x.size() != p.input_dim()) throw InvalidParameter("input dimension mismatch");
  const double scale = cavity ? state.data_count - 1.0 : static_cast<double>(state.data_count);
  const ForwardCache c = build_cache(p, scale);
  const Eigen::MatrixXd xr = x.transpose();
  const HiddenBatch hb = hidden_batch(p, c, xr);
  PointTop top;
  top_moments(p, c, hb.mh.col(0), hb.vh.col(0), c.bm, top);
  PropagatedMoments out;
  out.hidden_mean = hb.mh.col(0);
  out.hidden_var = hb.vh.col(0).cwiseMax(c.noise);
  out.mean = top.m;
  out.var = std::max(top.v, 1e-12);
  return out;
}

namespace {

// Shared forward/backward pass. With `whitened`, `input` holds eps and
// u_i = m_i + sqrt(V_i) eps_i; `u_adjoint` (empty or length n) is an outer
// gradient wrt u carried back through m_i and V_i.
EnergyResult energy_impl(const Eigen::VectorXd& input, const Eigen::MatrixXd& x, const EpState& state,
                         bool want_grad, bool whitened, const Eigen::VectorXd& u_adjoint) {
  const DgpParams& p = state.params;
  const Eigen::Index n = x.rows();
  if (input.size() != n) throw InvalidParameter("utility vector does not match the data");
  if (u_adjoint.size() != 0 && u_adjoint.size() != n) throw InvalidParameter("adjoint does not match the data");
  if (x.cols() != p.input_dim()) throw InvalidParameter("input dimension mismatch");
  const double nd = static_cast<double>(state.data_count);
  const Eigen::Index m = p.inducing_count();
  const Eigen::Index d = p.hidden_dim();

  const ForwardCache cav = build_cache(p, nd - 1.0);
  std::vector<FactorMoments> hq;
  for (const auto& f : p.hidden) hq.push_back(factor_moments(f, nd));
  const FactorMoments tq = factor_moments(p.top, nd);

  EnergyResult out;
  for (Eigen::Index j = 0; j < d; ++j) {
    out.value += (1.0 - nd) * hq[static_cast<std::size_t>(j)].phi + nd * cav.hidden[static_cast<std::size_t>(j)].phi;
  }
  out.value += (1.0 - nd) * tq.phi + nd * cav.top.phi;

  const HiddenBatch hb = hidden_batch(p, cav, x);
  const double l2sq = cav.l2 * cav.l2;
  const double l1sq = cav.l1 * cav.l1;

  out.cavity_mean.resize(n);
  out.cavity_var.resize(n);
  out.utilities.resize(n);
  if (want_grad) out.grad_u.setZero(n);
  Eigen::VectorXd b_bar = Eigen::VectorXd::Zero(m);
  Eigen::MatrixXd bm_bar = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd z2_bar = Eigen::MatrixXd::Zero(m, d);
  Eigen::MatrixXd mh_bar = Eigen::MatrixXd::Zero(d, n);
  Eigen::MatrixXd vh_bar = Eigen::MatrixXd::Zero(d, n);
  double log_a2_bar = 0.0, l2sq_bar = 0.0, noise_bar = 0.0;

  PointTop top;
  for (Eigen::Index i = 0; i < n; ++i) {
    top_moments(p, cav, hb.mh.col(i), hb.vh.col(i), cav.bm, top);
    const double var = top.v + cav.noise;
    if (!(var > 0.0) || !std::isfinite(var)) throw NumericalMomentError("predictive variance is not positive");
    out.cavity_mean(i) = top.m;
    out.cavity_var(i) = var;
    const double outer = u_adjoint.size() == 0 ? 0.0 : u_adjoint(i);
    double v_bar = 0.0;
    double m_direct = 0.0;
    if (whitened) {
      const double e = input(i);
      const double sd = std::sqrt(var);
      out.utilities(i) = top.m + sd * e;
      out.value += -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * e * e;
      if (!want_grad) continue;
      out.grad_u(i) = -e + outer * sd;
      v_bar = outer * e / (2.0 * sd);
      m_direct = outer;
    } else {
      const double r = input(i) - top.m;
      out.utilities(i) = input(i);
      out.value += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * r * r / var;
      if (!want_grad) continue;
      out.grad_u(i) = -r / var + outer;
      v_bar = -0.5 / var + 0.5 * r * r / (var * var);
      m_direct = r / var;
    }
    // top.v is the second moment minus m^2, hence the -2 m v_bar term.
    const double m_bar = m_direct - 2.0 * top.m * v_bar;
    noise_bar += v_bar;
    log_a2_bar += cav.a2 * v_bar;
    b_bar += m_bar * top.psi1;
    bm_bar += v_bar * top.psi2;

    const Eigen::VectorXd g = (m_bar * cav.b).cwiseProduct(top.psi1);
    const double sg = g.sum();
    const Eigen::MatrixXd gmat = v_bar * cav.bm.cwiseProduct(top.psi2);
    const Eigen::VectorXd rs = gmat.rowwise().sum();
    const double sgg = rs.sum();
    const Eigen::MatrixXd gd = gmat * top.delta;
    log_a2_bar += sg + 2.0 * sgg;
    l2sq_bar += static_cast<double>(d) * (0.5 * sg + 0.5 * sgg) / l2sq;
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto dj = top.delta.col(j);
      const Eigen::VectorXd dj2 = dj.array().square().matrix();
      const double inv_s = 1.0 / top.s(j);
      const double inv_t = 1.0 / top.t(j);
      // psi1 terms
      const double g_d = g.dot(dj);
      const double g_d2 = g.dot(dj2);
      double mh_b = -inv_s * g_d;
      const double vs = -0.5 * inv_s * sg + 0.5 * inv_s * inv_s * g_d2;
      double vh_b = vs;
      l2sq_bar += vs;
      z2_bar.col(j) += inv_s * g.cwiseProduct(dj);
      // psi2 terms
      const double rs_d = rs.dot(dj);
      const double rs_d2 = rs.dot(dj2);
      const double quad = dj.dot(gd.col(j));
      const double sum_e2 = 0.5 * rs_d2 + 0.5 * quad;
      const double sum_d2 = 2.0 * rs_d2 - 2.0 * quad;
      mh_b += -inv_t * rs_d;
      vh_b += -0.5 * sgg * inv_t + 0.5 * inv_t * inv_t * sum_e2;
      z2_bar.col(j) += (-1.0 / l2sq + 0.5 * inv_t) * gd.col(j) +
                       (1.0 / l2sq + 0.5 * inv_t) * rs.cwiseProduct(dj);
      l2sq_bar += -0.25 * sgg * inv_t + sum_d2 / (4.0 * l2sq * l2sq) + 0.25 * inv_t * inv_t * sum_e2;
      mh_bar(j, i) = mh_b;
      vh_bar(j, i) = vh_b;
    }
  }
  if (!want_grad) return out;

  DgpParams& gr = out.grad;
  gr = p.zeros_like();
  noise_bar += vh_bar.sum();
  double log_a1_bar = cav.a1 * vh_bar.sum();
  double log_l1_bar = 0.0;

  // Hidden layer: linear mean, cavity moments and alpha = R1^{-1} k1(Z1, x).
  gr.mean_weights = mh_bar * x;
  Eigen::MatrixXd a_bar = Eigen::MatrixXd::Zero(m, n);
  std::vector<Eigen::VectorXd> mu_h_bar(static_cast<std::size_t>(d));
  std::vector<Eigen::MatrixXd> sig_h_bar(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto& f = cav.hidden[static_cast<std::size_t>(j)];
    mu_h_bar[static_cast<std::size_t>(j)] = hb.a * mh_bar.row(j).transpose();
    sig_h_bar[static_cast<std::size_t>(j)] = hb.a * vh_bar.row(j).asDiagonal() * hb.a.transpose();
    a_bar += f.mu * mh_bar.row(j);
    a_bar += 2.0 * (hb.sigma_a[static_cast<std::size_t>(j)] - hb.a) * vh_bar.row(j).asDiagonal();
  }
  const auto r1 = std::as_const(cav.r1).triangularView<Eigen::Lower>();
  const Eigen::MatrixXd kx_bar = r1.transpose().solve(a_bar);
  const Eigen::MatrixXd r1_bar = (-kx_bar * hb.a.transpose()).triangularView<Eigen::Lower>();
  {
    const Eigen::MatrixXd w = kx_bar.cwiseProduct(hb.kx);
    log_a1_bar += w.sum();
    log_l1_bar += w.cwiseProduct(squared_distances(p.z1, x)).sum() / l1sq;
    gr.z1 += se_input_grad(w, p.z1, x, l1sq);
  }
  {
    const Eigen::MatrixXd k1_bar = cholesky_backward(cav.r1, r1_bar);
    const Eigen::MatrixXd w = k1_bar.cwiseProduct(cav.k1);
    log_a1_bar += w.sum();
    log_l1_bar += w.cwiseProduct(squared_distances(p.z1, p.z1)).sum() / l1sq;
    gr.z1 += 2.0 * se_input_grad(w, p.z1, p.z1, l1sq);
  }

  // Top layer: b = R2^{-T} mu and Bm = R2^{-T} (mu mu^T + Sigma - I) R2^{-1}.
  const auto r2 = std::as_const(cav.r2).triangularView<Eigen::Lower>();
  const Eigen::VectorXd cvec = r2.solve(b_bar);
  Eigen::VectorXd mu_t_bar = cvec;
  Eigen::MatrixXd r2_bar = -cav.b * cvec.transpose();
  const Eigen::MatrixXd bm_bar_sym = symmetrize(bm_bar);
  Eigen::MatrixXd cbar = r2.solve(bm_bar_sym);
  cbar = symmetrize(r2.solve(cbar.transpose()).transpose());  // R^{-1} B R^{-T}
  mu_t_bar += 2.0 * cbar * cav.top.mu;
  const Eigen::MatrixXd sig_t_bar = cbar;
  r2_bar += -2.0 * r2.solve(bm_bar_sym * cav.bm).transpose();  // -2 Bm B R^{-T}
  {
    const Eigen::MatrixXd k2_bar = cholesky_backward(cav.r2, r2_bar.triangularView<Eigen::Lower>().toDenseMatrix());
    const Eigen::MatrixXd w = k2_bar.cwiseProduct(cav.k2);
    log_a2_bar += w.sum();
    l2sq_bar += w.cwiseProduct(squared_distances(p.z2, p.z2)).sum() / (2.0 * l2sq * l2sq);
    z2_bar += 2.0 * se_input_grad(w, p.z2, p.z2, l2sq);
  }

  gr.z2 = z2_bar;
  gr.log_a1 = log_a1_bar;
  gr.log_l1 = log_l1_bar;
  gr.log_a2 = log_a2_bar;
  gr.log_l2 = l2sq_bar * 2.0 * l2sq;
  gr.log_noise = noise_bar * cav.noise;
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto js = static_cast<std::size_t>(j);
    factor_backward(p.hidden[js], hq[js], cav.hidden[js], nd, mu_h_bar[js], sig_h_bar[js], gr.hidden[js]);
  }
  factor_backward(p.top, tq, cav.top, nd, mu_t_bar, sig_t_bar, gr.top);
  return out;
}

}  // namespace

EnergyResult ep_energy(const Eigen::VectorXd& u, const Eigen::MatrixXd& x, const EpState& state, bool want_grad) {
  return energy_impl(u, x, state, want_grad, false, Eigen::VectorXd());
}

EnergyResult ep_energy_whitened(const Eigen::VectorXd& eps, const Eigen::MatrixXd& x, const EpState& state,
                                bool want_grad, const Eigen::VectorXd& u_adjoint) {
  return energy_impl(eps, x, state, want_grad, true, u_adjoint);
}

// ---------------------------------------------------------------------------

namespace detail {

DeepKernelInputs deep_kernel_inputs(const Eigen::MatrixXd& x, const EpState& state) {
  const DgpParams& p = state.params;
  const ForwardCache c = build_cache(p, static_cast<double>(state.data_count));
  const HiddenBatch hb = hidden_batch(p, c, x);
  DeepKernelInputs out;
  out.x = x;
  out.base_mean = hb.mh - p.mean_weights * x.transpose();
  out.diff_var = difference_variances(p, c, x, hb, x, hb);
  out.noise_ratio = c.noise / c.a2;
  return out;
}

Eigen::MatrixXd deep_kernel(const DeepKernelInputs& in, const Eigen::MatrixXd& w, double log_l2) {
  const double l2sq = std::exp(2.0 * log_l2);
  const Eigen::MatrixXd mh = in.base_mean + w * in.x.transpose();
  Eigen::MatrixXd k = symmetrize(averaged_kernel(mh, mh, in.diff_var, l2sq));
  k.diagonal().setConstant(1.0 + in.noise_ratio);
  return k;
}

void deep_kernel_backward(const DeepKernelInputs& in, const Eigen::MatrixXd& w, double log_l2,
                          const Eigen::MatrixXd& k, const Eigen::MatrixXd& k_adj, Eigen::MatrixXd& grad_w,
                          double& grad_log_l2) {
  const double l2sq = std::exp(2.0 * log_l2);
  const Eigen::MatrixXd mh = in.base_mean + w * in.x.transpose();
  const Eigen::Index n = in.x.rows();
  // Adjoint of log k_ij, off the diagonal only.
  Eigen::ArrayXXd g = k_adj.array() * k.array();
  g.matrix().diagonal().setZero();
  Eigen::MatrixXd mh_adj(mh.rows(), n);
  grad_log_l2 = 0.0;
  for (Eigen::Index d = 0; d < mh.rows(); ++d) {
    const Eigen::ArrayXXd s = in.diff_var[static_cast<std::size_t>(d)] + l2sq;
    Eigen::ArrayXXd diff = Eigen::ArrayXXd::Zero(n, n);
    diff.colwise() += mh.row(d).transpose().array();
    diff.rowwise() -= mh.row(d).array();
    const Eigen::ArrayXXd ratio = l2sq / s;
    grad_log_l2 += (g * (1.0 - ratio + diff.square() * ratio / s)).sum();
    mh_adj.row(d) = (-2.0 * (g * diff / s).rowwise().sum()).transpose().matrix();
  }
  grad_w = mh_adj * in.x;
}

}  // namespace detail

DgpSurrogate::DgpSurrogate(DgpConfig dgp, SurrogateConfig config, std::uint64_t seed)
    : dgp_(std::move(dgp)), config_(std::move(config)), rng_(seed) {
  state_.kind = dgp_.hidden_dim == 1 ? SurrogateKind::dgp1 : SurrogateKind::dgp5;
}

double DgpSurrogate::hyperprior(const DgpParams& p, DgpParams* grad) const {
  const double sd2 = config_.hyperprior_sd * config_.hyperprior_sd;
  const double noise_center = std::log(dgp_.hidden_noise);
  struct Term {
    double value, center;
    double DgpParams::*field;
  };
  const Term terms[] = {{p.log_a1, std::log(dgp_.hidden_signal), &DgpParams::log_a1},
                        {p.log_l1, log_l1_center_, &DgpParams::log_l1},
                        {p.log_a2, 0.0, &DgpParams::log_a2},
                        {p.log_l2, log_l2_center_, &DgpParams::log_l2},
                        {p.log_noise, noise_center, &DgpParams::log_noise}};
  double value = 0.0;
  for (const auto& t : terms) {
    const double diff = t.value - t.center;
    value -= 0.5 * diff * diff / sd2;
    if (grad != nullptr) grad->*t.field -= diff / sd2;
  }
  return value;
}

void DgpSurrogate::grow_inducing(const Eigen::MatrixXd& xl, const std::vector<InstanceId>& ids) {
  const int target = std::min<int>(dgp_.max_inducing, static_cast<int>(ids.size()));
  DgpParams& p = ep_.params;
  for (std::size_t i = 0; i < ids.size() && p.inducing_count() < target; ++i) {
    if (std::find(inducing_ids_.begin(), inducing_ids_.end(), ids[i]) != inducing_ids_.end()) continue;
    const Eigen::VectorXd x = xl.row(static_cast<Eigen::Index>(i)).transpose();
    const PropagatedMoments mom = propagate_moments(x, ep_, false);
    const Eigen::Index m = p.inducing_count();
    p.z1.conservativeResize(m + 1, Eigen::NoChange);
    p.z1.row(m) = x.transpose();
    p.z2.conservativeResize(m + 1, Eigen::NoChange);
    p.z2.row(m) = mom.hidden_mean.transpose();
    auto grow = [&](LayerFactor& f) {
      f.eta.conservativeResize(m + 1);
      f.eta(m) = 0.0;
      f.chol.conservativeResize(m + 1, m + 1);
      f.chol.row(m).setZero();
      f.chol.col(m).setZero();
      f.chol(m, m) = dgp_.factor_seed;
    };
    for (auto& f : p.hidden) grow(f);
    grow(p.top);
    inducing_ids_.push_back(ids[i]);
  }
}

void DgpSurrogate::fit(const FitData& data) {
  if (data.features == nullptr || data.chain == nullptr || data.nests == nullptr) {
    throw InvalidParameter("incomplete fit data");
  }
  const auto n = static_cast<Eigen::Index>(data.labeled.size());
  if (n < 2) throw InvalidParameter("fitting needs at least two labeled instances");
  const Eigen::MatrixXd xl = gather_rows(*data.features, data.labeled);
  const CompiledChain compiled = compile_chain(*data.chain, data.labeled, *data.nests);

  Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
  if (!fitted_) {
    nest_count_ = data.nests->nest_count();
    learn_lambdas_ = !config_.fixed_lambdas.has_value();
    if (!learn_lambdas_ && static_cast<int>(config_.fixed_lambdas->size()) != nest_count_) {
      throw InvalidParameter("fixed nest scales do not match the nest count");
    }
    rho_ = Eigen::VectorXd::Constant(nest_count_, detail::logit(config_.lambda_init));
    Rng init_rng = rng_;
    ep_ = init_inducing(xl, dgp_, init_rng);
    rng_ = init_rng;
    inducing_ids_.clear();
    for (Eigen::Index r = 0; r < ep_.params.z1.rows(); ++r) {
      for (Eigen::Index i = 0; i < n; ++i) {
        if (xl.row(i) == ep_.params.z1.row(r)) {
          inducing_ids_.push_back(data.labeled[static_cast<std::size_t>(i)]);
          break;
        }
      }
    }
    log_l1_center_ = ep_.params.log_l1;
    log_l2_center_ = ep_.params.log_l2;
    weight_norms_ = ep_.params.mean_weights.rowwise().norm();
    const Eigen::Index m = ep_.params.inducing_count();
    for (auto& f : ep_.params.hidden) f.chol = dgp_.factor_seed * Eigen::MatrixXd::Identity(m, m);
    ep_.params.top.chol = dgp_.factor_seed * Eigen::MatrixXd::Identity(m, m);
  } else {
    std::unordered_map<InstanceId, int> prev;
    for (std::size_t i = 0; i < state_.ids.size(); ++i) prev[state_.ids[i]] = static_cast<int>(i);
    Eigen::VectorXd mean, var;
    predict(xl, mean, var);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto it = prev.find(data.labeled[static_cast<std::size_t>(i)]);
      u(i) = it != prev.end() ? state_.u_star(it->second) : mean(i);
    }
    grow_inducing(xl, data.labeled);
  }
  ep_.data_count = static_cast<int>(n);

  // Block-coordinate ascent. The utility step is a whitened MAP fit of u
  // under the prior N(0, K), with K the top-layer kernel averaged over the
  // hidden layer, and it also rotates the rows of W. The theta step fits the
  // hidden GP and the factors to u by maximizing the EP energy. a2, l2 and
  // sigma_h^2 stay at their initial values: fitting them to a point
  // estimate of u drives K toward a white kernel.
  const double rho0 = detail::logit(config_.lambda_init);
  const double rho_sd2 = config_.lambda_prior_sd * config_.lambda_prior_sd;
  std::vector<double> lambdas(static_cast<std::size_t>(nest_count_));
  auto set_lambdas = [&](const Eigen::VectorXd& rho) {
    for (int mm = 0; mm < nest_count_; ++mm) {
      lambdas[static_cast<std::size_t>(mm)] = learn_lambdas_ ? detail::sigmoid(rho(mm))
                                                             : (*config_.fixed_lambdas)[static_cast<std::size_t>(mm)];
    }
  };
  Eigen::VectorXd rho = rho_;
  const Eigen::Index n_rho = learn_lambdas_ ? nest_count_ : 0;
  state_.iterations = 0;
  state_.converged = true;

  auto u_step = [&]() {
    DgpParams& prm = ep_.params;
    const detail::DeepKernelInputs kin = detail::deep_kernel_inputs(xl, ep_);
    const double scale = std::exp(0.5 * prm.log_a2);
    const double log_l2 = prm.log_l2;
    const Eigen::Index d = prm.hidden_dim();
    const Eigen::Index p = prm.input_dim();
    const Eigen::Index nw = d * p;
    const Eigen::Index off_rho = n + nw;

    Eigen::VectorXd start(off_rho + n_rho);
    {
      const Eigen::MatrixXd l = cholesky_with_jitter(detail::deep_kernel(kin, prm.mean_weights, log_l2)).lower;
      start.head(n) = l.triangularView<Eigen::Lower>().solve(u / scale);
    }
    start.segment(n, nw) = Eigen::Map<const Eigen::VectorXd>(prm.mean_weights.data(), nw);
    if (learn_lambdas_) start.tail(n_rho) = rho;

    auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) -> double {
      const Eigen::VectorXd w = x.head(n);
      const Eigen::MatrixXd wm = Eigen::Map<const Eigen::MatrixXd>(x.data() + n, d, p);
      set_lambdas(learn_lambdas_ ? Eigen::VectorXd(x.tail(n_rho)) : rho);
      const Eigen::MatrixXd k = detail::deep_kernel(kin, wm, log_l2);
      Eigen::MatrixXd l;
      try {
        l = cholesky_with_jitter(k).lower;
      } catch (const IllConditionedKernel&) {
        grad.setConstant(x.size(), std::numeric_limits<double>::quiet_NaN());
        return -std::numeric_limits<double>::infinity();
      }
      const auto lt = std::as_const(l).triangularView<Eigen::Lower>();
      const Eigen::VectorXd lw = lt * w;
      const ChainLikelihood lik = evaluate_chain(compiled, scale * lw, lambdas);
      double value = lik.value - 0.5 * w.squaredNorm();
      grad.resize(x.size());
      grad.head(n) = scale * Eigen::VectorXd(lt.transpose() * lik.grad_u) - w;
      const Eigen::MatrixXd k_adj = cholesky_backward(l, scale * lik.grad_u * w.transpose());
      Eigen::MatrixXd grad_wm;
      double grad_l2 = 0.0;
      detail::deep_kernel_backward(kin, wm, log_l2, k, k_adj, grad_wm, grad_l2);
      // Only the direction of each row of W is free.
      for (Eigen::Index r = 0; r < d; ++r) {
        const Eigen::RowVectorXd dir = wm.row(r).normalized();
        grad_wm.row(r) -= grad_wm.row(r).dot(dir) * dir;
      }
      grad.segment(n, nw) = Eigen::Map<const Eigen::VectorXd>(grad_wm.data(), nw);
      for (Eigen::Index mm = 0; mm < n_rho; ++mm) {
        const double lam = lambdas[static_cast<std::size_t>(mm)];
        const double diff = x(off_rho + mm) - rho0;
        value -= 0.5 * diff * diff / rho_sd2;
        grad(off_rho + mm) = lik.grad_lambda(mm) * lam * (1.0 - lam) - diff / rho_sd2;
      }
      return value;
    };
    auto project = [&](Eigen::VectorXd& x) {
      Eigen::Map<Eigen::MatrixXd> wm(x.data() + n, d, p);
      for (Eigen::Index r = 0; r < d; ++r) {
        const double norm = wm.row(r).norm();
        if (norm > 0.0) wm.row(r) *= weight_norms_(r) / norm;
      }
      for (Eigen::Index mm = 0; mm < n_rho; ++mm) x(off_rho + mm) = std::clamp(x(off_rho + mm), -kRhoBound, kRhoBound);
    };
    const OptimizeResult res = adam_maximize(start, config_.adam, objective, project);
    if (!std::isfinite(res.best_value)) throw NumericalMomentError("utility objective is not finite at initialization");

    const Eigen::VectorXd& best = res.best;
    prm.mean_weights = Eigen::Map<const Eigen::MatrixXd>(best.data() + n, d, p);
    const Eigen::MatrixXd l = cholesky_with_jitter(detail::deep_kernel(kin, prm.mean_weights, log_l2)).lower;
    u = scale * Eigen::VectorXd(l.triangularView<Eigen::Lower>() * best.head(n));
    if (learn_lambdas_) rho = best.tail(n_rho);
    state_.iterations += res.iterations;
    state_.converged = state_.converged && res.converged;
    state_.initial_objective = res.initial_value;
    state_.objective = res.best_value;
  };


  auto theta_step = [&]() {
    EpState work = ep_;
    auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) -> double {
      work.params.unpack(x);
      try {
        EnergyResult en = ep_energy(u, xl, work, true);
        const double value = en.value + hyperprior(work.params, &en.grad);
        grad = en.grad.pack();
        return value;
      } catch (const NumericalMomentError&) {
      } catch (const IllConditionedKernel&) {
      }
      grad.setConstant(x.size(), std::numeric_limits<double>::quiet_NaN());
      return -std::numeric_limits<double>::infinity();
    };
    const Eigen::VectorXd initial = ep_.params.pack();
    const Eigen::Index w_begin = 5 + ep_.params.z1.size();
    const Eigen::Index w_size = ep_.params.mean_weights.size();
    auto project = [&](Eigen::VectorXd& x) {
      for (int k = 0; k < 2; ++k) x(k) = std::clamp(x(k), -kLogBound, kLogBound);
      x.segment(2, 3) = initial.segment(2, 3);  // a2, l2, sigma_h^2
      x.segment(w_begin, w_size) = initial.segment(w_begin, w_size);
    };
    const OptimizeResult res = adam_maximize(initial, config_.adam, objective, project);
    if (!std::isfinite(res.best_value)) throw NumericalMomentError("DGP energy is not finite at initialization");
    ep_.params.unpack(res.best);
    state_.iterations += res.iterations;
    state_.converged = state_.converged && res.converged;
  };

  u_step();
  for (int round = 0; round < dgp_.fit_rounds; ++round) {
    theta_step();
    u_step();
  }

  rho_ = rho;
  set_lambdas(rho_);
  state_.lambdas = lambdas;
  state_.ids = data.labeled;
  state_.u_star = u;
  newton_refine(compiled, xl);
  finalize(compiled, xl);
  fitted_ = true;
}

Eigen::MatrixXd DgpSurrogate::prior_covariance(const Eigen::MatrixXd& xl) const {
  const detail::DeepKernelInputs kin = detail::deep_kernel_inputs(xl, ep_);
  return std::exp(ep_.params.log_a2) * detail::deep_kernel(kin, ep_.params.mean_weights, ep_.params.log_l2);
}

void DgpSurrogate::newton_refine(const CompiledChain& compiled, const Eigen::MatrixXd& xl) {
  const Eigen::MatrixXd prec = spd_inverse(prior_covariance(xl));
  auto objective = [&](const Eigen::VectorXd& u) {
    return evaluate_chain(compiled, u, state_.lambdas).value - 0.5 * u.dot(prec * u);
  };
  Eigen::VectorXd u = state_.u_star;
  double current = objective(u);
  for (int it = 0; it < config_.newton_iterations; ++it) {
    const ChainLikelihood lik = evaluate_chain(compiled, u, state_.lambdas);
    const Eigen::VectorXd g = lik.grad_u - prec * u;
    const Eigen::MatrixXd h =
        psd_projection(-detail::chain_hessian(compiled, u, state_.lambdas, config_.hessian_step)) + prec;
    const Eigen::VectorXd delta = h.llt().solve(g);
    double step = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 20; ++ls) {
      const Eigen::VectorXd trial = u + step * delta;
      const double value = objective(trial);
      if (std::isfinite(value) && value >= current) {
        improved = value - current > 1e-12;
        u = trial;
        current = value;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  state_.u_star = u;
}

void DgpSurrogate::finalize(const CompiledChain& compiled, const Eigen::MatrixXd& xl) {
  const Eigen::Index n = xl.rows();
  const Eigen::MatrixXd prior_prec = spd_inverse(prior_covariance(xl));
  const Eigen::MatrixXd chain_h = detail::chain_hessian(compiled, state_.u_star, state_.lambdas, config_.hessian_step);
  state_.hessian = chain_h - prior_prec;
  const Eigen::MatrixXd prec_total = psd_projection(-chain_h) + prior_prec;
  state_.covariance = symmetrize(prec_total.llt().solve(Eigen::MatrixXd::Identity(n, n)));
  state_.variance_fallback = false;
  const ChainLikelihood lik = evaluate_chain(compiled, state_.u_star, state_.lambdas);
  state_.gradient_norm = (lik.grad_u - prior_prec * state_.u_star).norm();
  // Predictions use the same prior as the fit: alpha = K^{-1} u* and
  // K^{-1} - K^{-1} Sigma K^{-1} for the variance reduction.
  alpha_ = prior_prec * state_.u_star;
  reduction_ = symmetrize(prior_prec - prior_prec * state_.covariance * prior_prec);
  xl_ = xl;

  Eigen::Index best = 0;
  state_.u_star.maxCoeff(&best);
  state_.x_star_index = static_cast<int>(best);
  fitted_ = true;
  Eigen::VectorXd mean, var;
  predict(xl, mean, var);
  state_.mu_max = mean.maxCoeff();
}

void DgpSurrogate::predict(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var) const {
  if (!fitted_) throw InvalidState("surrogate has not been fitted");
  const DgpParams& p = ep_.params;
  const ForwardCache full = build_cache(p, static_cast<double>(ep_.data_count));
  const HiddenBatch train = hidden_batch(p, full, xl_);
  const Eigen::Index count = x.rows();
  mean.resize(count);
  var.resize(count);
  constexpr Eigen::Index kBlock = 512;
  for (Eigen::Index start = 0; start < count; start += kBlock) {
    const Eigen::Index len = std::min(kBlock, count - start);
    const Eigen::MatrixXd xb = x.middleRows(start, len);
    const HiddenBatch hb = hidden_batch(p, full, xb);
    const Eigen::MatrixXd cross =
        full.a2 * averaged_kernel(train.mh, hb.mh, difference_variances(p, full, xl_, train, xb, hb),
                                  full.l2 * full.l2);  // n x len
    mean.segment(start, len) = cross.transpose() * alpha_;
    const Eigen::VectorXd reduce = (cross.array() * (reduction_ * cross).array()).colwise().sum().transpose();
    var.segment(start, len) = (full.a2 + full.noise - reduce.array()).max(1e-12).matrix();
  }
}

}  // namespace dcpref
