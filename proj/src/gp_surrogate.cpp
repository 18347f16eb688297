#include "dcpref/gp_surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <utility>

#include "dcpref/errors.hpp"
#include "dcpref/linalg.hpp"

namespace dcpref {

namespace {

constexpr double kLogBound = 10.0;
constexpr double kRhoBound = 12.0;

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& features, const std::vector<InstanceId>& ids) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), features.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(ids[i]);
  return out;
}

}  // namespace

GpSurrogate::GpSurrogate(SurrogateConfig config) : config_(std::move(config)) {
  state_.kind = SurrogateKind::gp;
}

double GpSurrogate::whitened_objective(const Eigen::MatrixXd& xl, const CompiledChain& compiled,
                                       const Eigen::VectorXd& params, Eigen::VectorXd* grad) const {
  const Eigen::Index n = xl.rows();
  const Eigen::VectorXd w = params.head(n);
  const double log_sf = params(n);
  const double log_l = params(n + 1);
  KernelParams kp{std::exp(log_sf), std::exp(log_l)};
  const Eigen::MatrixXd k = se_gram(xl, kp);
  const auto chol = cholesky_with_jitter(k);
  const Eigen::MatrixXd& r = chol.lower;
  const Eigen::VectorXd u = r.triangularView<Eigen::Lower>() * w;

  std::vector<double> lambdas(static_cast<std::size_t>(nest_count_));
  for (int m = 0; m < nest_count_; ++m) {
    lambdas[static_cast<std::size_t>(m)] =
        learn_lambdas_ ? detail::sigmoid(params(n + 2 + m)) : (*config_.fixed_lambdas)[static_cast<std::size_t>(m)];
  }
  const ChainLikelihood lik = evaluate_chain(compiled, u, lambdas);

  const double sd2 = config_.hyperprior_sd * config_.hyperprior_sd;
  const double rho_sd2 = config_.lambda_prior_sd * config_.lambda_prior_sd;
  const double rho0 = detail::logit(config_.lambda_init);
  double value = lik.value - 0.5 * w.squaredNorm() - 0.5 * log_sf * log_sf / sd2 -
                 0.5 * (log_l - log_lengthscale_center_) * (log_l - log_lengthscale_center_) / sd2;
  if (learn_lambdas_) {
    for (int m = 0; m < nest_count_; ++m) {
      const double d = params(n + 2 + m) - rho0;
      value -= 0.5 * d * d / rho_sd2;
    }
  }
  if (grad == nullptr) return value;

  grad->setZero(params.size());
  grad->head(n) = r.transpose() * lik.grad_u - w;
  const Eigen::MatrixXd r_bar = (lik.grad_u * w.transpose()).triangularView<Eigen::Lower>();
  const Eigen::MatrixXd k_bar = cholesky_backward(r, r_bar);
  const Eigen::MatrixXd kk = k_bar.cwiseProduct(k);
  const Eigen::MatrixXd d2 = squared_distances(xl, xl);
  (*grad)(n) = kk.sum() - log_sf / sd2;
  (*grad)(n + 1) = kk.cwiseProduct(d2).sum() / (kp.lengthscale * kp.lengthscale) -
                   (log_l - log_lengthscale_center_) / sd2;
  if (learn_lambdas_) {
    for (int m = 0; m < nest_count_; ++m) {
      const double lam = lambdas[static_cast<std::size_t>(m)];
      (*grad)(n + 2 + m) = lik.grad_lambda(m) * lam * (1.0 - lam) - (params(n + 2 + m) - rho0) / rho_sd2;
    }
  }
  return value;
}

void GpSurrogate::fit(const FitData& data) {
  if (data.features == nullptr || data.chain == nullptr || data.nests == nullptr) {
    throw InvalidParameter("incomplete fit data");
  }
  const auto n = static_cast<Eigen::Index>(data.labeled.size());
  if (n < 2) throw InvalidParameter("fitting needs at least two labeled instances");
  const Eigen::MatrixXd xl = gather_rows(*data.features, data.labeled);
  const CompiledChain compiled = compile_chain(*data.chain, data.labeled, *data.nests);

  const double median = median_pairwise_distance(xl);
  log_lengthscale_center_ = std::log(median);
  if (!fitted_) {
    nest_count_ = data.nests->nest_count();
    learn_lambdas_ = !config_.fixed_lambdas.has_value();
    if (!learn_lambdas_ && static_cast<int>(config_.fixed_lambdas->size()) != nest_count_) {
      throw InvalidParameter("fixed nest scales do not match the nest count");
    }
    kernel_ = {1.0, median};
    rho_ = Eigen::VectorXd::Constant(nest_count_, detail::logit(config_.lambda_init));
  }

  // Warm start: previous utilities, predicted means for new members.
  Eigen::VectorXd u0 = Eigen::VectorXd::Zero(n);
  if (fitted_) {
    std::unordered_map<InstanceId, int> prev;
    for (std::size_t i = 0; i < state_.ids.size(); ++i) prev[state_.ids[i]] = static_cast<int>(i);
    Eigen::VectorXd mean, var;
    predict(xl, mean, var);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto it = prev.find(data.labeled[static_cast<std::size_t>(i)]);
      u0(i) = it != prev.end() ? state_.u_star(it->second) : mean(i);
    }
  }
  const auto chol0 = cholesky_with_jitter(se_gram(xl, kernel_));
  const Eigen::VectorXd w0 = chol0.lower.triangularView<Eigen::Lower>().solve(u0);

  const Eigen::Index extra = 2 + (learn_lambdas_ ? nest_count_ : 0);
  Eigen::VectorXd params(n + extra);
  params.head(n) = w0;
  params(n) = std::log(kernel_.signal_variance);
  params(n + 1) = std::log(kernel_.lengthscale);
  if (learn_lambdas_) params.tail(nest_count_) = rho_;

  auto objective = [&](const Eigen::VectorXd& p, Eigen::VectorXd& g) {
    return whitened_objective(xl, compiled, p, &g);
  };
  auto project = [&](Eigen::VectorXd& p) {
    p(n) = std::clamp(p(n), -kLogBound, kLogBound);
    p(n + 1) = std::clamp(p(n + 1), -kLogBound, kLogBound);
    if (learn_lambdas_) p.tail(nest_count_) = p.tail(nest_count_).cwiseMax(-kRhoBound).cwiseMin(kRhoBound);
  };
  const OptimizeResult res = adam_maximize(params, config_.adam, objective, project);

  kernel_ = {std::exp(res.best(n)), std::exp(res.best(n + 1))};
  if (learn_lambdas_) rho_ = res.best.tail(nest_count_);
  state_.lambdas.assign(static_cast<std::size_t>(nest_count_), 0.0);
  for (int m = 0; m < nest_count_; ++m) {
    state_.lambdas[static_cast<std::size_t>(m)] =
        learn_lambdas_ ? detail::sigmoid(rho_(m)) : (*config_.fixed_lambdas)[static_cast<std::size_t>(m)];
  }
  xl_ = xl;
  chol_k_ = cholesky_with_jitter(se_gram(xl, kernel_)).lower;
  state_.ids = data.labeled;
  state_.u_star = chol_k_.triangularView<Eigen::Lower>() * res.best.head(n);
  state_.iterations = res.iterations;
  state_.converged = res.converged;
  state_.initial_objective = res.initial_value;

  newton_refine(compiled);
  finalize(xl, compiled);
  state_.objective = std::max(state_.objective, res.best_value);
  fitted_ = true;
}

void GpSurrogate::newton_refine(const CompiledChain& compiled) {
  const auto tri = std::as_const(chol_k_).triangularView<Eigen::Lower>();
  const Eigen::MatrixXd k = chol_k_ * chol_k_.transpose();
  auto centered = [&](const Eigen::VectorXd& u) {
    return evaluate_chain(compiled, u, state_.lambdas).value - 0.5 * tri.solve(u).squaredNorm();
  };
  Eigen::VectorXd u = state_.u_star;
  double current = centered(u);
  const Eigen::Index n = u.size();
  for (int it = 0; it < config_.newton_iterations; ++it) {
    const ChainLikelihood lik = evaluate_chain(compiled, u, state_.lambdas);
    const Eigen::MatrixXd w =
        psd_projection(-detail::chain_hessian(compiled, u, state_.lambdas, config_.hessian_step));
    const Eigen::MatrixXd s = psd_sqrt(w);
    const Eigen::MatrixXd b = Eigen::MatrixXd::Identity(n, n) + s * k * s;
    Eigen::LLT<Eigen::MatrixXd> llt(b);
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd rhs = w * u + lik.grad_u;
    const Eigen::VectorXd a = rhs - s * llt.solve(s * (k * rhs));
    const Eigen::VectorXd proposal = k * a;
    double step = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 20; ++ls) {
      const Eigen::VectorXd trial = u + step * (proposal - u);
      const double value = centered(trial);
      if (std::isfinite(value) && value >= current) {
        const double gain = value - current;
        u = trial;
        current = value;
        improved = gain > 1e-12;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  state_.u_star = u;
  state_.objective = current;
}

void GpSurrogate::finalize(const Eigen::MatrixXd& xl, const CompiledChain& compiled) {
  const Eigen::Index n = xl.rows();
  const auto tri = std::as_const(chol_k_).triangularView<Eigen::Lower>();
  const Eigen::MatrixXd k = chol_k_ * chol_k_.transpose();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd k_inv = tri.transpose().solve(tri.solve(eye));

  const Eigen::MatrixXd chain_h = detail::chain_hessian(compiled, state_.u_star, state_.lambdas, config_.hessian_step);
  state_.hessian = chain_h - k_inv;
  const Eigen::MatrixXd w = psd_projection(-chain_h);
  sqrt_w_ = psd_sqrt(w);
  const Eigen::MatrixXd b = eye + sqrt_w_ * k * sqrt_w_;
  Eigen::LLT<Eigen::MatrixXd> llt(b);
  state_.variance_fallback = llt.info() != Eigen::Success;
  if (!state_.variance_fallback) {
    chol_b_ = llt.matrixL();
    const Eigen::MatrixXd v = chol_b_.triangularView<Eigen::Lower>().solve(sqrt_w_ * k);
    state_.covariance = symmetrize(k - v.transpose() * v);
  } else {
    state_.covariance = k;
  }

  alpha_ = tri.transpose().solve(tri.solve(state_.u_star));
  const ChainLikelihood lik = evaluate_chain(compiled, state_.u_star, state_.lambdas);
  state_.gradient_norm = (lik.grad_u - alpha_).norm();

  Eigen::Index best = 0;
  state_.u_star.maxCoeff(&best);
  state_.x_star_index = static_cast<int>(best);
  state_.mu_max = (k * alpha_).maxCoeff();
}

void GpSurrogate::predict(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var) const {
  if (xl_.rows() == 0) throw InvalidState("surrogate has not been fitted");
  const Eigen::MatrixXd kx = se_cross(x, xl_, kernel_);
  mean = kx * alpha_;
  Eigen::VectorXd reduction;
  if (!state_.variance_fallback) {
    const Eigen::MatrixXd v = chol_b_.triangularView<Eigen::Lower>().solve(sqrt_w_ * kx.transpose());
    reduction = v.colwise().squaredNorm().transpose();
  } else {
    const Eigen::MatrixXd v = chol_k_.triangularView<Eigen::Lower>().solve(kx.transpose());
    reduction = v.colwise().squaredNorm().transpose();
  }
  var = (kernel_.signal_variance - reduction.array()).cwiseMax(1e-12).matrix();
}

}  // namespace dcpref
