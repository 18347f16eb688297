#include "dcpref/kernel.hpp"

#include <cmath>
#include <numbers>

#include "dcpref/errors.hpp"
#include "dcpref/linalg.hpp"

namespace dcpref {

double se_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const KernelParams& params) {
  if (a.size() != b.size()) throw InvalidParameter("kernel inputs differ in dimension");
  const double l = params.lengthscale;
  return params.signal_variance * std::exp(-(a - b).squaredNorm() / (2.0 * l * l));
}

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd d = (-2.0 * a * b.transpose()).colwise() + a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

Eigen::MatrixXd se_cross(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const KernelParams& params) {
  if (a.cols() != b.cols()) throw InvalidParameter("kernel inputs differ in dimension");
  const double l = params.lengthscale;
  return params.signal_variance * (-squared_distances(a, b) / (2.0 * l * l)).array().exp().matrix();
}

Eigen::MatrixXd se_gram(const Eigen::MatrixXd& x, const KernelParams& params) {
  Eigen::MatrixXd k = se_cross(x, x, params);
  k.diagonal().setConstant(params.signal_variance);
  return symmetrize(k);
}

LogPrior gp_log_prior(const Eigen::VectorXd& u, const Eigen::MatrixXd& gram) {
  if (gram.rows() != u.size() || gram.cols() != u.size()) {
    throw InvalidParameter("gram matrix does not match utility vector");
  }
  const auto chol = cholesky_with_jitter(gram);
  const auto tri = chol.lower.triangularView<Eigen::Lower>();
  const Eigen::VectorXd white = tri.solve(u);
  LogPrior out;
  const double n = static_cast<double>(u.size());
  out.value = -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * log_det_from_cholesky(chol.lower) -
              0.5 * white.squaredNorm();
  out.grad = -tri.transpose().solve(white);
  return out;
}

}  // namespace dcpref
