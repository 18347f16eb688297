#include "dcpref/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "dcpref/errors.hpp"

namespace dcpref {

JitteredCholesky cholesky_with_jitter(const Eigen::MatrixXd& a, bool try_plain) {
  const Eigen::Index n = a.rows();
  std::vector<double> levels;
  if (try_plain) levels.push_back(0.0);
  for (double j : {1e-6, 1e-5, 1e-4}) levels.push_back(j);
  for (double jitter : levels) {
    Eigen::MatrixXd b = a;
    b.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(b);
    if (llt.info() != Eigen::Success) continue;
    Eigen::MatrixXd l = llt.matrixL();
    if (!l.allFinite() || (n > 0 && l.diagonal().minCoeff() <= 0.0)) continue;
    return {std::move(l), jitter};
  }
  throw IllConditionedKernel("Cholesky factorization failed after jitter 1e-4");
}

Eigen::MatrixXd cholesky_backward(const Eigen::MatrixXd& lower, const Eigen::MatrixXd& lower_adjoint) {
  Eigen::MatrixXd p = lower.transpose() * lower_adjoint.triangularView<Eigen::Lower>().toDenseMatrix();
  p = p.triangularView<Eigen::Lower>().toDenseMatrix();
  p.diagonal() *= 0.5;
  const auto tri = lower.triangularView<Eigen::Lower>();
  // L^{-T} P L^{-1}
  Eigen::MatrixXd s = tri.transpose().solve(p);
  s = tri.transpose().solve(s.transpose()).transpose();
  return symmetrize(s);
}

Eigen::MatrixXd psd_projection(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double log_det_from_cholesky(const Eigen::MatrixXd& lower) {
  return 2.0 * lower.diagonal().array().log().sum();
}

double median_pairwise_distance(const Eigen::MatrixXd& rows) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < rows.rows(); ++j) {
      const double dist = (rows.row(i) - rows.row(j)).norm();
      if (dist > 0.0) d.push_back(dist);
    }
  }
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

}  // namespace dcpref
