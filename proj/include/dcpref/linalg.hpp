#pragma once

// Dense linear-algebra helpers shared by the surrogates.

#include <Eigen/Dense>

namespace dcpref {

/// Lower Cholesky factor of `a`, retrying with diagonal jitter
/// 1e-6, 1e-5, 1e-4 when the plain factorization fails.
/// Throws IllConditionedKernel if all attempts fail.
struct JitteredCholesky {
  Eigen::MatrixXd lower;
  double jitter = 0.0;
};
JitteredCholesky cholesky_with_jitter(const Eigen::MatrixXd& a, bool try_plain = true);

/// Reverse-mode step through A = L L^T. Given the adjoint of the lower factor,
/// returns the symmetric adjoint of A.
Eigen::MatrixXd cholesky_backward(const Eigen::MatrixXd& lower, const Eigen::MatrixXd& lower_adjoint);

/// Nearest positive semidefinite matrix in Frobenius norm (eigenvalues clipped at 0).
Eigen::MatrixXd psd_projection(const Eigen::MatrixXd& a);

/// Symmetric square root of a PSD matrix.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a);

inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

/// 2 * sum(log(diag(L))).
double log_det_from_cholesky(const Eigen::MatrixXd& lower);

/// Median of pairwise Euclidean distances between rows; 1.0 if fewer than two
/// distinct rows.
double median_pairwise_distance(const Eigen::MatrixXd& rows);

}  // namespace dcpref
