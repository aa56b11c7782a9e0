#pragma once

// Dense Gaussian algebra: jittered Cholesky, KL divergence, Gaussian
// expectations and seeded sampling.

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "mlmpc/error.hpp"
#include "mlmpc/rng.hpp"

namespace mlmpc::gauss {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MvNormal {
  VectorXd mean;
  MatrixXd cov;

  int dim() const { return static_cast<int>(mean.size()); }

  /// Throws if the covariance is not square/symmetric or clearly indefinite.
  void validate() const {
    const auto n = mean.size();
    require(cov.rows() == n && cov.cols() == n, ErrorKind::DimensionMismatch,
            "MvNormal covariance must be n x n");
    if (n == 0) return;
    const double scale = std::max(cov.cwiseAbs().maxCoeff(), 1e-300);
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * scale, ErrorKind::NotPSD,
            "MvNormal covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
    require(eig.eigenvalues().minCoeff() >= -1e-10 * cov.trace() / static_cast<double>(n) - 1e-300,
            ErrorKind::NotPSD, "MvNormal covariance has negative eigenvalues");
  }
};

/// Lower Cholesky factor of M + jitter*I. When the factorization fails the
/// jitter is escalated by x10 (starting from 1e-12 * mean diagonal when zero)
/// until it exceeds 1e-4 * mean diagonal.
inline MatrixXd cholesky_psd(const MatrixXd& m, double jitter = 0.0) {
  require(m.rows() == m.cols(), ErrorKind::DimensionMismatch, "cholesky_psd: matrix not square");
  require(jitter >= 0.0 && std::isfinite(jitter), ErrorKind::InvalidArgument,
          "cholesky_psd: jitter must be nonnegative");
  const Eigen::Index n = m.rows();
  if (n == 0) return MatrixXd(0, 0);

  const double mean_diag = std::max(m.diagonal().mean(), 0.0);
  const double max_jitter = 1e-4 * (mean_diag > 0.0 ? mean_diag : 1.0);
  double j = jitter;
  for (;;) {
    MatrixXd shifted = m;
    shifted.diagonal().array() += j;
    Eigen::LLT<MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > 0.0 &&
        llt.matrixLLT().allFinite()) {
      return llt.matrixL();
    }
    if (j >= max_jitter) break;
    j = (j == 0.0) ? 1e-12 * (mean_diag > 0.0 ? mean_diag : 1.0) : j * 10.0;
    j = std::min(j, max_jitter);
  }
  throw Error(ErrorKind::NotPSD, "cholesky_psd: factorization failed at jitter " + std::to_string(j));
}

inline double log_det_from_cholesky(const MatrixXd& lower) {
  return 2.0 * lower.diagonal().array().log().sum();
}

/// Jitter added to both covariances inside kl_gaussian: 1e-8 * tr(cov_p) / n,
/// falling back to the q trace and then to 1e-12 when traces vanish.
inline double kl_jitter(const MatrixXd& cov_q, const MatrixXd& cov_p) {
  const double n = static_cast<double>(cov_p.rows());
  if (n == 0) return 0.0;
  double tr = cov_p.trace();
  if (!(tr > 0.0)) tr = cov_q.trace();
  if (!(tr > 0.0)) return 1e-12;
  return 1e-8 * tr / n;
}

/// KL(q || p) for multivariate normals; see kl_jitter for regularization.
inline double kl_gaussian(const MvNormal& q, const MvNormal& p) {
  const auto n = q.mean.size();
  require(p.mean.size() == n && q.cov.rows() == n && q.cov.cols() == n && p.cov.rows() == n &&
              p.cov.cols() == n,
          ErrorKind::DimensionMismatch, "kl_gaussian: dimension mismatch");
  if (n == 0) return 0.0;
  const double eps = kl_jitter(q.cov, p.cov);
  MatrixXd cq = q.cov;
  MatrixXd cp = p.cov;
  cq.diagonal().array() += eps;
  cp.diagonal().array() += eps;
  const MatrixXd lq = cholesky_psd(cq);
  const MatrixXd lp = cholesky_psd(cp);

  const auto lp_view = lp.triangularView<Eigen::Lower>();
  const MatrixXd w = lp_view.solve(lq);
  const VectorXd d = lp_view.solve(VectorXd(p.mean - q.mean));
  const double kl = 0.5 * (w.squaredNorm() + d.squaredNorm() - static_cast<double>(n) +
                           log_det_from_cholesky(lp) - log_det_from_cholesky(lq));
  return kl;
}

inline double log_normal_pdf(double y, double mean, double var) {
  const double r = y - mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * r * r / var;
}

/// E_{f ~ N(mu_q, var_q)} log N(y | f, noise_var), closed form.
inline double expected_gaussian_loglik(double y, double mu_q, double var_q, double noise_var) {
  require(var_q >= 0.0, ErrorKind::InvalidArgument, "expected_gaussian_loglik: var_q < 0");
  require(noise_var > 0.0, ErrorKind::InvalidArgument, "expected_gaussian_loglik: noise_var <= 0");
  const double r = y - mu_q;
  return -0.5 * std::log(2.0 * std::numbers::pi * noise_var) - (r * r + var_q) / (2.0 * noise_var);
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Sampling route for expected_gaussian_loglik; kept as a cross-check.
inline MonteCarloEstimate expected_gaussian_loglik_sampled(double y, double mu_q, double var_q,
                                                           double noise_var, long count, Rng& rng) {
  require(count >= 2, ErrorKind::InvalidArgument, "expected_gaussian_loglik_sampled: count < 2");
  require(var_q >= 0.0 && noise_var > 0.0, ErrorKind::InvalidArgument,
          "expected_gaussian_loglik_sampled: bad variances");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(var_q);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (long i = 0; i < count; ++i) {
    const double f = mu_q + sd * normal(rng);
    const double v = log_normal_pdf(y, f, noise_var);
    sum += v;
    sum_sq += v * v;
  }
  const double c = static_cast<double>(count);
  const double mean = sum / c;
  const double var = std::max(sum_sq / c - mean * mean, 0.0) * c / (c - 1.0);
  return {mean, std::sqrt(var / c)};
}

/// count x n matrix; row i is mean + L z_i.
inline MatrixXd sample_mvn(const MvNormal& dist, long count, Rng& rng) {
  require(count >= 1, ErrorKind::InvalidArgument, "sample_mvn: count < 1");
  const auto n = dist.mean.size();
  require(dist.cov.rows() == n && dist.cov.cols() == n, ErrorKind::DimensionMismatch,
          "sample_mvn: covariance shape");
  MatrixXd lower = MatrixXd::Zero(n, n);
  if (n > 0 && dist.cov.cwiseAbs().maxCoeff() > 0.0) lower = cholesky_psd(dist.cov);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd z(count, n);
  for (long i = 0; i < count; ++i)
    for (Eigen::Index j = 0; j < n; ++j) z(i, j) = normal(rng);
  MatrixXd out = z * lower.transpose();
  out.rowwise() += dist.mean.transpose();
  return out;
}

}  // namespace mlmpc::gauss
