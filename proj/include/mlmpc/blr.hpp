#pragma once

// Bayesian linear regression over basis weights: batch fit, exact rank-1
// recursive update, first-order mean update and predictive moments.

#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mlmpc/error.hpp"
#include "mlmpc/features.hpp"
#include "mlmpc/gauss.hpp"

namespace mlmpc::blr {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using features::BasisSet;
using features::WeightPrior;

struct LinearPosterior {
  VectorXd mu;
  MatrixXd sigma;

  int size() const { return static_cast<int>(mu.size()); }

  static LinearPosterior from_prior(const WeightPrior& prior) { return {prior.mean, prior.cov}; }
};

namespace detail {
inline MatrixXd prior_precision(const WeightPrior& prior) {
  if (prior.precision) return *prior.precision;
  const int e = prior.size();
  const MatrixXd lower = gauss::cholesky_psd(prior.cov);
  const MatrixXd linv = lower.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(e, e));
  return linv.transpose() * linv;
}
}  // namespace detail

/// Sigma = (Phi^T Phi / s2 + S0^-1)^-1, mu = Sigma (Phi^T y / s2 + S0^-1 m0).
inline LinearPosterior blr_fit(const MatrixXd& phi, const VectorXd& y, double noise_var,
                               const WeightPrior& prior) {
  const int e = prior.size();
  require(prior.cov.rows() == e && prior.cov.cols() == e, ErrorKind::DimensionMismatch,
          "blr_fit: prior shape");
  require(phi.rows() == y.size(), ErrorKind::DimensionMismatch, "blr_fit: Phi rows != y size");
  require(phi.cols() == e || phi.rows() == 0, ErrorKind::DimensionMismatch,
          "blr_fit: Phi columns != prior dimension");
  require(noise_var > 0.0, ErrorKind::InvalidArgument, "blr_fit: noise_var <= 0");
  if (phi.rows() == 0) return LinearPosterior::from_prior(prior);

  const MatrixXd p0 = detail::prior_precision(prior);
  MatrixXd precision = p0;
  precision.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose(), 1.0 / noise_var);
  precision = precision.selfadjointView<Eigen::Lower>();
  const MatrixXd lower = gauss::cholesky_psd(precision);
  const auto lv = lower.triangularView<Eigen::Lower>();
  const MatrixXd linv = lv.solve(MatrixXd::Identity(e, e));

  LinearPosterior post;
  post.sigma = linv.transpose() * linv;
  post.sigma = 0.5 * (post.sigma + post.sigma.transpose()).eval();
  const VectorXd rhs = phi.transpose() * y / noise_var + p0 * prior.mean;
  post.mu = lv.transpose().solve(lv.solve(rhs));
  return post;
}

/// Exact conjugate (Kalman-form) update with one observation.
template <class A>
LinearPosterior blr_update_recursive(const LinearPosterior& post, const Eigen::MatrixBase<A>& phi,
                                     double y, double noise_var) {
  require(phi.size() == post.size(), ErrorKind::DimensionMismatch,
          "blr_update_recursive: feature size mismatch");
  require(noise_var > 0.0, ErrorKind::InvalidArgument, "blr_update_recursive: noise_var <= 0");
  const VectorXd sphi = post.sigma * phi;
  const double s = phi.dot(sphi) + noise_var;
  const VectorXd gain = sphi / s;
  LinearPosterior out;
  out.mu = post.mu + gain * (y - phi.dot(post.mu));
  out.sigma = post.sigma - gain * sphi.transpose();
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose()).eval();
  return out;
}

enum class SgdMode { Shrink, LiteralPaper };

/// mu + eta ((y - mu^T phi) phi -/+ noise_var mu). Shrink uses the MAP
/// (ridge) gradient sign; LiteralPaper keeps the published "+" sign.
template <class A, class B>
VectorXd sgd_mean_update(const Eigen::MatrixBase<A>& mu, const Eigen::MatrixBase<B>& phi, double y,
                         double eta, double noise_var, SgdMode mode = SgdMode::Shrink) {
  require(mu.size() == phi.size(), ErrorKind::DimensionMismatch, "sgd_mean_update: size mismatch");
  require(eta > 0.0, ErrorKind::InvalidArgument, "sgd_mean_update: eta <= 0");
  const double residual = y - mu.dot(phi);
  const double sign = mode == SgdMode::Shrink ? -1.0 : 1.0;
  return mu + eta * (residual * phi + sign * noise_var * mu);
}

struct Prediction {
  VectorXd mean;
  VectorXd var;
  MatrixXd cov;  // filled only when requested
};

inline Prediction predict_from_features(const LinearPosterior& post, const MatrixXd& phi,
                                        bool full_cov = false) {
  require(phi.cols() == post.size() || phi.rows() == 0, ErrorKind::DimensionMismatch,
          "predict: feature width != posterior dimension");
  Prediction out;
  out.mean = phi.rows() ? VectorXd(phi * post.mu) : VectorXd(0);
  const MatrixXd ps = phi * post.sigma;
  out.var = (ps.cwiseProduct(phi)).rowwise().sum().cwiseMax(0.0);
  if (full_cov) {
    out.cov = ps * phi.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  }
  return out;
}

inline Prediction predict(const LinearPosterior& post, const BasisSet& basis, const MatrixXd& x,
                          bool full_cov = false) {
  return predict_from_features(post, features::feature_matrix(basis, x), full_cov);
}

inline nlohmann::json to_json(const LinearPosterior& post) {
  nlohmann::json j;
  j["mu"] = std::vector<double>(post.mu.data(), post.mu.data() + post.mu.size());
  std::vector<double> s;
  for (Eigen::Index i = 0; i < post.sigma.rows(); ++i)
    for (Eigen::Index k = 0; k < post.sigma.cols(); ++k) s.push_back(post.sigma(i, k));
  j["sigma_rowmajor"] = s;
  return j;
}

inline LinearPosterior posterior_from_json(const nlohmann::json& j) {
  const auto mu = j.at("mu").get<std::vector<double>>();
  const auto s = j.at("sigma_rowmajor").get<std::vector<double>>();
  const auto e = static_cast<Eigen::Index>(mu.size());
  require(static_cast<Eigen::Index>(s.size()) == e * e, ErrorKind::DimensionMismatch,
          "posterior JSON: sigma size");
  LinearPosterior post;
  post.mu = Eigen::Map<const VectorXd>(mu.data(), e);
  post.sigma.resize(e, e);
  for (Eigen::Index i = 0; i < e; ++i)
    for (Eigen::Index k = 0; k < e; ++k) post.sigma(i, k) = s[static_cast<std::size_t>(i * e + k)];
  return post;
}

}  // namespace mlmpc::blr
