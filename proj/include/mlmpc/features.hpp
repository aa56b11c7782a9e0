#pragma once

// Squared-exponential kernel and finite basis sets (subset of regressors and
// a parametric cosine), plus the weight prior matching each basis.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mlmpc/error.hpp"
#include "mlmpc/gauss.hpp"

namespace mlmpc::features {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Kernel hyperparameters, stored in log space.
struct KernelHyper {
  VectorXd log_lengthscale = VectorXd::Zero(1);
  double log_signal_var = 0.0;
  double log_noise_var = std::log(1e-2);

  int input_dim() const { return static_cast<int>(log_lengthscale.size()); }
  double lengthscale(int j) const { return std::exp(log_lengthscale(j)); }
  double signal_var() const { return std::exp(log_signal_var); }
  double noise_var() const { return std::exp(log_noise_var); }

  static KernelHyper make(const VectorXd& lengthscale, double signal_var, double noise_var) {
    require(lengthscale.size() >= 1 && (lengthscale.array() > 0.0).all() && signal_var > 0.0 &&
                noise_var > 0.0,
            ErrorKind::InvalidArgument, "KernelHyper: parameters must be positive");
    return {lengthscale.array().log().matrix(), std::log(signal_var), std::log(noise_var)};
  }
};

enum class BasisKind { SubsetOfRegressors, ParametricCosine };
enum class PriorKind { Nystrom, Diagonal };

struct BasisSet {
  BasisKind kind = BasisKind::SubsetOfRegressors;
  MatrixXd inducing;          // E x d, SoR only
  double sample_time = 0.2;   // cosine only
  double cosine_freq = 3.0;   // cosine only
  KernelHyper kernel;
  PriorKind prior = PriorKind::Nystrom;
  double diagonal_prior_var = 1.0;

  int size() const {
    return kind == BasisKind::SubsetOfRegressors ? static_cast<int>(inducing.rows()) : 1;
  }
  int input_dim() const { return kernel.input_dim(); }

  static BasisSet subset_of_regressors(MatrixXd inducing, KernelHyper kernel) {
    require(inducing.rows() >= 1, ErrorKind::InvalidArgument, "SoR basis needs E >= 1");
    require(inducing.cols() == kernel.input_dim(), ErrorKind::DimensionMismatch,
            "inducing inputs and lengthscales disagree on d");
    require(inducing.allFinite(), ErrorKind::InvalidArgument, "inducing inputs must be finite");
    BasisSet b;
    b.kind = BasisKind::SubsetOfRegressors;
    b.inducing = std::move(inducing);
    b.kernel = std::move(kernel);
    b.prior = PriorKind::Nystrom;
    return b;
  }

  static BasisSet parametric_cosine(double sample_time, double freq, KernelHyper kernel,
                                    double prior_var = 1.0) {
    require(sample_time > 0.0, ErrorKind::InvalidArgument, "cosine basis needs T_s > 0");
    require(kernel.input_dim() == 1, ErrorKind::DimensionMismatch, "cosine basis is 1-D");
    BasisSet b;
    b.kind = BasisKind::ParametricCosine;
    b.sample_time = sample_time;
    b.cosine_freq = freq;
    b.kernel = std::move(kernel);
    b.prior = PriorKind::Diagonal;
    b.diagonal_prior_var = prior_var;
    return b;
  }
};

struct WeightPrior {
  VectorXd mean;
  MatrixXd cov;
  /// Exact inverse of cov when it is known in closed form (Nystrom prior).
  std::optional<MatrixXd> precision;

  int size() const { return static_cast<int>(mean.size()); }
};

template <class A, class B>
double se_kernel(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x2, const KernelHyper& h) {
  double sq = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double r = (x(j) - x2(j)) / h.lengthscale(static_cast<int>(j));
    sq += r * r;
  }
  return h.signal_var() * std::exp(-0.5 * sq);
}

inline MatrixXd gram(const MatrixXd& a, const MatrixXd& b, const KernelHyper& h) {
  require(a.cols() == h.input_dim() && b.cols() == h.input_dim(), ErrorKind::DimensionMismatch,
          "gram: input dimension mismatch");
  const VectorXd inv_ell = (-h.log_lengthscale).array().exp();
  const MatrixXd sa = a * inv_ell.asDiagonal();
  const MatrixXd sb = b * inv_ell.asDiagonal();
  MatrixXd k(a.rows(), b.rows());
  const double sf2 = h.signal_var();
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      k(i, j) = sf2 * std::exp(-0.5 * (sa.row(i) - sb.row(j)).squaredNorm());
  return k;
}

template <class A>
VectorXd features(const BasisSet& basis, const Eigen::MatrixBase<A>& x) {
  require(x.size() == basis.input_dim(), ErrorKind::DimensionMismatch,
          "features: input dimension does not match basis");
  if (basis.kind == BasisKind::ParametricCosine) {
    VectorXd out(1);
    out(0) = -basis.sample_time * std::cos(basis.cosine_freq * x(0));
    return out;
  }
  VectorXd out(basis.size());
  for (int i = 0; i < basis.size(); ++i) out(i) = se_kernel(basis.inducing.row(i), x, basis.kernel);
  return out;
}

inline MatrixXd feature_matrix(const BasisSet& basis, const MatrixXd& x) {
  require(x.cols() == basis.input_dim() || x.rows() == 0, ErrorKind::DimensionMismatch,
          "feature_matrix: input dimension does not match basis");
  if (x.rows() == 0) return MatrixXd(0, basis.size());
  if (basis.kind == BasisKind::SubsetOfRegressors) return gram(x, basis.inducing, basis.kernel);
  MatrixXd phi(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    phi(i, 0) = -basis.sample_time * std::cos(basis.cosine_freq * x(i, 0));
  return phi;
}

/// Weight prior whose implied function covariance Phi S0 Phi^T is the Nystrom
/// approximation of the kernel: S0 = (K_ZZ + eps I)^-1, eps = 1e-8 tr(K_ZZ)/E.
inline WeightPrior nystrom_prior(const BasisSet& basis) {
  require(basis.kind == BasisKind::SubsetOfRegressors, ErrorKind::InvalidArgument,
          "nystrom_prior requires a subset-of-regressors basis");
  const int e = basis.size();
  MatrixXd kzz = gram(basis.inducing, basis.inducing, basis.kernel);
  kzz.diagonal().array() += 1e-8 * kzz.trace() / e;
  const MatrixXd lower = gauss::cholesky_psd(kzz);
  const auto lv = lower.triangularView<Eigen::Lower>();
  const MatrixXd linv = lv.solve(MatrixXd::Identity(e, e));
  WeightPrior prior;
  prior.mean = VectorXd::Zero(e);
  prior.cov = linv.transpose() * linv;
  prior.cov = 0.5 * (prior.cov + prior.cov.transpose()).eval();
  // Escalated jitter inside cholesky_psd is folded back into the precision.
  prior.precision = lower * lower.transpose();
  return prior;
}

inline WeightPrior diagonal_prior(const BasisSet& basis) {
  const int e = basis.size();
  WeightPrior prior;
  prior.mean = VectorXd::Zero(e);
  prior.cov = MatrixXd::Identity(e, e) * basis.diagonal_prior_var;
  prior.precision = MatrixXd::Identity(e, e) / basis.diagonal_prior_var;
  return prior;
}

/// The prior selected by the basis configuration.
inline WeightPrior default_prior(const BasisSet& basis) {
  if (basis.kind == BasisKind::SubsetOfRegressors && basis.prior == PriorKind::Nystrom)
    return nystrom_prior(basis);
  return diagonal_prior(basis);
}

/// Evenly spaced quantiles of a pooled 1-D sample (used to seed inducing inputs).
inline MatrixXd quantile_inducing(const MatrixXd& pooled, int count) {
  require(count >= 1, ErrorKind::InvalidArgument, "quantile_inducing: count < 1");
  require(pooled.rows() >= 1, ErrorKind::InvalidArgument, "quantile_inducing: no data");
  MatrixXd z(count, pooled.cols());
  for (Eigen::Index j = 0; j < pooled.cols(); ++j) {
    std::vector<double> col(pooled.col(j).data(), pooled.col(j).data() + pooled.rows());
    std::sort(col.begin(), col.end());
    for (int i = 0; i < count; ++i) {
      const double q = (i + 0.5) / count;
      const double pos = q * static_cast<double>(col.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, col.size() - 1);
      z(i, j) = col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
    }
  }
  return z;
}

// ---- hyperparameter packing: [log ell (d), log sf2, log sw2, Z row-major | sigma]

inline VectorXd pack_hyper(const BasisSet& b) {
  const int d = b.input_dim();
  const int tail = b.kind == BasisKind::SubsetOfRegressors ? b.size() * d : 1;
  VectorXd theta(d + 2 + tail);
  theta.head(d) = b.kernel.log_lengthscale;
  theta(d) = b.kernel.log_signal_var;
  theta(d + 1) = b.kernel.log_noise_var;
  if (b.kind == BasisKind::SubsetOfRegressors) {
    for (int i = 0; i < b.size(); ++i)
      for (int j = 0; j < d; ++j) theta(d + 2 + i * d + j) = b.inducing(i, j);
  } else {
    theta(d + 2) = b.cosine_freq;
  }
  return theta;
}

inline BasisSet unpack_hyper(const BasisSet& like, const VectorXd& theta) {
  BasisSet b = like;
  const int d = b.input_dim();
  require(theta.size() == pack_hyper(like).size(), ErrorKind::DimensionMismatch,
          "unpack_hyper: parameter vector has wrong length");
  b.kernel.log_lengthscale = theta.head(d);
  b.kernel.log_signal_var = theta(d);
  b.kernel.log_noise_var = theta(d + 1);
  if (b.kind == BasisKind::SubsetOfRegressors) {
    for (int i = 0; i < b.size(); ++i)
      for (int j = 0; j < d; ++j) b.inducing(i, j) = theta(d + 2 + i * d + j);
  } else {
    b.cosine_freq = theta(d + 2);
  }
  return b;
}

inline int noise_index(const BasisSet& b) { return b.input_dim() + 1; }

// ---- JSON

inline nlohmann::json to_json(const BasisSet& b) {
  nlohmann::json j;
  j["kind"] = b.kind == BasisKind::SubsetOfRegressors ? "SubsetOfRegressors" : "ParametricCosine";
  j["input_dim"] = b.input_dim();
  std::vector<double> z;
  for (Eigen::Index i = 0; i < b.inducing.rows(); ++i)
    for (Eigen::Index k = 0; k < b.inducing.cols(); ++k) z.push_back(b.inducing(i, k));
  j["Z"] = z;
  j["T_s"] = b.sample_time;
  j["sigma"] = b.cosine_freq;
  j["log_lengthscale"] =
      std::vector<double>(b.kernel.log_lengthscale.data(),
                          b.kernel.log_lengthscale.data() + b.kernel.log_lengthscale.size());
  j["log_signal_var"] = b.kernel.log_signal_var;
  j["log_noise_var"] = b.kernel.log_noise_var;
  j["prior"] = b.prior == PriorKind::Nystrom ? "Nystrom" : "Diagonal";
  j["diagonal_prior_var"] = b.diagonal_prior_var;
  return j;
}

inline BasisSet basis_from_json(const nlohmann::json& j) {
  BasisSet b;
  const std::string kind = j.at("kind").get<std::string>();
  require(kind == "SubsetOfRegressors" || kind == "ParametricCosine", ErrorKind::InvalidArgument,
          "unknown basis kind " + kind);
  b.kind = kind == "SubsetOfRegressors" ? BasisKind::SubsetOfRegressors : BasisKind::ParametricCosine;
  const auto ell = j.at("log_lengthscale").get<std::vector<double>>();
  b.kernel.log_lengthscale = Eigen::Map<const VectorXd>(ell.data(), static_cast<Eigen::Index>(ell.size()));
  b.kernel.log_signal_var = j.at("log_signal_var").get<double>();
  b.kernel.log_noise_var = j.at("log_noise_var").get<double>();
  b.sample_time = j.value("T_s", 0.2);
  b.cosine_freq = j.value("sigma", 3.0);
  const int d = b.kernel.input_dim();
  const auto z = j.value("Z", std::vector<double>{});
  require(z.size() % static_cast<std::size_t>(d) == 0, ErrorKind::DimensionMismatch,
          "basis JSON: Z length not a multiple of d");
  b.inducing.resize(static_cast<Eigen::Index>(z.size()) / d, d);
  for (Eigen::Index i = 0; i < b.inducing.rows(); ++i)
    for (int k = 0; k < d; ++k) b.inducing(i, k) = z[static_cast<std::size_t>(i * d + k)];
  b.prior = j.value("prior", std::string(b.kind == BasisKind::SubsetOfRegressors ? "Nystrom" : "Diagonal")) ==
                    "Nystrom"
                ? PriorKind::Nystrom
                : PriorKind::Diagonal;
  b.diagonal_prior_var = j.value("diagonal_prior_var", 1.0);
  if (b.kind == BasisKind::SubsetOfRegressors)
    require(b.inducing.rows() >= 1, ErrorKind::InvalidArgument, "basis JSON: SoR needs E >= 1");
  return b;
}

}  // namespace mlmpc::features
