#pragma once

// Multi-task datasets, the negative ELBO meta-training loss and the
// hyperparameter optimizer that minimizes it.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlmpc/blr.hpp"
#include "mlmpc/error.hpp"
#include "mlmpc/features.hpp"
#include "mlmpc/gauss.hpp"
#include "mlmpc/io.hpp"
#include "mlmpc/rng.hpp"

namespace mlmpc::meta {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using features::BasisSet;

struct TaskDataset {
  std::string task_id;
  MatrixXd x;  // N x d
  VectorXd y;  // N

  int size() const { return static_cast<int>(y.size()); }
};

struct MetaDataset {
  std::vector<TaskDataset> tasks;
  int input_dim = 1;

  int total_points() const {
    int n = 0;
    for (const auto& t : tasks) n += t.size();
    return n;
  }

  MatrixXd pooled_inputs() const {
    MatrixXd pooled(total_points(), input_dim);
    Eigen::Index r = 0;
    for (const auto& t : tasks) {
      pooled.middleRows(r, t.x.rows()) = t.x;
      r += t.x.rows();
    }
    return pooled;
  }

  void validate() const {
    for (const auto& t : tasks) {
      require(t.x.rows() == t.y.size(), ErrorKind::DimensionMismatch,
              "task " + t.task_id + ": X rows != y size");
      require(t.x.rows() == 0 || t.x.cols() == input_dim, ErrorKind::DimensionMismatch,
              "task " + t.task_id + ": input dimension differs from dataset");
      require(t.x.allFinite() && t.y.allFinite(), ErrorKind::InvalidArgument,
              "task " + t.task_id + ": non-finite entries");
    }
  }
};

/// Tasks in the fixed reduction order (sorted by task_id).
inline std::vector<const TaskDataset*> ordered_tasks(const MetaDataset& data) {
  std::vector<const TaskDataset*> out;
  for (const auto& t : data.tasks) out.push_back(&t);
  std::stable_sort(out.begin(), out.end(),
                   [](const TaskDataset* a, const TaskDataset* b) { return a->task_id < b->task_id; });
  return out;
}

inline blr::LinearPosterior per_task_posterior(const BasisSet& basis, const TaskDataset& task,
                                               const features::WeightPrior& prior) {
  require(task.x.rows() == 0 || task.x.cols() == basis.input_dim(), ErrorKind::DimensionMismatch,
          "per_task_posterior: task input dimension != basis");
  return blr::blr_fit(features::feature_matrix(basis, task.x), task.y, basis.kernel.noise_var(), prior);
}

inline blr::LinearPosterior per_task_posterior(const BasisSet& basis, const TaskDataset& task) {
  return per_task_posterior(basis, task, features::default_prior(basis));
}

/// Per-task factorization of the GP prior covariance at the task inputs. It
/// depends only on the kernel lengthscales and signal variance, so it is
/// cached across finite-difference probes that move other parameters.
struct PriorFactor {
  VectorXd log_lengthscale;
  double log_signal_var = std::numeric_limits<double>::quiet_NaN();
  MatrixXd x;
  MatrixXd lower;  // chol(K + eps I)
  double eps = 0.0;
  double log_det = 0.0;
  double trace_inverse = 0.0;
};

class ElboWorkspace {
 public:
  const PriorFactor& prior_factor(const TaskDataset& task, const features::KernelHyper& h) {
    PriorFactor& f = cache_[task.task_id];
    if (f.log_signal_var == h.log_signal_var && f.log_lengthscale.size() == h.log_lengthscale.size() &&
        f.log_lengthscale == h.log_lengthscale && f.x.rows() == task.x.rows() &&
        f.x.cols() == task.x.cols() && f.x == task.x)
      return f;
    const auto n = task.x.rows();
    MatrixXd k = features::gram(task.x, task.x, h);
    f.eps = 1e-8 * k.trace() / static_cast<double>(n);
    k.diagonal().array() += f.eps;
    f.lower = gauss::cholesky_psd(k);
    f.log_det = gauss::log_det_from_cholesky(f.lower);
    const MatrixXd linv = f.lower.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(n, n));
    f.trace_inverse = linv.squaredNorm();
    f.log_lengthscale = h.log_lengthscale;
    f.log_signal_var = h.log_signal_var;
    f.x = task.x;
    return f;
  }

 private:
  std::map<std::string, PriorFactor> cache_;
};

struct ElboTerms {
  double expected_loglik = 0.0;
  double kl = 0.0;

  double negative_elbo() const { return -(expected_loglik - kl); }
};

/// KL(q || p) for q = N(Phi mu, Phi S Phi^T) and p = N(0, K), both with the
/// common jitter eps of the prior factor; evaluated through the E x E
/// determinant lemma so the n x n q covariance is never factorized.
inline double low_rank_kl(const MatrixXd& phi, const blr::LinearPosterior& post, const PriorFactor& pf) {
  const auto n = phi.rows();
  const auto e = phi.cols();
  const auto lk = pf.lower.triangularView<Eigen::Lower>();
  const MatrixXd la = gauss::cholesky_psd(post.sigma);
  const MatrixXd b = phi * la;
  const MatrixXd w = lk.solve(b);
  const VectorXd mean_q = phi * post.mu;
  const VectorXd d = lk.solve(mean_q);

  MatrixXd inner = MatrixXd::Identity(e, e);
  inner.selfadjointView<Eigen::Lower>().rankUpdate(b.transpose(), 1.0 / pf.eps);
  inner = inner.selfadjointView<Eigen::Lower>();
  const double log_det_q =
      static_cast<double>(n) * std::log(pf.eps) + gauss::log_det_from_cholesky(gauss::cholesky_psd(inner));
  const double trace_term = w.squaredNorm() + pf.eps * pf.trace_inverse;
  return 0.5 * (trace_term + d.squaredNorm() - static_cast<double>(n) + pf.log_det - log_det_q);
}

inline ElboTerms task_elbo_terms(const BasisSet& basis, const TaskDataset& task,
                                 const features::WeightPrior& prior, ElboWorkspace& ws) {
  ElboTerms terms;
  if (task.size() == 0) return terms;
  const MatrixXd phi = features::feature_matrix(basis, task.x);
  const double noise_var = basis.kernel.noise_var();
  const blr::LinearPosterior post = blr::blr_fit(phi, task.y, noise_var, prior);
  const blr::Prediction pred = blr::predict_from_features(post, phi);
  for (int i = 0; i < task.size(); ++i)
    terms.expected_loglik += gauss::expected_gaussian_loglik(task.y(i), pred.mean(i), pred.var(i), noise_var);
  terms.kl = low_rank_kl(phi, post, ws.prior_factor(task, basis.kernel));
  return terms;
}

inline ElboTerms elbo_terms(const BasisSet& basis, const MetaDataset& data, ElboWorkspace& ws) {
  ElboTerms total;
  if (data.tasks.empty()) return total;
  const features::WeightPrior prior = features::default_prior(basis);
  for (const TaskDataset* t : ordered_tasks(data)) {
    const ElboTerms terms = task_elbo_terms(basis, *t, prior, ws);
    total.expected_loglik += terms.expected_loglik;
    total.kl += terms.kl;
  }
  return total;
}

/// -sum_m [ sum_i E_q log p(y_i | f) - KL(q^m || p^m) ], closed form.
inline double negative_elbo(const BasisSet& basis, const MetaDataset& data, ElboWorkspace& ws) {
  return elbo_terms(basis, data, ws).negative_elbo();
}

inline double negative_elbo(const BasisSet& basis, const MetaDataset& data) {
  ElboWorkspace ws;
  return negative_elbo(basis, data, ws);
}

/// Central differences with a relative step h_j = step * max(|theta_j|, 1).
template <class F>
VectorXd central_difference_gradient(F&& f, const VectorXd& theta, double step) {
  VectorXd grad(theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double h = step * std::max(std::abs(theta(j)), 1.0);
    VectorXd tp = theta;
    VectorXd tm = theta;
    tp(j) += h;
    tm(j) -= h;
    grad(j) = (f(tp) - f(tm)) / (2.0 * h);
  }
  return grad;
}

/// Finite-difference gradient of the negative ELBO over the packed log-space parameters.
inline VectorXd elbo_gradient(const BasisSet& basis, const MetaDataset& data, double grad_step,
                              ElboWorkspace& ws) {
  require(grad_step > 0.0 && grad_step < 0.1, ErrorKind::InvalidArgument,
          "elbo_gradient: grad_step must lie in (0, 0.1)");
  const VectorXd theta = features::pack_hyper(basis);
  if (data.tasks.empty()) return VectorXd::Zero(theta.size());
  return central_difference_gradient(
      [&](const VectorXd& t) { return negative_elbo(features::unpack_hyper(basis, t), data, ws); }, theta,
      grad_step);
}

inline VectorXd elbo_gradient(const BasisSet& basis, const MetaDataset& data, double grad_step) {
  ElboWorkspace ws;
  return elbo_gradient(basis, data, grad_step, ws);
}

// ---- meta-training

enum class Optimizer { GradientDescentWithBacktracking, AdaptivePerParameter };

struct ParamBounds {
  VectorXd lower;
  VectorXd upper;

  VectorXd clamp(const VectorXd& theta) const {
    return theta.cwiseMax(lower).cwiseMin(upper);
  }
};

/// log ell and log sf2 in [log 1e-3, log 1e3]; log sw2 in [log 1e-8, log 1e3];
/// inducing inputs and cosine frequency unbounded.
inline ParamBounds default_bounds(const BasisSet& basis) {
  const auto n = features::pack_hyper(basis).size();
  const double inf = std::numeric_limits<double>::infinity();
  ParamBounds b{VectorXd::Constant(n, -inf), VectorXd::Constant(n, inf)};
  const int d = basis.input_dim();
  for (int j = 0; j <= d; ++j) {
    b.lower(j) = std::log(1e-3);
    b.upper(j) = std::log(1e3);
  }
  b.lower(d + 1) = std::log(1e-8);
  b.upper(d + 1) = std::log(1e3);
  return b;
}

struct HyperInit {
  double lengthscale = 0.3;
  double signal_var = 1.0;
  double noise_var = 1e-2;
  int num_inducing = 4;
};

struct MetaTrainConfig {
  int max_iters = 200;
  double grad_step = 1e-4;
  Optimizer optimizer = Optimizer::GradientDescentWithBacktracking;
  HyperInit init;
  std::uint64_t seed = 0;
  std::optional<ParamBounds> bounds;  // default_bounds(basis0) when empty
  double initial_step = 0.1;          // parameter-space step length
  int max_task_points = 200;
  int max_halvings = 20;

  void validate() const {
    require(max_iters >= 1, ErrorKind::InvalidArgument, "meta-train: max_iters < 1");
    require(grad_step > 0.0 && grad_step < 0.1, ErrorKind::InvalidArgument,
            "meta-train: grad_step must lie in (0, 0.1)");
    require(initial_step > 0.0, ErrorKind::InvalidArgument, "meta-train: initial_step <= 0");
  }
};

/// SoR basis with E inducing inputs at evenly spaced quantiles of the pooled inputs.
inline BasisSet initial_sor_basis(const MetaDataset& data, const HyperInit& init) {
  const MatrixXd pooled = data.pooled_inputs();
  const MatrixXd z = features::quantile_inducing(pooled, init.num_inducing);
  return BasisSet::subset_of_regressors(
      z, features::KernelHyper::make(VectorXd::Constant(data.input_dim, init.lengthscale),
                                     init.signal_var, init.noise_var));
}

struct TraceRow {
  int iter = 0;
  double loss = 0.0;
  double step_size = 0.0;
};

struct SubsampleRecord {
  std::string task_id;
  std::vector<int> kept_rows;  // empty when the task was used whole
};

struct MetaTrainResult {
  BasisSet basis;
  std::vector<TraceRow> trace;
  std::vector<SubsampleRecord> subsample;
  int gradient_evaluations = 0;
};

/// Tasks larger than cap are subsampled uniformly without replacement using
/// the run seed; kept rows stay in their original order.
inline MetaDataset cap_task_sizes(const MetaDataset& data, int cap, std::uint64_t seed,
                                  std::vector<SubsampleRecord>* record = nullptr) {
  MetaDataset out;
  out.input_dim = data.input_dim;
  for (const auto& t : data.tasks) {
    if (t.size() <= cap) {
      out.tasks.push_back(t);
      if (record) record->push_back({t.task_id, {}});
      continue;
    }
    Rng rng = child_stream(seed, {stream_id("subsample"), stream_id(t.task_id)});
    std::vector<int> idx(static_cast<std::size_t>(t.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(cap));
    std::sort(idx.begin(), idx.end());
    TaskDataset s{t.task_id, MatrixXd(cap, t.x.cols()), VectorXd(cap)};
    for (int i = 0; i < cap; ++i) {
      s.x.row(i) = t.x.row(idx[static_cast<std::size_t>(i)]);
      s.y(i) = t.y(idx[static_cast<std::size_t>(i)]);
    }
    out.tasks.push_back(std::move(s));
    if (record) record->push_back({t.task_id, idx});
  }
  return out;
}

/// First-order descent on the negative ELBO with a backtracking line search:
/// the step is halved until the loss decreases (at most max_halvings times),
/// so accepted losses are strictly decreasing. Stops at max_iters, when no
/// descent step exists, or when the relative decrease over the last 10
/// iterations falls below 1e-6.
inline MetaTrainResult meta_train(const MetaDataset& data_in, const MetaTrainConfig& cfg,
                                  const BasisSet& basis0) {
  cfg.validate();
  data_in.validate();
  require(data_in.tasks.empty() || data_in.input_dim == basis0.input_dim(), ErrorKind::DimensionMismatch,
          "meta_train: data and basis input dimensions differ");
  MetaTrainResult result;
  const MetaDataset data = cap_task_sizes(data_in, cfg.max_task_points, cfg.seed, &result.subsample);
  const ParamBounds bounds = cfg.bounds ? *cfg.bounds : default_bounds(basis0);
  ElboWorkspace ws;

  VectorXd theta = bounds.clamp(features::pack_hyper(basis0));
  auto loss_at = [&](const VectorXd& t) { return negative_elbo(features::unpack_hyper(basis0, t), data, ws); };
  double loss = loss_at(theta);
  require(std::isfinite(loss), ErrorKind::OptimFailed, "meta_train: initial loss not finite");
  result.trace.push_back({0, loss, 0.0});

  double step = cfg.initial_step;
  VectorXd rprop_step = VectorXd::Constant(theta.size(), cfg.initial_step);
  VectorXd prev_grad = VectorXd::Zero(theta.size());

  for (int it = 1; it <= cfg.max_iters; ++it) {
    const VectorXd grad = elbo_gradient(features::unpack_hyper(basis0, theta), data, cfg.grad_step, ws);
    ++result.gradient_evaluations;
    // Components pinned at an active bound do not contribute to the direction.
    VectorXd g = grad;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
      if ((theta(j) <= bounds.lower(j) && g(j) > 0.0) || (theta(j) >= bounds.upper(j) && g(j) < 0.0)) g(j) = 0.0;
    }
    const double gnorm = g.norm();
    if (!(gnorm > 0.0) || !std::isfinite(gnorm)) break;

    bool accepted = false;
    double new_loss = loss;
    VectorXd candidate;
    if (cfg.optimizer == Optimizer::GradientDescentWithBacktracking) {
      const VectorXd dir = -g / gnorm;
      for (int h = 0; h <= cfg.max_halvings; ++h) {
        candidate = bounds.clamp(theta + step * dir);
        new_loss = loss_at(candidate);
        if (std::isfinite(new_loss) && new_loss < loss) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
    } else {
      for (Eigen::Index j = 0; j < g.size(); ++j) {
        const double s = g(j) * prev_grad(j);
        if (s > 0.0) rprop_step(j) = std::min(rprop_step(j) * 1.2, 10.0 * cfg.initial_step);
        if (s < 0.0) rprop_step(j) *= 0.5;
      }
      VectorXd scale = rprop_step;
      for (int h = 0; h <= cfg.max_halvings; ++h) {
        VectorXd delta(g.size());
        for (Eigen::Index j = 0; j < g.size(); ++j) delta(j) = g(j) > 0 ? -scale(j) : (g(j) < 0 ? scale(j) : 0.0);
        candidate = bounds.clamp(theta + delta);
        new_loss = loss_at(candidate);
        if (std::isfinite(new_loss) && new_loss < loss) {
          accepted = true;
          rprop_step = scale;
          break;
        }
        scale *= 0.5;
      }
      step = rprop_step.maxCoeff();
      prev_grad = g;
    }

    if (!accepted) {
      if (it == 1) throw Error(ErrorKind::OptimFailed, "meta_train: no descent step at first iteration");
      break;
    }
    theta = candidate;
    loss = new_loss;
    result.trace.push_back({it, loss, step});
    if (cfg.optimizer == Optimizer::GradientDescentWithBacktracking) step = std::min(step * 2.0, 1e3);

    const auto n = result.trace.size();
    if (n > 10) {
      const double old = result.trace[n - 11].loss;
      if ((old - loss) / std::max(std::abs(old), 1e-300) < 1e-6) break;
    }
  }
  result.basis = features::unpack_hyper(basis0, theta);
  return result;
}

// ---- file formats

/// One CSV per task, header x1,...,xd,y; task_id is the file stem.
inline TaskDataset load_task_csv(const std::filesystem::path& path) {
  const io::CsvTable t = io::read_csv(path);
  require(t.header.size() >= 2 && t.header.back() == "y", ErrorKind::Io,
          "task csv must have header x1,...,xd,y: " + path.string());
  const auto d = static_cast<Eigen::Index>(t.header.size()) - 1;
  for (Eigen::Index j = 0; j < d; ++j)
    require(t.header[static_cast<std::size_t>(j)] == "x" + std::to_string(j + 1), ErrorKind::Io,
            "task csv header must be x1,...,xd,y: " + path.string());
  TaskDataset task;
  task.task_id = path.stem().string();
  task.x = t.rows.leftCols(d);
  task.y = t.rows.col(d);
  return task;
}

inline void write_task_csv(const std::filesystem::path& path, const TaskDataset& task) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < task.x.cols(); ++j) header.push_back("x" + std::to_string(j + 1));
  header.push_back("y");
  io::CsvWriter w(path, header);
  for (int i = 0; i < task.size(); ++i) {
    std::vector<double> row;
    for (Eigen::Index j = 0; j < task.x.cols(); ++j) row.push_back(task.x(i, j));
    row.push_back(task.y(i));
    w.row(row);
  }
}

inline MetaDataset load_meta_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::Io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  MetaDataset data;
  bool first = true;
  for (const auto& f : files) {
    TaskDataset t = load_task_csv(f);
    if (first) data.input_dim = static_cast<int>(t.x.cols());
    require(t.x.cols() == data.input_dim, ErrorKind::DimensionMismatch,
            "inconsistent input dimension in " + f.string());
    first = false;
    data.tasks.push_back(std::move(t));
  }
  return data;
}

inline void write_loss_trace(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  io::CsvWriter w(path, {"iter", "loss", "step_size"});
  for (const auto& r : trace) w.row({static_cast<double>(r.iter), r.loss, r.step_size});
}

}  // namespace mlmpc::meta
