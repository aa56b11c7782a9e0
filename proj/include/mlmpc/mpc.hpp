#pragma once

// Finite-horizon optimal control (box-constrained iLQR over single shooting),
// residual models adapted online, the mountain-car MPC, the contouring
// controller for the car and a generic closed-loop runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mlmpc/blr.hpp"
#include "mlmpc/envs.hpp"
#include "mlmpc/error.hpp"
#include "mlmpc/features.hpp"
#include "mlmpc/io.hpp"
#include "mlmpc/rng.hpp"

namespace mlmpc::mpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---- optimal control problem

using DynamicsFn = std::function<VectorXd(const VectorXd&, const VectorXd&, int)>;
using StageFn = std::function<double(const VectorXd&, const VectorXd&, int)>;
using StageResidualFn = std::function<VectorXd(const VectorXd&, const VectorXd&, int)>;

/// Adds weight * max(0, g(x, u, k))^2 to the stage cost.
struct SoftPenalty {
  StageFn g;
  double weight = 0.0;
};

struct SolverOptions {
  int max_iters = 30;
  double fd_step = 1e-6;
  double hessian_step = 1e-4;
  double tol = 1e-10;
  int max_line_search = 12;
};

/// Stage cost = stage_cost + 0.5 |stage_residual|^2 + stage_linear + soft
/// penalties. Any part may be empty. Residual parts get Gauss-Newton
/// curvature, the general part a finite-difference Hessian projected onto the
/// PSD cone, the linear part only a gradient.
struct Ocp {
  int horizon = 1;
  int state_dim = 1;
  int input_dim = 1;
  DynamicsFn dynamics;
  StageFn stage_cost;
  StageResidualFn stage_residual;
  StageFn stage_linear;
  std::function<double(const VectorXd&)> terminal_cost;
  std::function<VectorXd(const VectorXd&)> terminal_residual;
  VectorXd u_lower;
  VectorXd u_upper;
  std::vector<SoftPenalty> soft;

  void validate() const {
    require(horizon >= 1 && state_dim >= 1 && input_dim >= 1, ErrorKind::InvalidArgument,
            "Ocp: horizon and dimensions must be >= 1");
    require(static_cast<bool>(dynamics), ErrorKind::InvalidArgument, "Ocp: dynamics missing");
    require(u_lower.size() == input_dim && u_upper.size() == input_dim, ErrorKind::DimensionMismatch,
            "Ocp: input bounds size");
    require((u_lower.array() <= u_upper.array()).all(), ErrorKind::InvalidArgument, "Ocp: lower > upper");
    for (const auto& p : soft)
      require(p.weight >= 0.0 && static_cast<bool>(p.g), ErrorKind::InvalidArgument, "Ocp: bad soft penalty");
  }

  static Ocp unbounded(int n, int m, int horizon) {
    Ocp o;
    o.horizon = horizon;
    o.state_dim = n;
    o.input_dim = m;
    o.u_lower = VectorXd::Constant(m, -std::numeric_limits<double>::infinity());
    o.u_upper = VectorXd::Constant(m, std::numeric_limits<double>::infinity());
    return o;
  }

  VectorXd clamp(const VectorXd& u) const { return u.cwiseMax(u_lower).cwiseMin(u_upper); }

  double stage(const VectorXd& x, const VectorXd& u, int k) const {
    double c = 0.0;
    if (stage_cost) c += stage_cost(x, u, k);
    if (stage_residual) c += 0.5 * stage_residual(x, u, k).squaredNorm();
    if (stage_linear) c += stage_linear(x, u, k);
    for (const auto& p : soft) {
      const double v = std::max(0.0, p.g(x, u, k));
      c += p.weight * v * v;
    }
    return c;
  }

  double terminal(const VectorXd& x) const {
    double c = 0.0;
    if (terminal_cost) c += terminal_cost(x);
    if (terminal_residual) c += 0.5 * terminal_residual(x).squaredNorm();
    return c;
  }
};

struct OcpSolution {
  std::vector<VectorXd> inputs;  // N
  std::vector<VectorXd> states;  // N + 1
  double cost = 0.0;
  int iterations = 0;
};

/// Rolls out inputs from x0 and returns the states and total cost.
inline double rollout(const Ocp& ocp, const VectorXd& x0, const std::vector<VectorXd>& inputs,
                      std::vector<VectorXd>& states) {
  states.resize(inputs.size() + 1);
  states[0] = x0;
  double cost = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const int kk = static_cast<int>(k);
    cost += ocp.stage(states[k], inputs[k], kk);
    states[k + 1] = ocp.dynamics(states[k], inputs[k], kk);
  }
  return cost + ocp.terminal(states.back());
}

namespace detail {

inline double step_for(double v, double rel) { return rel * std::max(1.0, std::abs(v)); }

template <class F>
MatrixXd jacobian(F&& f, const VectorXd& z, int rows, double rel) {
  MatrixXd j(rows, z.size());
  VectorXd zp = z, zm = z;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double h = step_for(z(i), rel);
    zp(i) = z(i) + h;
    zm(i) = z(i) - h;
    j.col(i) = (f(zp) - f(zm)) / (2.0 * h);
    zp(i) = zm(i) = z(i);
  }
  return j;
}

template <class F>
VectorXd gradient(F&& f, const VectorXd& z, double rel) {
  VectorXd g(z.size());
  VectorXd zz = z;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double h = step_for(z(i), rel);
    zz(i) = z(i) + h;
    const double fp = f(zz);
    zz(i) = z(i) - h;
    const double fm = f(zz);
    zz(i) = z(i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

template <class F>
MatrixXd hessian_psd(F&& f, const VectorXd& z, double rel) {
  const auto n = z.size();
  MatrixXd h(n, n);
  VectorXd zz = z;
  const double f0 = f(z);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi = step_for(z(i), rel);
    zz(i) = z(i) + hi;
    const double fp = f(zz);
    zz(i) = z(i) - hi;
    const double fm = f(zz);
    zz(i) = z(i);
    h(i, i) = (fp - 2.0 * f0 + fm) / (hi * hi);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double hj = step_for(z(j), rel);
      double s = 0.0;
      for (int a : {1, -1})
        for (int b : {1, -1}) {
          zz(i) = z(i) + a * hi;
          zz(j) = z(j) + b * hj;
          s += a * b * f(zz);
        }
      zz(i) = z(i);
      zz(j) = z(j);
      h(i, j) = h(j, i) = s / (4.0 * hi * hj);
    }
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(h);
  const VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

struct Quadratic {
  VectorXd g;  // gradient over z = [x; u]
  MatrixXd h;  // PSD curvature
};

inline Quadratic stage_quadratic(const Ocp& ocp, const VectorXd& x, const VectorXd& u, int k,
                                 const SolverOptions& opt) {
  const int n = ocp.state_dim, m = ocp.input_dim;
  VectorXd z(n + m);
  z << x, u;
  Quadratic q{VectorXd::Zero(n + m), MatrixXd::Zero(n + m, n + m)};
  auto split = [&](const VectorXd& zz) { return std::pair<VectorXd, VectorXd>(zz.head(n), zz.tail(m)); };
  if (ocp.stage_cost) {
    auto f = [&](const VectorXd& zz) {
      const auto [xx, uu] = split(zz);
      return ocp.stage_cost(xx, uu, k);
    };
    q.g += gradient(f, z, opt.fd_step);
    q.h += hessian_psd(f, z, opt.hessian_step);
  }
  auto add_residual = [&](auto&& r) {
    const VectorXd r0 = r(z);
    const MatrixXd j = jacobian(r, z, static_cast<int>(r0.size()), opt.fd_step);
    q.g += j.transpose() * r0;
    q.h += j.transpose() * j;
  };
  if (ocp.stage_residual)
    add_residual([&](const VectorXd& zz) {
      const auto [xx, uu] = split(zz);
      return ocp.stage_residual(xx, uu, k);
    });
  for (const auto& p : ocp.soft) {
    const double scale = std::sqrt(2.0 * p.weight);
    add_residual([&](const VectorXd& zz) {
      const auto [xx, uu] = split(zz);
      return VectorXd::Constant(1, scale * std::max(0.0, p.g(xx, uu, k)));
    });
  }
  if (ocp.stage_linear)
    q.g += gradient(
        [&](const VectorXd& zz) {
          const auto [xx, uu] = split(zz);
          return ocp.stage_linear(xx, uu, k);
        },
        z, opt.fd_step);
  return q;
}

inline Quadratic terminal_quadratic(const Ocp& ocp, const VectorXd& x, const SolverOptions& opt) {
  const int n = ocp.state_dim;
  Quadratic q{VectorXd::Zero(n), MatrixXd::Zero(n, n)};
  if (ocp.terminal_cost) {
    q.g += gradient(ocp.terminal_cost, x, opt.fd_step);
    q.h += hessian_psd(ocp.terminal_cost, x, opt.hessian_step);
  }
  if (ocp.terminal_residual) {
    const VectorXd r0 = ocp.terminal_residual(x);
    const MatrixXd j = jacobian(ocp.terminal_residual, x, static_cast<int>(r0.size()), opt.fd_step);
    q.g += j.transpose() * r0;
    q.h += j.transpose() * j;
  }
  return q;
}

struct BoxQpResult {
  bool ok = false;
  VectorXd x;
  std::vector<bool> free;
  Eigen::LLT<MatrixXd> llt;  // of the free block
  std::vector<Eigen::Index> free_idx;
};

/// min 0.5 x'Hx + g'x subject to lo <= x <= hi, by projected Newton.
inline BoxQpResult box_qp(const MatrixXd& h, const VectorXd& g, const VectorXd& lo, const VectorXd& hi,
                          const VectorXd& x0) {
  const auto n = g.size();
  BoxQpResult r;
  r.x = x0.cwiseMax(lo).cwiseMin(hi);
  auto value = [&](const VectorXd& x) { return g.dot(x) + 0.5 * x.dot(h * x); };
  auto factor_free = [&](const VectorXd& grad) {
    r.free.assign(static_cast<std::size_t>(n), true);
    r.free_idx.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool clamped = (r.x(j) <= lo(j) && grad(j) > 0.0) || (r.x(j) >= hi(j) && grad(j) < 0.0);
      r.free[static_cast<std::size_t>(j)] = !clamped;
      if (!clamped) r.free_idx.push_back(j);
    }
    const auto nf = static_cast<Eigen::Index>(r.free_idx.size());
    MatrixXd hff(nf, nf);
    for (Eigen::Index a = 0; a < nf; ++a)
      for (Eigen::Index b = 0; b < nf; ++b)
        hff(a, b) = h(r.free_idx[static_cast<std::size_t>(a)], r.free_idx[static_cast<std::size_t>(b)]);
    r.llt.compute(hff);
    return nf == 0 || r.llt.info() == Eigen::Success;
  };
  for (int it = 0; it < 100; ++it) {
    const VectorXd grad = g + h * r.x;
    if (!factor_free(grad)) return r;
    if (r.free_idx.empty()) break;
    const auto nf = static_cast<Eigen::Index>(r.free_idx.size());
    VectorXd gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) gf(a) = grad(r.free_idx[static_cast<std::size_t>(a)]);
    if (gf.norm() < 1e-13 * (1.0 + g.norm())) break;
    const VectorXd df = -r.llt.solve(gf);
    VectorXd dir = VectorXd::Zero(n);
    for (Eigen::Index a = 0; a < nf; ++a) dir(r.free_idx[static_cast<std::size_t>(a)]) = df(a);
    const double v0 = value(r.x);
    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const VectorXd cand = (r.x + step * dir).cwiseMax(lo).cwiseMin(hi);
      const double v1 = value(cand);
      if (v1 - v0 <= 0.1 * grad.dot(cand - r.x) && v1 < v0) {
        moved = (cand - r.x).norm() > 0.0;
        r.x = cand;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  r.ok = factor_free(g + h * r.x);
  return r;
}

}  // namespace detail

/// Box-constrained iterative LQR (Gauss-Newton single shooting) with a
/// backtracking line search that only accepts cost decreases, so the result
/// is never worse than the (clamped) warm start.
inline OcpSolution solve_ocp(const Ocp& ocp, const VectorXd& x0, const std::vector<VectorXd>& warm = {},
                             const SolverOptions& opt = {}) {
  ocp.validate();
  require(x0.size() == ocp.state_dim, ErrorKind::DimensionMismatch, "solve_ocp: x0 size");
  require(x0.allFinite(), ErrorKind::InvalidArgument, "solve_ocp: x0 not finite");
  const int n_steps = ocp.horizon, n = ocp.state_dim, m = ocp.input_dim;
  require(warm.empty() || static_cast<int>(warm.size()) == n_steps, ErrorKind::DimensionMismatch,
          "solve_ocp: warm start length != horizon");

  OcpSolution sol;
  sol.inputs.assign(static_cast<std::size_t>(n_steps), VectorXd::Zero(m));
  for (int k = 0; k < n_steps; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    if (!warm.empty()) {
      require(warm[kk].size() == m, ErrorKind::DimensionMismatch, "solve_ocp: warm input size");
      sol.inputs[kk] = warm[kk];
    }
    sol.inputs[kk] = ocp.clamp(sol.inputs[kk]);
  }
  sol.cost = rollout(ocp, x0, sol.inputs, sol.states);
  if (!std::isfinite(sol.cost)) {
    std::vector<VectorXd> zeros(static_cast<std::size_t>(n_steps), ocp.clamp(VectorXd::Zero(m)));
    std::vector<VectorXd> zs;
    const double c0 = rollout(ocp, x0, zeros, zs);
    require(std::isfinite(c0), ErrorKind::SolveFailed, "solve_ocp: cost not finite at zero inputs");
    sol.inputs = zeros;
    sol.states = zs;
    sol.cost = c0;
  }

  std::vector<MatrixXd> a(static_cast<std::size_t>(n_steps)), b(static_cast<std::size_t>(n_steps));
  std::vector<detail::Quadratic> quad(static_cast<std::size_t>(n_steps));
  std::vector<VectorXd> kff(static_cast<std::size_t>(n_steps), VectorXd::Zero(m));
  std::vector<MatrixXd> kfb(static_cast<std::size_t>(n_steps), MatrixXd::Zero(m, n));
  double mu = 0.0;
  bool relinearize = true;
  detail::Quadratic term;

  for (int it = 0; it < opt.max_iters; ++it) {
    if (relinearize) {
      for (int k = 0; k < n_steps; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        VectorXd z(n + m);
        z << sol.states[kk], sol.inputs[kk];
        const MatrixXd j = detail::jacobian(
            [&](const VectorXd& zz) { return ocp.dynamics(zz.head(n), zz.tail(m), k); }, z, n, opt.fd_step);
        a[kk] = j.leftCols(n);
        b[kk] = j.rightCols(m);
        quad[kk] = detail::stage_quadratic(ocp, sol.states[kk], sol.inputs[kk], k, opt);
      }
      term = detail::terminal_quadratic(ocp, sol.states.back(), opt);
      relinearize = false;
    }

    // Backward pass.
    bool backward_ok = true;
    VectorXd vx = term.g;
    MatrixXd vxx = term.h;
    for (int k = n_steps - 1; k >= 0; --k) {
      const auto kk = static_cast<std::size_t>(k);
      const auto& q = quad[kk];
      const VectorXd qx = q.g.head(n) + a[kk].transpose() * vx;
      const VectorXd qu = q.g.tail(m) + b[kk].transpose() * vx;
      const MatrixXd qxx = q.h.topLeftCorner(n, n) + a[kk].transpose() * vxx * a[kk];
      MatrixXd quu = q.h.bottomRightCorner(m, m) + b[kk].transpose() * vxx * b[kk];
      const MatrixXd qux = q.h.bottomLeftCorner(m, n) + b[kk].transpose() * vxx * a[kk];
      quu = 0.5 * (quu + quu.transpose()).eval();
      MatrixXd quu_reg = quu;
      quu_reg.diagonal().array() += mu;
      const VectorXd lo = ocp.u_lower - sol.inputs[kk];
      const VectorXd hi = ocp.u_upper - sol.inputs[kk];
      const detail::BoxQpResult qp = detail::box_qp(quu_reg, qu, lo, hi, kff[kk].cwiseMax(lo).cwiseMin(hi));
      if (!qp.ok) {
        backward_ok = false;
        break;
      }
      kff[kk] = qp.x;
      kfb[kk].setZero();
      if (!qp.free_idx.empty()) {
        const auto nf = static_cast<Eigen::Index>(qp.free_idx.size());
        MatrixXd rhs(nf, n);
        for (Eigen::Index r = 0; r < nf; ++r) rhs.row(r) = qux.row(qp.free_idx[static_cast<std::size_t>(r)]);
        const MatrixXd kf = -qp.llt.solve(rhs);
        for (Eigen::Index r = 0; r < nf; ++r) kfb[kk].row(qp.free_idx[static_cast<std::size_t>(r)]) = kf.row(r);
      }
      const VectorXd& kv = kff[kk];
      const MatrixXd& km = kfb[kk];
      vx = qx + km.transpose() * quu * kv + km.transpose() * qu + qux.transpose() * kv;
      vxx = qxx + km.transpose() * quu * km + km.transpose() * qux + qux.transpose() * km;
      vxx = 0.5 * (vxx + vxx.transpose()).eval();
    }
    if (!backward_ok) {
      mu = std::max(1e-6, mu * 10.0);
      if (mu > 1e10) break;
      continue;
    }

    // Forward pass with backtracking.
    bool accepted = false;
    double alpha = 1.0;
    std::vector<VectorXd> new_u(static_cast<std::size_t>(n_steps)), new_x;
    for (int ls = 0; ls < opt.max_line_search; ++ls, alpha *= 0.5) {
      new_x.assign(static_cast<std::size_t>(n_steps) + 1, VectorXd());
      new_x[0] = x0;
      double cost = 0.0;
      for (int k = 0; k < n_steps; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        new_u[kk] = ocp.clamp(sol.inputs[kk] + alpha * kff[kk] + kfb[kk] * (new_x[kk] - sol.states[kk]));
        cost += ocp.stage(new_x[kk], new_u[kk], k);
        new_x[kk + 1] = ocp.dynamics(new_x[kk], new_u[kk], k);
      }
      cost += ocp.terminal(new_x.back());
      if (std::isfinite(cost) && cost < sol.cost) {
        const double improvement = sol.cost - cost;
        sol.inputs = new_u;
        sol.states = new_x;
        sol.cost = cost;
        accepted = true;
        ++sol.iterations;
        mu = mu > 1e-6 ? mu / 10.0 : 0.0;
        relinearize = true;
        if (improvement < opt.tol * (1.0 + std::abs(cost))) return sol;
        break;
      }
    }
    if (!accepted) {
      mu = std::max(1e-6, mu * 10.0);
      if (mu > 1e10) break;
    }
  }
  return sol;
}

/// Discrete-time LQR gains for x' = A x + B u, cost sum x'Qx + u'Ru + x_N'Q_f x_N.
/// Returns the first-step feedback K_0 with u_0 = -K_0 x_0.
inline MatrixXd riccati_first_gain(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q, const MatrixXd& r,
                                   const MatrixXd& qf, int horizon) {
  MatrixXd p = qf;
  MatrixXd k;
  for (int t = horizon - 1; t >= 0; --t) {
    const MatrixXd s = r + b.transpose() * p * b;
    k = s.ldlt().solve(b.transpose() * p * a);
    p = q + a.transpose() * p * (a - b * k);
    p = 0.5 * (p + p.transpose()).eval();
  }
  return k;
}

// ---- residual models and online adaptation

/// One scalar residual output f(z) = phi(z)' alpha with a BLR posterior on alpha.
struct ResidualChannel {
  std::string name;
  features::BasisSet basis;
  blr::LinearPosterior posterior;
  double noise_var = 1e-4;
  int target = 0;  // state component that receives the residual (additive models)

  double mean(const VectorXd& z) const { return features::features(basis, z).dot(posterior.mu); }
};

struct ResidualModel {
  std::vector<ResidualChannel> channels;

  int size() const { return static_cast<int>(channels.size()); }

  std::vector<VectorXd> means() const {
    std::vector<VectorXd> out;
    for (const auto& c : channels) out.push_back(c.posterior.mu);
    return out;
  }
};

/// Channel with the basis's own noise variance and a prior from `prior` (or the basis default).
inline ResidualChannel make_channel(std::string name, const features::BasisSet& basis, int target,
                                    const std::optional<VectorXd>& prior_mean = std::nullopt) {
  ResidualChannel c;
  c.name = std::move(name);
  c.basis = basis;
  c.posterior = blr::LinearPosterior::from_prior(features::default_prior(basis));
  if (prior_mean) {
    require(prior_mean->size() == c.posterior.mu.size(), ErrorKind::DimensionMismatch,
            "make_channel: prior mean size");
    c.posterior.mu = *prior_mean;
  }
  c.noise_var = basis.kernel.noise_var();
  c.target = target;
  return c;
}

/// x -> nominal(x, u) + sum_c e_target(c) * phi_c(z(x, u))' mu_c (mean only).
inline DynamicsFn adaptive_dynamics(DynamicsFn nominal, const ResidualModel& residual,
                                    std::function<VectorXd(const VectorXd&, const VectorXd&)> feature_input,
                                    int state_dim) {
  for (const auto& c : residual.channels) {
    require(c.target >= 0 && c.target < state_dim, ErrorKind::DimensionMismatch,
            "adaptive_dynamics: residual target outside the state");
    require(c.posterior.mu.size() == c.basis.size(), ErrorKind::DimensionMismatch,
            "adaptive_dynamics: posterior size != basis size");
  }
  return [nominal = std::move(nominal), residual, feature_input = std::move(feature_input)](
             const VectorXd& x, const VectorXd& u, int k) {
    VectorXd next = nominal(x, u, k);
    if (residual.channels.empty()) return next;
    const VectorXd z = feature_input(x, u);
    for (const auto& c : residual.channels) next(c.target) += c.mean(z);
    return next;
  };
}

enum class AdapterKind { None, Recursive, SgdMean };

struct AdapterConfig {
  AdapterKind kind = AdapterKind::Recursive;
  double eta = 0.0005;
  blr::SgdMode sgd_mode = blr::SgdMode::Shrink;
};

inline void adapt(ResidualChannel& c, const VectorXd& z, double y, const AdapterConfig& cfg) {
  if (cfg.kind == AdapterKind::None) return;
  const VectorXd phi = features::features(c.basis, z);
  if (cfg.kind == AdapterKind::Recursive)
    c.posterior = blr::blr_update_recursive(c.posterior, phi, y, c.noise_var);
  else
    c.posterior.mu = blr::sgd_mean_update(c.posterior.mu, phi, y, cfg.eta, c.noise_var, cfg.sgd_mode);
}

// ---- closed loop

struct Observation {
  int channel = 0;
  VectorXd z;
  double y = 0.0;
  double truth = std::numeric_limits<double>::quiet_NaN();  // noise-free residual, when known
};

struct StepOutcome {
  std::vector<Observation> observations;
  bool done = false;
  bool aborted = false;
  std::string reason;
};

struct ControlResult {
  VectorXd u;
  double cost = 0.0;
  int iterations = 0;
};

struct LogRow {
  int t = 0;
  VectorXd state;
  VectorXd input;
  VectorXd y;          // per channel, NaN when the channel had no observation
  VectorXd z;          // per channel scalar feature input (first component)
  VectorXd pred_mean;  // residual prediction before the update
  VectorXd pred_var;   // epistemic variance phi' Sigma phi before the update
  VectorXd truth;
  double cost = 0.0;
  int iterations = 0;
};

struct Checkpoint {
  int t = 0;
  std::vector<VectorXd> mu;
};

struct TrajectoryLog {
  std::vector<std::string> state_names;
  std::vector<std::string> input_names;
  std::vector<std::string> channel_names;
  std::vector<LogRow> rows;
  std::vector<Checkpoint> checkpoints;
  bool completed = false;
  bool aborted = false;
  std::string abort_reason;
  nlohmann::json meta = nlohmann::json::object();

  std::size_t size() const { return rows.size(); }

  /// t, state..., input..., y..., cost, iters
  void write_csv(const std::filesystem::path& path) const {
    std::vector<std::string> header{"t"};
    header.insert(header.end(), state_names.begin(), state_names.end());
    header.insert(header.end(), input_names.begin(), input_names.end());
    for (const auto& c : channel_names) header.push_back("y_" + c);
    header.push_back("cost");
    header.push_back("iters");
    io::CsvWriter w(path, header);
    for (const auto& r : rows) {
      std::vector<double> v{static_cast<double>(r.t)};
      v.insert(v.end(), r.state.data(), r.state.data() + r.state.size());
      v.insert(v.end(), r.input.data(), r.input.data() + r.input.size());
      v.insert(v.end(), r.y.data(), r.y.data() + r.y.size());
      v.push_back(r.cost);
      v.push_back(static_cast<double>(r.iterations));
      w.row(v);
    }
  }

  /// Residual predictions made before each update: t, then z, y, truth, mean, var per channel.
  void write_prediction_csv(const std::filesystem::path& path) const {
    std::vector<std::string> header{"t"};
    for (const auto& c : channel_names)
      for (const char* f : {"z_", "y_", "truth_", "pred_mean_", "pred_var_"}) header.push_back(f + c);
    io::CsvWriter w(path, header);
    for (const auto& r : rows) {
      std::vector<double> v{static_cast<double>(r.t)};
      for (Eigen::Index c = 0; c < r.y.size(); ++c)
        for (double x : {r.z(c), r.y(c), r.truth(c), r.pred_mean(c), r.pred_var(c)}) v.push_back(x);
      w.row(v);
    }
  }

  nlohmann::json sidecar() const {
    nlohmann::json j = meta;
    j["steps"] = rows.size();
    j["completed"] = completed;
    j["aborted"] = aborted;
    j["abort_reason"] = abort_reason;
    nlohmann::json cps = nlohmann::json::array();
    for (const auto& cp : checkpoints) {
      nlohmann::json c;
      c["t"] = cp.t;
      nlohmann::json mus = nlohmann::json::array();
      for (const auto& mu : cp.mu) mus.push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
      c["mu"] = mus;
      cps.push_back(c);
    }
    j["mu_checkpoints"] = cps;
    return j;
  }

  void write(const std::filesystem::path& csv_path) const {
    write_csv(csv_path);
    auto json_path = csv_path;
    json_path.replace_extension(".json");
    io::write_text(json_path, sidecar().dump(2) + "\n");
  }
};

struct ClosedLoopOptions {
  int steps = 60;
  int checkpoint_every = 10;
};

/// Plant: state_vector(), state_names(), input_names(), channel_names(), step(u, rng) -> StepOutcome.
/// An empty residual model logs observations without predicting or adapting.
/// Controller: control(plant, residual) -> ControlResult (first input of its plan).
template <class Plant, class Controller>
TrajectoryLog run_closed_loop(Plant& plant, Controller& controller, ResidualModel& residual,
                              const AdapterConfig& adapter, const ClosedLoopOptions& opt, Rng& rng) {
  require(opt.steps >= 1, ErrorKind::InvalidArgument, "run_closed_loop: steps < 1");
  TrajectoryLog log;
  log.state_names = plant.state_names();
  log.input_names = plant.input_names();
  log.channel_names = plant.channel_names();
  const auto nc = static_cast<Eigen::Index>(log.channel_names.size());
  require(residual.size() == 0 || residual.size() == nc, ErrorKind::DimensionMismatch,
          "run_closed_loop: residual channels != plant observation channels");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  log.checkpoints.push_back({0, residual.means()});
  for (int t = 0; t < opt.steps; ++t) {
    LogRow row;
    row.t = t;
    row.state = plant.state_vector();
    const ControlResult ctrl = controller.control(plant, residual);
    row.input = ctrl.u;
    row.cost = ctrl.cost;
    row.iterations = ctrl.iterations;
    const StepOutcome out = plant.step(ctrl.u, rng);
    row.y = row.z = row.pred_mean = row.pred_var = row.truth = VectorXd::Constant(nc, nan);
    for (const auto& ob : out.observations) {
      require(ob.channel >= 0 && ob.channel < nc, ErrorKind::DimensionMismatch,
              "run_closed_loop: observation channel out of range");
      row.y(ob.channel) = ob.y;
      row.z(ob.channel) = ob.z(0);
      row.truth(ob.channel) = ob.truth;
      if (residual.size() == 0) continue;
      ResidualChannel& ch = residual.channels[static_cast<std::size_t>(ob.channel)];
      const VectorXd phi = features::features(ch.basis, ob.z);
      row.pred_mean(ob.channel) = phi.dot(ch.posterior.mu);
      row.pred_var(ob.channel) = std::max(0.0, phi.dot(ch.posterior.sigma * phi));
      adapt(ch, ob.z, ob.y, adapter);
    }
    log.rows.push_back(std::move(row));
    if (opt.checkpoint_every > 0 && (t + 1) % opt.checkpoint_every == 0)
      log.checkpoints.push_back({t + 1, residual.means()});
    if (out.aborted) {
      log.aborted = true;
      log.abort_reason = out.reason;
      break;
    }
    if (out.done) {
      log.completed = true;
      break;
    }
  }
  return log;
}

inline std::vector<VectorXd> shift_warm_start(const std::vector<VectorXd>& prev) {
  if (prev.empty()) return prev;
  std::vector<VectorXd> out(prev.begin() + 1, prev.end());
  out.push_back(prev.back());
  return out;
}

// ---- mountain car

struct MountainCarMpcConfig {
  int horizon = 25;
  double input_weight = 0.1;
  double goal = 0.6;
  double goal_margin = 0.1;  // the cost targets goal + margin so model errors near the goal are tolerated
  double u_max = 1.0;
  bool multistart = true;
  SolverOptions solver;
};

class MountainCarPlant {
 public:
  MountainCarPlant(envs::MountainCarParams prm, Eigen::Vector2d x0, double goal = 0.6)
      : prm_(prm), x_(x0), goal_(goal) {
    prm_.validate();
  }

  VectorXd state_vector() const { return x_; }
  std::vector<std::string> state_names() const { return {"p", "v"}; }
  std::vector<std::string> input_names() const { return {"u"}; }
  std::vector<std::string> channel_names() const { return {"v"}; }
  const envs::MountainCarParams& params() const { return prm_; }

  StepOutcome step(const VectorXd& u, Rng& rng) {
    const double w = prm_.process_noise_std * standard_normal(rng);
    const Eigen::Vector2d next = envs::mountain_car_step(x_, u(0), prm_, w);
    StepOutcome out;
    Observation ob;
    ob.channel = 0;
    ob.z = VectorXd::Constant(1, x_(0));
    ob.y = next(1) - envs::mountain_car_nominal(x_, u(0), prm_)(1);
    ob.truth = envs::mountain_car_residual(x_(0), prm_.theta1, prm_.T_s);
    out.observations.push_back(ob);
    x_ = next;
    out.done = x_(0) >= goal_;
    if (!x_.allFinite()) {
      out.aborted = true;
      out.reason = "non-finite state";
    }
    return out;
  }

 private:
  envs::MountainCarParams prm_;
  Eigen::Vector2d x_;
  double goal_;
};

/// MPC on the nominal model plus the residual mean added to the velocity.
/// Multi-start: bang-bang sequences and the shifted previous plan are rolled
/// out and the cheapest seeds the solver.
class MountainCarMpc {
 public:
  MountainCarMpc(envs::MountainCarParams prm, MountainCarMpcConfig cfg) : prm_(prm), cfg_(cfg) {
    require(cfg_.horizon >= 1 && cfg_.input_weight >= 0.0, ErrorKind::InvalidArgument,
            "MountainCarMpc: bad config");
  }

  Ocp problem(const ResidualModel& residual) const {
    Ocp ocp = Ocp::unbounded(2, 1, cfg_.horizon);
    ocp.u_lower = VectorXd::Constant(1, -cfg_.u_max);
    ocp.u_upper = VectorXd::Constant(1, cfg_.u_max);
    const envs::MountainCarParams prm = prm_;
    ocp.dynamics = adaptive_dynamics(
        [prm](const VectorXd& x, const VectorXd& u, int) -> VectorXd {
          return envs::mountain_car_nominal(Eigen::Vector2d(x(0), x(1)), u(0), prm);
        },
        residual, [](const VectorXd& x, const VectorXd&) { return VectorXd::Constant(1, x(0)); }, 2);
    const int n = cfg_.horizon;
    const double wu = std::sqrt(2.0 * cfg_.input_weight), goal = cfg_.goal + cfg_.goal_margin;
    ocp.stage_residual = [n, wu, goal](const VectorXd& x, const VectorXd& u, int k) {
      VectorXd r(2);
      r(0) = wu * u(0);
      r(1) = 2 * k >= n ? std::sqrt(2.0) * std::min(0.0, x(0) - goal) : 0.0;
      return r;
    };
    ocp.terminal_residual = [goal](const VectorXd& x) { return VectorXd::Constant(1, std::sqrt(2.0) * std::min(0.0, x(0) - goal)); };
    return ocp;
  }

  OcpSolution plan(const VectorXd& x, const ResidualModel& residual) {
    const Ocp ocp = problem(residual);
    std::vector<std::vector<VectorXd>> seeds;
    if (!warm_.empty()) seeds.push_back(shift_warm_start(warm_));
    if (cfg_.multistart || warm_.empty()) {
      for (int j = 0; j <= cfg_.horizon; j += 2)
        for (double first : {-cfg_.u_max, cfg_.u_max}) {
          std::vector<VectorXd> s(static_cast<std::size_t>(cfg_.horizon));
          for (int k = 0; k < cfg_.horizon; ++k) s[static_cast<std::size_t>(k)] = VectorXd::Constant(1, k < j ? first : -first);
          seeds.push_back(std::move(s));
        }
    }
    std::size_t best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    std::vector<VectorXd> states;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const double c = rollout(ocp, x, seeds[i], states);
      if (c < best_cost) {
        best_cost = c;
        best = i;
      }
    }
    OcpSolution sol = solve_ocp(ocp, x, seeds[best], cfg_.solver);
    warm_ = sol.inputs;
    return sol;
  }

  ControlResult control(const MountainCarPlant& plant, const ResidualModel& residual) {
    const OcpSolution sol = plan(plant.state_vector(), residual);
    return {sol.inputs.front(), sol.cost, sol.iterations};
  }

  void reset() { warm_.clear(); }
  const std::vector<VectorXd>& last_plan() const { return warm_; }

 private:
  envs::MountainCarParams prm_;
  MountainCarMpcConfig cfg_;
  std::vector<VectorXd> warm_;
};

/// Cosine residual channel whose mean reproduces the true slope term exactly.
inline ResidualModel exact_mountain_car_residual(const envs::MountainCarParams& prm) {
  features::BasisSet b = features::BasisSet::parametric_cosine(
      prm.T_s, 3.0, features::KernelHyper::make(VectorXd::Ones(1), 1.0, std::max(1e-12, prm.process_noise_std * prm.process_noise_std)));
  ResidualChannel c = make_channel("v", b, 1, VectorXd::Constant(1, prm.theta1));
  c.posterior.sigma.setZero();
  return {{c}};
}

// ---- contouring control for the car

struct MpccConfig {
  int horizon = 20;
  double q_contour = 1.0;
  double q_lag = 100.0;
  double gamma = 0.5;
  double r_throttle = 0.01;
  double r_steer = 0.5;
  double bound_weight = 1000.0;
  double bound_margin = 0.04;
  double slip_weight = 100.0;  // soft limit on |slip angle| beyond slip_max
  double slip_max = 0.3;
  int model_substeps = 2;
  SolverOptions solver;

  void validate() const {
    require(horizon >= 1 && q_contour >= 0 && q_lag >= 0 && gamma > 0 && r_throttle >= 0 && r_steer >= 0 &&
                bound_weight >= 0 && slip_weight >= 0 && slip_max > 0 && model_substeps >= 1,
            ErrorKind::InvalidArgument, "MpccConfig: weights must be >= 0, gamma > 0");
  }
};

using ForceModel = std::function<std::array<double, 2>(const envs::SlipAngles&)>;

/// Controller state: [X, Y, psi, v_x, v_y, omega, s, d_prev, delta_prev].
constexpr int kMpccStateDim = 9;
enum MpccIndex { kS = 6, kDPrev = 7, kDeltaPrev = 8 };

struct ContourErrors {
  double contour = 0.0;  // signed, positive left of the reference point
  double lag = 0.0;
  double progress_rate = 0.0;
};

inline ContourErrors contour_errors(const VectorXd& x, const envs::Track& track) {
  const double s = x(kS);
  const Eigen::Vector2d c = track.position(s), t = track.tangent(s);
  const Eigen::Vector2d d(x(envs::kX) - c(0), x(envs::kY) - c(1));
  ContourErrors e;
  e.contour = t(0) * d(1) - t(1) * d(0);
  e.lag = t.dot(d);
  const double psi = x(envs::kPsi), vx = x(envs::kVx), vy = x(envs::kVy);
  const Eigen::Vector2d v(vx * std::cos(psi) - vy * std::sin(psi), vx * std::sin(psi) + vy * std::cos(psi));
  e.progress_rate = v.dot(t) / std::max(1.0 - track.curvature(s) * e.contour, 0.2);
  return e;
}

struct MpccCostTerms {
  double contour = 0.0;
  double lag = 0.0;
  double progress = 0.0;  // -gamma * T_s * s_dot
  double input_rate = 0.0;
  double bound = 0.0;
  double slip = 0.0;

  double total() const { return contour + lag + progress + input_rate + bound + slip; }
};

/// Slip-angle excess over cfg.slip_max, front and rear.
inline std::array<double, 2> slip_excess(const VectorXd& x, double delta, const MpccConfig& cfg,
                                         const envs::CarParams& car) {
  const envs::SlipAngles a = envs::slip_angles(x, delta, car);
  return {std::max(0.0, std::abs(a.front) - cfg.slip_max), std::max(0.0, std::abs(a.rear) - cfg.slip_max)};
}

inline MpccCostTerms mpcc_stage_cost(const VectorXd& x, const VectorXd& u, const MpccConfig& cfg,
                                     const envs::Track& track, double T_s, const envs::CarParams& car = {}) {
  const ContourErrors e = contour_errors(x, track);
  MpccCostTerms c;
  c.contour = cfg.q_contour * e.contour * e.contour;
  c.lag = cfg.q_lag * e.lag * e.lag;
  c.progress = -cfg.gamma * T_s * e.progress_rate;
  const double dd = u(0) - x(kDPrev), ds = u(1) - x(kDeltaPrev);
  c.input_rate = cfg.r_throttle * dd * dd + cfg.r_steer * ds * ds;
  const double excess = std::max(0.0, std::abs(e.contour) - (track.half_width() - cfg.bound_margin));
  c.bound = cfg.bound_weight * excess * excess;
  const auto slip = slip_excess(x, u(1), cfg, car);
  c.slip = cfg.slip_weight * (slip[0] * slip[0] + slip[1] * slip[1]);
  return c;
}

struct CarPlantConfig {
  double noise_std_vy = 0.002;
  double noise_std_omega = 0.02;
  double obs_noise_std = 0.02;
  double laps = 1.0;
  double v0 = 1.0;
};

/// Piecewise grip schedule over the track: factor `second_half_grip` applies
/// when the wrapped arclength fraction is >= split.
struct GripSchedule {
  double split = 0.5;
  double second_half_grip = 1.0;

  double factor(double s_wrapped, double length) const {
    return s_wrapped / length >= split ? second_half_grip : 1.0;
  }
};

/// True car on a track; observes normalized lateral forces at the current
/// slip angles (channel 0 front, 1 rear) before each step.
class CarPlant {
 public:
  CarPlant(const envs::Track& track, envs::CarParams car, envs::PacejkaParams tires, CarPlantConfig cfg,
           envs::PacejkaParams normalizer, GripSchedule grip = {})
      : track_(&track), car_(car), tires_(tires), cfg_(cfg), norm_(normalizer), grip_(grip) {
    car_.validate();
    tires_.validate();
    x_.setZero();
    const Eigen::Vector2d p0 = track.position(0.0);
    x_(envs::kX) = p0(0);
    x_(envs::kY) = p0(1);
    x_(envs::kPsi) = track.heading(0.0);
    x_(envs::kVx) = cfg_.v0;
    s_ = 0.0;
    e_lat_ = 0.0;
  }

  VectorXd state_vector() const {
    VectorXd v(8);
    v << x_, s_, e_lat_;
    return v;
  }
  std::vector<std::string> state_names() const { return {"X", "Y", "psi", "vx", "vy", "omega", "s", "e_lat"}; }
  std::vector<std::string> input_names() const { return {"d", "delta"}; }
  std::vector<std::string> channel_names() const { return {"front", "rear"}; }
  const envs::CarState& car_state() const { return x_; }
  double progress() const { return s_; }
  const Eigen::Vector2d& previous_input() const { return u_prev_; }
  const envs::Track& track() const { return *track_; }
  const envs::CarParams& car() const { return car_; }

  envs::PacejkaParams tires_here() const {
    return tires_.scaled_grip(grip_.factor(track_->wrap(s_), track_->length()));
  }

  StepOutcome step(const VectorXd& u, Rng& rng) {
    const Eigen::Vector2d uu(std::clamp(u(0), -car_.throttle_max, car_.throttle_max),
                             std::clamp(u(1), -car_.steer_max, car_.steer_max));
    const envs::PacejkaParams tires = tires_here();
    const envs::SlipAngles slip = envs::slip_angles(x_, uu(1), car_);
    StepOutcome out;
    const double ff = envs::pacejka_force(slip.front, tires.B_f, tires.C_f, tires.D_f) / norm_.D_f;
    const double fr = envs::pacejka_force(slip.rear, tires.B_r, tires.C_r, tires.D_r) / norm_.D_r;
    out.observations.push_back({0, VectorXd::Constant(1, slip.front), ff + cfg_.obs_noise_std * standard_normal(rng), ff});
    out.observations.push_back({1, VectorXd::Constant(1, slip.rear), fr + cfg_.obs_noise_std * standard_normal(rng), fr});
    const Eigen::Vector2d w(cfg_.noise_std_vy * standard_normal(rng), cfg_.noise_std_omega * standard_normal(rng));
    x_ = envs::car_step(x_, uu, car_, tires, w);
    u_prev_ = uu;
    const envs::Projection pr = track_->project(x_.head<2>(), s_);
    s_ += std::remainder(pr.s - track_->wrap(s_), track_->length());
    e_lat_ = pr.e_lat;
    if (!x_.allFinite()) {
      out.aborted = true;
      out.reason = "non-finite state";
    } else if (std::abs(e_lat_) > 2.0 * track_->half_width()) {
      out.aborted = true;
      out.reason = "left the track";
    }
    out.done = s_ >= cfg_.laps * track_->length();
    return out;
  }

 private:
  const envs::Track* track_;
  envs::CarParams car_;
  envs::PacejkaParams tires_;
  CarPlantConfig cfg_;
  envs::PacejkaParams norm_;
  GripSchedule grip_;
  envs::CarState x_;
  double s_ = 0.0;
  double e_lat_ = 0.0;
  Eigen::Vector2d u_prev_ = Eigen::Vector2d::Zero();
};

/// Cubic Hermite table of a smooth scalar function on [lo, hi]; clamped outside.
class HermiteTable {
 public:
  template <class F>
  HermiteTable(F&& f, double lo, double hi, int intervals) : lo_(lo), h_((hi - lo) / intervals) {
    require(hi > lo && intervals >= 1, ErrorKind::InvalidArgument, "HermiteTable: bad range");
    const double d = 1e-3 * h_;
    v_.resize(static_cast<std::size_t>(intervals) + 1);
    dv_.resize(v_.size());
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const double x = lo + static_cast<double>(i) * h_;
      v_[i] = f(x);
      dv_[i] = (f(x + d) - f(x - d)) / (2.0 * d);
    }
  }

  double operator()(double x) const {
    const double u = (x - lo_) / h_;
    const auto last = static_cast<double>(v_.size() - 1);
    if (u <= 0.0) return v_.front();
    if (u >= last) return v_.back();
    const auto i = static_cast<std::size_t>(u);
    const double t = u - static_cast<double>(i), t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * v_[i] + (t3 - 2 * t2 + t) * h_ * dv_[i] + (-2 * t3 + 3 * t2) * v_[i + 1] +
           (t3 - t2) * h_ * dv_[i + 1];
  }

 private:
  double lo_, h_;
  std::vector<double> v_, dv_;
};

/// Learned lateral forces F_i = -D_norm_i * phi(s_i)' mu_i (channel 0 front,
/// 1 rear), tabulated over slip angles in [-1.5, 1.5] rad.
inline ForceModel learned_forces(const ResidualModel& residual, const envs::PacejkaParams& normalizer) {
  require(residual.size() == 2, ErrorKind::DimensionMismatch, "learned_forces: need front and rear channels");
  auto table = [&](const ResidualChannel& c) {
    return HermiteTable([&c](double s) { return c.mean(VectorXd::Constant(1, s)); }, -1.5, 1.5, 1200);
  };
  const HermiteTable front = table(residual.channels[0]), rear = table(residual.channels[1]);
  const double df = normalizer.D_f, dr = normalizer.D_r;
  return [front, rear, df, dr](const envs::SlipAngles& s) -> std::array<double, 2> {
    return {-df * front(s.front), -dr * rear(s.rear)};
  };
}

inline ForceModel pacejka_model(const envs::PacejkaParams& tires) {
  return [tires](const envs::SlipAngles& s) { return envs::PacejkaForces{tires}(s); };
}

/// Model predictive contouring controller. The force model is either fixed
/// (ground truth) or rebuilt from the residual model at every solve.
class MpccController {
 public:
  MpccController(const envs::Track& track, envs::CarParams car, MpccConfig cfg, envs::PacejkaParams normalizer,
                 std::optional<envs::PacejkaParams> fixed_tires = std::nullopt)
      : track_(&track), car_(car), cfg_(cfg), norm_(normalizer), fixed_(fixed_tires) {
    cfg_.validate();
    car_.substeps = cfg_.model_substeps;
  }

  Ocp problem(ForceModel forces) const {
    Ocp ocp = Ocp::unbounded(kMpccStateDim, 2, cfg_.horizon);
    ocp.u_lower = Eigen::Vector2d(-car_.throttle_max, -car_.steer_max);
    ocp.u_upper = Eigen::Vector2d(car_.throttle_max, car_.steer_max);
    const envs::CarParams car = car_;
    const envs::Track* track = track_;
    ocp.dynamics = [car, track, forces](const VectorXd& x, const VectorXd& u, int) {
      VectorXd next(kMpccStateDim);
      const envs::CarState cs = x.head<6>();
      next.head<6>() = envs::car_step_with(cs, Eigen::Vector2d(u(0), u(1)), car, forces);
      next(kS) = x(kS) + car.T_s * contour_errors(x, *track).progress_rate;
      next(kDPrev) = u(0);
      next(kDeltaPrev) = u(1);
      return next;
    };
    const MpccConfig cfg = cfg_;
    const double ts = car_.T_s;
    ocp.stage_residual = [cfg, track, car](const VectorXd& x, const VectorXd& u, int) {
      const ContourErrors e = contour_errors(x, *track);
      const auto slip = slip_excess(x, u(1), cfg, car);
      VectorXd r(7);
      r(0) = std::sqrt(2.0 * cfg.q_contour) * e.contour;
      r(1) = std::sqrt(2.0 * cfg.q_lag) * e.lag;
      r(2) = std::sqrt(2.0 * cfg.r_throttle) * (u(0) - x(kDPrev));
      r(3) = std::sqrt(2.0 * cfg.r_steer) * (u(1) - x(kDeltaPrev));
      r(4) = std::sqrt(2.0 * cfg.bound_weight) *
             std::max(0.0, std::abs(e.contour) - (track->half_width() - cfg.bound_margin));
      r(5) = std::sqrt(2.0 * cfg.slip_weight) * slip[0];
      r(6) = std::sqrt(2.0 * cfg.slip_weight) * slip[1];
      return r;
    };
    ocp.stage_linear = [cfg, track, ts](const VectorXd& x, const VectorXd&, int) {
      return -cfg.gamma * ts * contour_errors(x, *track).progress_rate;
    };
    ocp.terminal_residual = [cfg, track](const VectorXd& x) {
      const ContourErrors e = contour_errors(x, *track);
      VectorXd r(3);
      r(0) = std::sqrt(2.0 * cfg.q_contour) * e.contour;
      r(1) = std::sqrt(2.0 * cfg.q_lag) * e.lag;
      r(2) = std::sqrt(2.0 * cfg.bound_weight) *
             std::max(0.0, std::abs(e.contour) - (track->half_width() - cfg.bound_margin));
      return r;
    };
    return ocp;
  }

  ControlResult control(const CarPlant& plant, const ResidualModel& residual) {
    const ForceModel forces = fixed_ ? pacejka_model(*fixed_) : learned_forces(residual, norm_);
    VectorXd x0(kMpccStateDim);
    x0 << plant.car_state(), plant.progress(), plant.previous_input();
    std::vector<VectorXd> warm = shift_warm_start(warm_);
    if (warm.empty()) warm.assign(static_cast<std::size_t>(cfg_.horizon), Eigen::Vector2d(0.3, 0.0));
    const OcpSolution sol = solve_ocp(problem(forces), x0, warm, cfg_.solver);
    warm_ = sol.inputs;
    return {sol.inputs.front(), sol.cost, sol.iterations};
  }

  void reset() { warm_.clear(); }
  const std::vector<VectorXd>& last_plan() const { return warm_; }

 private:
  const envs::Track* track_;
  envs::CarParams car_;
  MpccConfig cfg_;
  envs::PacejkaParams norm_;
  std::optional<envs::PacejkaParams> fixed_;
  std::vector<VectorXd> warm_;
};

}  // namespace mlmpc::mpc
