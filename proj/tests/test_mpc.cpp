#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "mlmpc/meta.hpp"
#include "mlmpc/mpc.hpp"
#include "test_util.hpp"

using namespace mlmpc;
using namespace mlmpc::mpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using mlmpc::testing::random_matrix;
using mlmpc::testing::random_spd;
using mlmpc::testing::random_vector;

namespace {

struct Lqr {
  MatrixXd a, b, q, r;
};

Lqr random_lqr(Rng& rng, int n, int m) {
  Lqr l;
  l.a = random_matrix(rng, n, n);
  l.a /= std::max(1.0, 1.1 * l.a.eigenvalues().cwiseAbs().maxCoeff());
  l.b = random_matrix(rng, n, m);
  l.q = random_spd(rng, n, 0.1);
  l.r = random_spd(rng, m, 0.1);
  return l;
}

Ocp lqr_problem(const Lqr& l, int horizon, bool residual_form) {
  Ocp ocp = Ocp::unbounded(static_cast<int>(l.a.rows()), static_cast<int>(l.b.cols()), horizon);
  ocp.dynamics = [l](const VectorXd& x, const VectorXd& u, int) -> VectorXd { return l.a * x + l.b * u; };
  if (residual_form) {
    const MatrixXd lq = Eigen::LLT<MatrixXd>(l.q).matrixU(), lr = Eigen::LLT<MatrixXd>(l.r).matrixU();
    ocp.stage_residual = [lq, lr](const VectorXd& x, const VectorXd& u, int) {
      VectorXd r(lq.rows() + lr.rows());
      r << std::sqrt(2.0) * lq * x, std::sqrt(2.0) * lr * u;
      return r;
    };
    ocp.terminal_residual = [lq](const VectorXd& x) -> VectorXd { return std::sqrt(2.0) * lq * x; };
  } else {
    ocp.stage_cost = [l](const VectorXd& x, const VectorXd& u, int) { return x.dot(l.q * x) + u.dot(l.r * u); };
    ocp.terminal_cost = [l](const VectorXd& x) { return x.dot(l.q * x); };
  }
  return ocp;
}

envs::MountainCarParams mc_params(double theta1, double noise = 0.001) {
  envs::MountainCarParams p;
  p.theta1 = theta1;
  p.process_noise_std = noise;
  return p;
}

ResidualModel cosine_residual(double prior_mean, double noise_std) {
  const auto basis = features::BasisSet::parametric_cosine(
      0.2, 3.0, features::KernelHyper::make(VectorXd::Ones(1), 1.0, noise_std * noise_std));
  return {{make_channel("v", basis, 1, VectorXd::Constant(1, prior_mean))}};
}

bool same_bytes(const VectorXd& a, const VectorXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool identical(const TrajectoryLog& a, const TrajectoryLog& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &ra = a.rows[i], &rb = b.rows[i];
    if (!same_bytes(ra.state, rb.state) || !same_bytes(ra.input, rb.input) || ra.cost != rb.cost ||
        ra.iterations != rb.iterations)
      return false;
  }
  return true;
}

const envs::Track& default_track() {
  static const envs::Track t = envs::Track::load_csv(envs::default_track_path(), 0.2, true);
  return t;
}

}  // namespace

TEST(SolveOcp, MatchesRiccatiFirstInput) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Lqr l = random_lqr(rng, 4, 2);
    const VectorXd x0 = random_vector(rng, 4);
    const VectorXd expected = -riccati_first_gain(l.a, l.b, l.q, l.r, l.q, 20) * x0;
    for (bool residual_form : {true, false}) {
      const OcpSolution sol = solve_ocp(lqr_problem(l, 20, residual_form), x0);
      EXPECT_LE((sol.inputs[0] - expected).norm(), 1e-4 * expected.norm()) << "trial " << trial;
    }
  }
}

TEST(SolveOcp, SingleStepInputCostGivesZero) {
  Ocp ocp = Ocp::unbounded(1, 1, 1);
  ocp.dynamics = [](const VectorXd& x, const VectorXd&, int) { return x; };
  ocp.stage_cost = [](const VectorXd&, const VectorXd& u, int) { return u.squaredNorm(); };
  const OcpSolution sol = solve_ocp(ocp, VectorXd::Ones(1), {VectorXd::Constant(1, 0.7)});
  EXPECT_NEAR(sol.inputs[0](0), 0.0, 1e-8);
}

TEST(SolveOcp, WarmStartFromOptimumNeverWorsens) {
  Rng rng(4);
  const Lqr l = random_lqr(rng, 3, 1);
  const Ocp ocp = lqr_problem(l, 10, true);
  const VectorXd x0 = random_vector(rng, 3);
  const OcpSolution first = solve_ocp(ocp, x0);
  const OcpSolution again = solve_ocp(ocp, x0, first.inputs);
  EXPECT_LE(again.cost, first.cost);
}

TEST(SolveOcp, NeverWorseThanWarmStartProperty) {
  Rng rng(19);
  const envs::MountainCarParams prm = mc_params(0.9);
  MountainCarMpc mpc(prm, {});
  const Ocp ocp = mpc.problem(cosine_residual(0.9, 0.001));
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd x0 = Eigen::Vector2d(uniform(rng, -1.0, 0.5), uniform(rng, -0.5, 0.5));
    std::vector<VectorXd> warm(25);
    for (auto& u : warm) u = VectorXd::Constant(1, uniform(rng, -1.0, 1.0));
    std::vector<VectorXd> states;
    const double warm_cost = rollout(ocp, x0, warm, states);
    const OcpSolution sol = solve_ocp(ocp, x0, warm);
    EXPECT_LE(sol.cost, warm_cost);
    for (const auto& u : sol.inputs) EXPECT_LE(std::abs(u(0)), 1.0);
  }
}

TEST(SolveOcp, BoxBoundsRespectedAndActive) {
  Ocp ocp = Ocp::unbounded(1, 1, 5);
  ocp.u_lower = VectorXd::Constant(1, -0.1);
  ocp.u_upper = VectorXd::Constant(1, 0.1);
  ocp.dynamics = [](const VectorXd& x, const VectorXd& u, int) -> VectorXd { return x + u; };
  ocp.stage_residual = [](const VectorXd& x, const VectorXd& u, int) {
    return Eigen::Vector2d(x(0) - 5.0, 0.1 * u(0)).eval();
  };
  ocp.terminal_residual = [](const VectorXd& x) { return (x.array() - 5.0).matrix().eval(); };
  const OcpSolution sol = solve_ocp(ocp, VectorXd::Zero(1));
  for (const auto& u : sol.inputs) EXPECT_NEAR(u(0), 0.1, 1e-12);
}

TEST(SolveOcp, ShapeAndFiniteChecks) {
  Ocp ocp = Ocp::unbounded(1, 1, 3);
  ocp.dynamics = [](const VectorXd& x, const VectorXd&, int) { return x; };
  EXPECT_THROW(solve_ocp(ocp, VectorXd::Zero(2)), Error);
  EXPECT_THROW(solve_ocp(ocp, VectorXd::Zero(1), {VectorXd::Zero(1)}), Error);
  EXPECT_THROW(solve_ocp(ocp, VectorXd::Constant(1, std::nan(""))), Error);
  ocp.stage_cost = [](const VectorXd&, const VectorXd&, int) { return std::numeric_limits<double>::infinity(); };
  try {
    solve_ocp(ocp, VectorXd::Zero(1));
    FAIL() << "expected SolveFailed";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SolveFailed);
  }
}

TEST(SolveOcp, SoftPenaltyPushesStateBelowLimit) {
  Ocp ocp = Ocp::unbounded(1, 1, 10);
  ocp.dynamics = [](const VectorXd& x, const VectorXd& u, int) -> VectorXd { return x + u; };
  ocp.stage_residual = [](const VectorXd& x, const VectorXd& u, int) {
    return Eigen::Vector2d(x(0) - 2.0, 0.1 * u(0)).eval();
  };
  const OcpSolution free_sol = solve_ocp(ocp, VectorXd::Zero(1));
  ocp.soft.push_back({[](const VectorXd& x, const VectorXd&, int) { return x(0) - 1.0; }, 1e3});
  const OcpSolution soft_sol = solve_ocp(ocp, VectorXd::Zero(1));
  EXPECT_GT(free_sol.states.back()(0), 1.5);
  EXPECT_LT(soft_sol.states.back()(0), 1.01);
}

TEST(AdaptiveDynamics, ZeroMeanIsNominal) {
  Rng rng(2);
  const envs::MountainCarParams prm = mc_params(0.9);
  ResidualModel res = cosine_residual(0.0, 0.001);
  const DynamicsFn nominal = [prm](const VectorXd& x, const VectorXd& u, int) -> VectorXd {
    return envs::mountain_car_nominal(Eigen::Vector2d(x(0), x(1)), u(0), prm);
  };
  const DynamicsFn f =
      adaptive_dynamics(nominal, res, [](const VectorXd& x, const VectorXd&) { return x.head(1); }, 2);
  for (int i = 0; i < 1000; ++i) {
    const VectorXd x = Eigen::Vector2d(uniform(rng, -1.2, 0.6), uniform(rng, -1, 1));
    const VectorXd u = VectorXd::Constant(1, uniform(rng, -1, 1));
    EXPECT_TRUE(same_bytes(f(x, u, 0), nominal(x, u, 0)));
  }
}

TEST(AdaptiveDynamics, TrueParameterReproducesPlant) {
  Rng rng(3);
  const envs::MountainCarParams prm = mc_params(1.3, 0.0);
  const DynamicsFn nominal = [prm](const VectorXd& x, const VectorXd& u, int) -> VectorXd {
    return envs::mountain_car_nominal(Eigen::Vector2d(x(0), x(1)), u(0), prm);
  };
  const DynamicsFn f = adaptive_dynamics(nominal, exact_mountain_car_residual(prm),
                                         [](const VectorXd& x, const VectorXd&) { return x.head(1); }, 2);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector2d x(uniform(rng, -1.2, 0.6), uniform(rng, -1, 1));
    const double u = uniform(rng, -1, 1);
    EXPECT_LE((f(x, VectorXd::Constant(1, u), 0) - envs::mountain_car_step(x, u, prm, 0.0)).norm(), 1e-14);
  }
}

TEST(AdaptiveDynamics, RejectsTargetOutsideState) {
  ResidualModel res = cosine_residual(0.0, 0.001);
  res.channels[0].target = 2;
  const DynamicsFn nominal = [](const VectorXd& x, const VectorXd&, int) { return x; };
  EXPECT_THROW(adaptive_dynamics(nominal, res, [](const VectorXd& x, const VectorXd&) { return x.head(1); }, 2),
               Error);
}

TEST(AdaptiveDynamics, FittedTirePosteriorPredictsHeldOutForces) {
  const envs::PacejkaParams tires;
  const double sw = 0.02;
  Rng rng(5);
  const int n = 200;
  MatrixXd x(n, 1);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = uniform(rng, -0.4, 0.4);
    y(i) = envs::pacejka_force(x(i, 0), tires.B_f, tires.C_f, tires.D_f) / tires.D_f + sw * standard_normal(rng);
  }
  MatrixXd z(14, 1);
  for (int i = 0; i < 14; ++i) z(i, 0) = -0.4 + 0.8 * i / 13.0;
  const auto basis = features::BasisSet::subset_of_regressors(
      z, features::KernelHyper::make(VectorXd::Constant(1, 0.1), 1.0, sw * sw));
  const auto post = blr::blr_fit(features::feature_matrix(basis, x), y, sw * sw, features::default_prior(basis));
  ResidualModel res{{make_channel("front", basis, 0), make_channel("rear", basis, 0)}};
  res.channels[0].posterior = post;
  res.channels[1].posterior = post;
  const ForceModel learned = learned_forces(res, tires);
  for (int i = 0; i < 100; ++i) {
    const double s = uniform(rng, -0.35, 0.35);
    const double truth = -envs::pacejka_force(s, tires.B_f, tires.C_f, tires.D_f);
    EXPECT_LE(std::abs(learned({s, 0.0})[0] - truth), 3.0 * sw * tires.D_f) << "slip " << s;
  }
}

TEST(MpccCost, ZeroOnCenterlineWithoutProgress) {
  const envs::Track& track = default_track();
  MpccConfig cfg;
  VectorXd x = VectorXd::Zero(kMpccStateDim);
  const double s = 2.0;
  x(envs::kX) = track.position(s)(0);
  x(envs::kY) = track.position(s)(1);
  x(envs::kPsi) = track.heading(s);
  x(kS) = s;
  const MpccCostTerms c = mpcc_stage_cost(x, Eigen::Vector2d::Zero(), cfg, track, 0.02);
  EXPECT_NEAR(c.total() - c.progress, 0.0, 1e-20);
  EXPECT_EQ(c.progress, 0.0);
}

TEST(MpccCost, ContourTermIsQuadratic) {
  const envs::Track& track = default_track();
  MpccConfig cfg;
  const double s = 5.0;
  const Eigen::Vector2d c = track.position(s), t = track.tangent(s), nrm(-t(1), t(0));
  auto terms = [&](double e) {
    VectorXd x = VectorXd::Zero(kMpccStateDim);
    x.head<2>() = c + e * nrm;
    x(kS) = s;
    return mpcc_stage_cost(x, Eigen::Vector2d::Zero(), cfg, track, 0.02);
  };
  const MpccCostTerms a = terms(0.05), b = terms(0.1);
  EXPECT_NEAR(b.contour, 4.0 * a.contour, 1e-12);
  EXPECT_NEAR(a.lag, 0.0, 1e-12);
  EXPECT_EQ(a.bound, 0.0);
  EXPECT_EQ(b.bound, 0.0);
  EXPECT_GT(terms(0.25).bound, 0.0);
}

TEST(MpccCost, InputRateAndProgressSigns) {
  const envs::Track& track = default_track();
  MpccConfig cfg;
  VectorXd x = VectorXd::Zero(kMpccStateDim);
  x.head<2>() = track.position(0.0);
  x(envs::kPsi) = track.heading(0.0);
  x(envs::kVx) = 2.0;
  x(kDPrev) = 0.5;
  const MpccCostTerms c = mpcc_stage_cost(x, Eigen::Vector2d(0.7, 0.1), cfg, track, 0.02);
  EXPECT_NEAR(c.input_rate, cfg.r_throttle * 0.04 + cfg.r_steer * 0.01, 1e-12);
  EXPECT_LT(c.progress, 0.0);
}

TEST(MpccConfig, RejectsNonPositiveGamma) {
  MpccConfig cfg;
  cfg.gamma = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(MpccCost, SlipTermZeroInsideLimitQuadraticBeyond) {
  const envs::Track& track = default_track();
  MpccConfig cfg;
  VectorXd x = VectorXd::Zero(kMpccStateDim);
  x.head<2>() = track.position(1.0);
  x(envs::kPsi) = track.heading(1.0);
  x(kS) = 1.0;
  x(envs::kVx) = 2.0;
  // With no lateral or yaw velocity the front slip is -delta and the rear slip is zero.
  auto slip = [&](double delta) {
    x(kDeltaPrev) = delta;
    return mpcc_stage_cost(x, Eigen::Vector2d(0.0, delta), cfg, track, 0.02).slip;
  };
  EXPECT_EQ(slip(0.0), 0.0);
  EXPECT_EQ(slip(cfg.slip_max - 0.01), 0.0);
  EXPECT_EQ(slip(-(cfg.slip_max - 0.01)), 0.0);
  const double e = 0.05;
  EXPECT_NEAR(slip(cfg.slip_max + e), cfg.slip_weight * e * e, 1e-12);
  EXPECT_NEAR(slip(-(cfg.slip_max + 2 * e)), cfg.slip_weight * 4 * e * e, 1e-12);

  // Rear slip from lateral velocity alone.
  x(envs::kVy) = 2.0 * std::tan(cfg.slip_max + e);
  const auto ex = slip_excess(x, std::atan2(x(envs::kVy), x(envs::kVx)), cfg, envs::CarParams{});
  EXPECT_NEAR(ex[0], 0.0, 1e-12);
  EXPECT_NEAR(ex[1], e, 1e-12);
}

TEST(MpccConfig, RejectsBadSlipSettings) {
  MpccConfig cfg;
  cfg.slip_max = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = MpccConfig{};
  cfg.slip_weight = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(HermiteTable, CubicsExactSmoothFunctionsAccurateClampedOutside) {
  const auto cubic = [](double s) { return 0.5 - s + 2 * s * s - 3 * s * s * s; };
  const HermiteTable tc(cubic, -1.0, 2.0, 7);
  // Exact up to the central-difference slope error, f''' d^2 / 6 with d = 1e-3 h.
  for (double s = -1.0; s <= 2.0; s += 0.013) EXPECT_NEAR(tc(s), cubic(s), 1e-6) << s;

  // Interpolation error of a cubic Hermite is bounded by h^4 max|f''''| / 384.
  const int n = 50;
  const double lo = -1.5, hi = 1.5, h = (hi - lo) / n;
  const HermiteTable ts([](double s) { return std::sin(3 * s); }, lo, hi, n);
  const double bound = std::pow(h, 4) * 81.0 / 384.0 + 1e-9;
  for (double s = lo; s <= hi; s += 0.0037) EXPECT_LE(std::abs(ts(s) - std::sin(3 * s)), bound) << s;
  EXPECT_EQ(ts(-4.0), ts(lo));
  EXPECT_EQ(ts(4.0), ts(hi));
  EXPECT_THROW(HermiteTable(cubic, 1.0, 1.0, 4), Error);
  EXPECT_THROW(HermiteTable(cubic, 0.0, 1.0, 0), Error);
}

TEST(ClosedLoop, MountainCarRecursiveReachesGoal) {
  const envs::MountainCarParams prm = mc_params(0.9);
  MountainCarPlant plant(prm, {-0.5, 0.0});
  MountainCarMpc mpc(prm, {});
  ResidualModel res = cosine_residual(0.0, 0.001);
  Rng rng(1);
  const TrajectoryLog log = run_closed_loop(plant, mpc, res, {AdapterKind::Recursive}, {60, 10}, rng);
  EXPECT_TRUE(log.completed);
  EXPECT_GE(plant.state_vector()(0), 0.6);
}

TEST(ClosedLoop, CosineWeightConvergesWithinFivePercent) {
  for (double theta1 : {0.65, 0.9, 1.3}) {
    const envs::MountainCarParams prm = mc_params(theta1);
    MountainCarPlant plant(prm, {-0.5, 0.0}, 10.0);
    MountainCarMpc mpc(prm, {});
    ResidualModel res = cosine_residual(0.0, 0.001);
    Rng rng(7);
    run_closed_loop(plant, mpc, res, {AdapterKind::Recursive}, {30, 10}, rng);
    EXPECT_NEAR(res.channels[0].posterior.mu(0), theta1, 0.05 * theta1) << "theta1 " << theta1;
  }
}

TEST(ClosedLoop, ExactModelWithoutAdaptationMatchesGroundTruthMpc) {
  const envs::MountainCarParams prm = mc_params(0.9, 0.0);
  MountainCarPlant p1(prm, {-0.5, 0.0}), p2(prm, {-0.5, 0.0});
  MountainCarMpc m1(prm, {}), m2(prm, {});
  ResidualModel exact = exact_mountain_car_residual(prm);
  ResidualModel learned = cosine_residual(0.9, 0.001);
  Rng r1(3), r2(3);
  const TrajectoryLog a = run_closed_loop(p1, m1, exact, {AdapterKind::None}, {60, 10}, r1);
  const TrajectoryLog b = run_closed_loop(p2, m2, learned, {AdapterKind::None}, {60, 10}, r2);
  EXPECT_TRUE(identical(a, b));
  EXPECT_TRUE(a.completed);
}

TEST(ClosedLoop, SameSeedIsBitwiseIdentical) {
  auto run = [] {
    const envs::MountainCarParams prm = mc_params(0.65);
    MountainCarPlant plant(prm, {-0.5, 0.0});
    MountainCarMpc mpc(prm, {});
    ResidualModel res = cosine_residual(0.0, 0.001);
    Rng rng(99);
    return run_closed_loop(plant, mpc, res, {AdapterKind::Recursive}, {40, 10}, rng);
  };
  EXPECT_TRUE(identical(run(), run()));
}

TEST(ClosedLoop, LoggedInputIsFirstOfPlan) {
  const envs::MountainCarParams prm = mc_params(0.5);
  MountainCarPlant plant(prm, {-0.5, 0.0});
  MountainCarMpc mpc(prm, {});
  ResidualModel res = cosine_residual(0.5, 0.001);
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const ControlResult c = mpc.control(plant, res);
    EXPECT_TRUE(same_bytes(c.u, mpc.last_plan().front()));
    plant.step(c.u, rng);
  }
}

TEST(ClosedLoop, MeasurementIsStateDifferenceMinusNominal) {
  const envs::MountainCarParams prm = mc_params(0.7, 0.0);
  MountainCarPlant plant(prm, {-0.3, 0.1});
  Rng rng(1);
  const StepOutcome out = plant.step(VectorXd::Constant(1, 0.4), rng);
  ASSERT_EQ(out.observations.size(), 1u);
  EXPECT_NEAR(out.observations[0].y, envs::mountain_car_residual(-0.3, 0.7, 0.2), 1e-15);
  EXPECT_NEAR(out.observations[0].truth, out.observations[0].y, 1e-15);
}

TEST(ClosedLoop, LogCsvAndSidecar) {
  const envs::MountainCarParams prm = mc_params(0.5);
  MountainCarPlant plant(prm, {-0.5, 0.0});
  MountainCarMpc mpc(prm, {});
  ResidualModel res = cosine_residual(0.0, 0.001);
  Rng rng(2);
  const TrajectoryLog log = run_closed_loop(plant, mpc, res, {AdapterKind::SgdMean, 0.5}, {25, 10}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "mlmpc_test_mpc";
  std::filesystem::create_directories(dir);
  log.write(dir / "run.csv");
  const io::CsvTable t = io::read_csv(dir / "run.csv");
  EXPECT_EQ(t.header, (std::vector<std::string>{"t", "p", "v", "u", "y_v", "cost", "iters"}));
  EXPECT_EQ(t.rows.rows(), static_cast<Eigen::Index>(log.size()));
  const auto side = nlohmann::json::parse(io::read_text(dir / "run.json"));
  EXPECT_EQ(side["mu_checkpoints"].size(), 1u + log.size() / 10);
}

TEST(ClosedLoop, RejectsZeroSteps) {
  const envs::MountainCarParams prm = mc_params(0.5);
  MountainCarPlant plant(prm, {-0.5, 0.0});
  MountainCarMpc mpc(prm, {});
  ResidualModel res;
  Rng rng(1);
  EXPECT_THROW(run_closed_loop(plant, mpc, res, {AdapterKind::None}, {0, 10}, rng), Error);
}

TEST(ClosedLoop, GroundTruthMpccCompletesLapWithMonotoneProgress) {
  const envs::Track& track = default_track();
  const envs::PacejkaParams tires;
  CarPlant plant(track, envs::CarParams{}, tires, {}, tires);
  MpccController ctrl(track, envs::CarParams{}, {}, tires, tires);
  ResidualModel none;
  Rng rng(4);
  const TrajectoryLog log = run_closed_loop(plant, ctrl, none, {AdapterKind::None}, {600, 50}, rng);
  EXPECT_TRUE(log.completed);
  EXPECT_FALSE(log.aborted);
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_GE(log.rows[i].state(6), log.rows[i - 1].state(6));
}
