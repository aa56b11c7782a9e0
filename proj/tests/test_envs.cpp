#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "mlmpc/envs.hpp"
#include "test_util.hpp"

using namespace mlmpc;
using namespace mlmpc::envs;

namespace {

CarState cruising(double vx = 1.5) {
  CarState x = CarState::Zero();
  x(kVx) = vx;
  return x;
}

Track circle(double r, int n) {
  MatrixXd pts(n, 2);
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * i / n;
    pts(i, 0) = r * std::cos(a);
    pts(i, 1) = r * std::sin(a);
  }
  return Track::from_waypoints(pts, 0.2);
}

}  // namespace

TEST(MountainCar, StepFromValley) {
  MountainCarParams prm;
  prm.theta1 = 0.5;
  const Vector2d next = mountain_car_step(Vector2d(-0.5, 0.0), 0.0, prm, 0.0);
  EXPECT_DOUBLE_EQ(next(0), -0.5);
  EXPECT_NEAR(next(1), -0.1 * std::cos(1.5), 1e-15);
  EXPECT_NEAR(next(1), -0.0070737, 1e-7);
}

TEST(MountainCar, NoSlopeKeepsVelocity) {
  MountainCarParams prm;
  prm.theta1 = 1e-300;
  const Vector2d next = mountain_car_step(Vector2d(0.3, 0.2), 0.0, prm, 0.0);
  EXPECT_DOUBLE_EQ(next(1), 0.2);
}

TEST(MountainCar, ExactEvaluationProperty) {
  Rng rng(1);
  MountainCarParams prm;
  for (int i = 0; i < 1000; ++i) {
    const Vector2d x(uniform(rng, -1.5, 0.6), uniform(rng, -1, 1));
    const double u = uniform(rng, -1, 1), w = 0.001 * standard_normal(rng);
    prm.theta1 = uniform(rng, 0.3, 1.3);
    const Vector2d next = mountain_car_step(x, u, prm, w);
    EXPECT_EQ(next(0) - x(0), prm.T_s * x(1) + x(0) - x(0));
    const Vector2d nominal = mountain_car_nominal(x, u, prm);
    EXPECT_NEAR(next(1) - nominal(1), mountain_car_residual(x(0), prm.theta1, prm.T_s) + w, 1e-15);
  }
}

TEST(MountainCar, Residual) {
  EXPECT_NEAR(mountain_car_residual(0.0, 0.65, 0.2), -0.13, 1e-15);
  EXPECT_NEAR(mountain_car_residual(std::numbers::pi / 6.0, 0.65, 0.2), 0.0, 1e-15);
  EXPECT_EQ(mountain_car_residual(0.37, 0.9, 0.2), mountain_car_residual(-0.37, 0.9, 0.2));
}

TEST(Pacejka, Examples) {
  EXPECT_EQ(pacejka_force(0.0, 2.0, 1.2, 0.3), 0.0);
  EXPECT_NEAR(pacejka_force(1.0, 1.0, 1.0, 1.0), std::sqrt(0.5), 1e-15);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double s = uniform(rng, -2, 2), b = uniform(rng, 0.5, 5), c = uniform(rng, 0.5, 1.9), d = uniform(rng, 0.05, 0.5);
    EXPECT_EQ(pacejka_force(-s, b, c, d), -pacejka_force(s, b, c, d));
    EXPECT_LE(std::abs(pacejka_force(s, b, c, d)), d);
    EXPECT_NEAR(pacejka_force(1e6 / b, b, c, d), d * std::sin(c * std::numbers::pi / 2.0), 1e-6);
  }
}

TEST(SlipAngles, Examples) {
  CarParams car;
  const SlipAngles straight = slip_angles(cruising(), 0.0, car);
  EXPECT_EQ(straight.front, 0.0);
  EXPECT_EQ(straight.rear, 0.0);
  const SlipAngles steer = slip_angles(cruising(), 0.1, car);
  EXPECT_NEAR(steer.front, -0.1, 1e-15);
  EXPECT_EQ(steer.rear, 0.0);
  CarState yaw = cruising();
  yaw(kOmega) = 1.0;
  const SlipAngles s = slip_angles(yaw, 0.0, car);
  EXPECT_GT(s.front, 0.0);
  EXPECT_LT(s.rear, 0.0);
}

TEST(CarStep, StraightLineEquilibrium) {
  CarParams car;
  car.C_d = 0.0;
  car.C_roll = 0.0;
  const CarState x = cruising();
  const CarState next = car_step(x, Vector2d::Zero(), car, PacejkaParams{});
  EXPECT_EQ(next(kY), 0.0);
  EXPECT_EQ(next(kPsi), 0.0);
  EXPECT_EQ(next(kVy), 0.0);
  EXPECT_NEAR(next(kX), 1.5 * car.T_s, 1e-15);
}

TEST(CarStep, MatchesFineEuler) {
  // The yaw mode is stiff, so the explicit Euler reference needs very small steps.
  CarParams car;
  const PacejkaParams tires;
  CarState x = cruising();
  x(kVy) = 0.05;
  x(kOmega) = 0.8;
  x(kPsi) = 0.3;
  const Vector2d u(0.4, 0.15);
  const CarState rk4 = car_step(x, u, car, tires);
  CarState e = x;
  const int fine_steps = 100000;
  const double h = car.T_s / fine_steps;
  for (int i = 0; i < fine_steps; ++i) e += h * car_derivative(e, u(0), u(1), car, PacejkaForces{tires});
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(rk4(j), e(j), 1e-5) << "component " << j;
}

TEST(CarStep, MirrorSymmetry) {
  CarParams car;
  const PacejkaParams tires;
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    CarState x;
    x << uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, 0.5, 2), uniform(rng, -0.2, 0.2),
        uniform(rng, -2, 2);
    const Vector2d u(uniform(rng, -1, 1), uniform(rng, -0.4, 0.4));
    CarState m = x;
    m(kY) = -x(kY);
    m(kPsi) = -x(kPsi);
    m(kVy) = -x(kVy);
    m(kOmega) = -x(kOmega);
    const CarState a = car_step(x, u, car, tires), b = car_step(m, Vector2d(u(0), -u(1)), car, tires);
    EXPECT_EQ(a(kVy), -b(kVy));
    EXPECT_EQ(a(kOmega), -b(kOmega));
    EXPECT_EQ(a(kVx), b(kVx));
  }
}

TEST(CarStep, Rk4ConvergenceOrder) {
  CarParams car;
  car.substeps = 1;
  const PacejkaParams tires;
  CarState x = cruising();
  x(kVy) = 0.05;
  x(kOmega) = 1.0;
  const Vector2d u(0.5, 0.2);
  CarParams fine = car;
  fine.substeps = 64;
  const CarState ref = car_step(x, u, fine, tires);
  CarParams c2 = car, c4 = car;
  c2.substeps = 2;
  c4.substeps = 4;
  const double e2 = (car_step(x, u, c2, tires) - ref).norm();
  const double e4 = (car_step(x, u, c4, tires) - ref).norm();
  EXPECT_GT(e2 / e4, 12.0);
  EXPECT_LT(e2 / e4, 20.0);
}

TEST(CarStep, NoiseAndFloor) {
  CarParams car;
  CarState x = cruising(0.01);
  x(kVy) = 0.02;
  const CarState quiet = car_step(x, Vector2d(-1.0, 0.1), car, PacejkaParams{});
  const CarState noisy = car_step(x, Vector2d(-1.0, 0.1), car, PacejkaParams{}, Vector2d(0.01, -0.02));
  EXPECT_GE(quiet(kVx), car.v_floor);
  EXPECT_NEAR(noisy(kVy) - quiet(kVy), 0.01, 1e-12);
  EXPECT_NEAR(noisy(kOmega) - quiet(kOmega), -0.02, 1e-12);
  EXPECT_EQ(noisy(kX), quiet(kX));
}

TEST(TireTasks, GripSpreadAndDeterminism) {
  const PacejkaParams base;
  double dmin = 1e9, dmax = 0;
  for (int k = 0; k < 7; ++k) {
    const PacejkaParams p = make_task_tires(base, k, 7, 5);
    dmin = std::min(dmin, p.D_f);
    dmax = std::max(dmax, p.D_f);
    const PacejkaParams q = make_task_tires(base, k, 7, 5);
    EXPECT_EQ(p.B_f, q.B_f);
    EXPECT_EQ(p.C_r, q.C_r);
    EXPECT_GE(p.B_f, 0.9 * base.B_f);
    EXPECT_LE(p.C_f, 1.1 * base.C_f);
  }
  EXPECT_NEAR(dmax / dmin, 2.0, 1e-12);
  EXPECT_NEAR(make_task_tires(base, 0, 1, 5).D_r, 0.6 * base.D_r, 1e-15);
  EXPECT_THROW(make_task_tires(base, 7, 7, 5), Error);
  const PacejkaParams back = pacejka_from_json(to_json(make_task_tires(base, 3, 7, 5)));
  EXPECT_EQ(back.B_r, make_task_tires(base, 3, 7, 5).B_r);
}

TEST(Track, CircleLength) {
  const Track t = circle(1.0, 1000);
  EXPECT_NEAR(t.length() / (2.0 * std::numbers::pi), 1.0, 1e-3);
  EXPECT_NEAR(t.curvature(1.3), 1.0, 1e-3);
}

TEST(Track, OnCenterlineZeroOffset) {
  const Track t = Track::load_csv(default_track_path(), 0.2);
  for (double s : {0.0, 1.1, 4.7, 8.25, t.length() - 0.01}) {
    const Projection pr = t.project(t.position(s), s + 0.3);
    EXPECT_NEAR(pr.e_lat, 0.0, 1e-6);
    EXPECT_NEAR(std::remainder(pr.s - s, t.length()), 0.0, 1e-6);
  }
}

TEST(Track, NormalOffset) {
  const Track t = Track::load_csv(default_track_path(), 0.2);
  for (double s : {0.5, 2.0, 5.3, 9.9}) {
    const Vector2d tan = t.tangent(s);
    const Vector2d left(-tan(1), tan(0));
    EXPECT_NEAR(t.project(t.position(s) + 0.1 * left, s).e_lat, 0.1, 1e-4);
    EXPECT_NEAR(t.project(t.position(s) - 0.1 * left, s).e_lat, -0.1, 1e-4);
  }
}

TEST(Track, MatchesDenseScan) {
  const Track t = Track::load_csv(default_track_path(), 0.2);
  const int samples = 10000;
  const double spacing = t.length() / samples;
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const double s0 = uniform(rng, 0, t.length());
    const Vector2d tan = t.tangent(s0);
    const Vector2d p = t.position(s0) + uniform(rng, -0.15, 0.15) * Vector2d(-tan(1), tan(0));
    double best = 1e9, best_s = 0;
    for (int i = 0; i < samples; ++i) {
      const double d = (t.position(i * spacing) - p).norm();
      if (d < best) {
        best = d;
        best_s = i * spacing;
      }
    }
    const Projection pr = t.project(p, s0 + uniform(rng, -0.2, 0.2) * t.length());
    EXPECT_LE(std::abs(std::remainder(pr.s - best_s, t.length())), spacing);
  }
}

TEST(Track, DefaultTrackShape) {
  const Track t = Track::load_csv(default_track_path(), 0.2);
  EXPECT_NEAR(t.length(), 11.0, 0.5);
  EXPECT_NEAR(t.heading(0.0), 0.0, 0.02);
  // Counter-clockwise: total signed curvature integrates to 2 pi.
  double turn = 0.0;
  const int n = 5000;
  for (int i = 0; i < n; ++i) turn += t.curvature((i + 0.5) * t.length() / n) * t.length() / n;
  EXPECT_NEAR(turn, 2.0 * std::numbers::pi, 1e-2);
}

TEST(Track, RejectsSparseWaypoints) {
  MatrixXd pts(4, 2);
  pts << 0, 0, 1, 0, 1, 1, 0, 1;
  EXPECT_THROW(Track::from_waypoints(pts, 0.2), Error);
}
