#pragma once

// Simulated plants: the mountain car and a single-track dynamic bicycle with
// Pacejka lateral tire forces, plus closed-track geometry.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <json.hpp>

#include "mlmpc/error.hpp"
#include "mlmpc/io.hpp"
#include "mlmpc/rng.hpp"

#ifndef MLMPC_DATA_DIR
#define MLMPC_DATA_DIR "data"
#endif

namespace mlmpc::envs {

using Eigen::MatrixXd;
using Eigen::Vector2d;
using Eigen::VectorXd;

// ---- mountain car

struct MountainCarParams {
  double T_s = 0.2;
  double theta1 = 0.5;
  double theta2 = 0.3;
  double process_noise_std = 0.001;

  void validate() const {
    require(T_s > 0.0 && theta1 > 0.0 && theta2 > 0.0 && process_noise_std >= 0.0,
            ErrorKind::InvalidArgument, "MountainCarParams: invalid values");
  }
};

/// p' = p + T_s v, v' = v - T_s cos(3p) theta1 + T_s u theta2 + noise.
inline Vector2d mountain_car_step(const Vector2d& state, double u, const MountainCarParams& prm,
                                  double noise) {
  const double p = state(0), v = state(1);
  return {p + prm.T_s * v, v - prm.T_s * std::cos(3.0 * p) * prm.theta1 + prm.T_s * u * prm.theta2 + noise};
}

/// Known part of the model: everything except the slope term.
inline Vector2d mountain_car_nominal(const Vector2d& state, double u, const MountainCarParams& prm) {
  return {state(0) + prm.T_s * state(1), state(1) + prm.T_s * u * prm.theta2};
}

inline double mountain_car_residual(double p, double theta1, double T_s) {
  return -T_s * std::cos(3.0 * p) * theta1;
}

// ---- tires and car

struct PacejkaParams {
  double B_f = 2.58, C_f = 1.2, D_f = 0.192;
  double B_r = 3.38, C_r = 1.26, D_r = 0.173;

  void validate() const {
    require(B_f > 0 && C_f > 0 && D_f > 0 && B_r > 0 && C_r > 0 && D_r > 0, ErrorKind::InvalidArgument,
            "PacejkaParams: all coefficients must be positive");
  }

  PacejkaParams scaled_grip(double g) const {
    PacejkaParams p = *this;
    p.D_f *= g;
    p.D_r *= g;
    return p;
  }
};

inline double pacejka_force(double s, double B, double C, double D) {
  return D * std::sin(C * std::atan(B * s));
}

struct CarParams {
  double mass = 0.041;
  double I_z = 2.78e-5;
  double l_f = 0.029;
  double l_r = 0.033;
  double C_m = 0.287;
  double C_d = 0.0012;
  double C_roll = 0.005;
  double throttle_max = 1.0;
  double steer_max = 0.4;
  double T_s = 0.02;
  int substeps = 4;
  double v_floor = 0.05;

  void validate() const {
    require(mass > 0 && I_z > 0 && l_f > 0 && l_r > 0 && T_s > 0 && substeps >= 1 && v_floor > 0,
            ErrorKind::InvalidArgument, "CarParams: invalid values");
  }
};

/// [X, Y, psi, v_x, v_y, omega]
using CarState = Eigen::Matrix<double, 6, 1>;
enum CarIndex { kX = 0, kY, kPsi, kVx, kVy, kOmega };

struct SlipAngles {
  double front = 0.0;
  double rear = 0.0;
};

template <class S>
SlipAngles slip_angles(const S& x, double delta, const CarParams& car) {
  return {std::atan2(x(kVy) + car.l_f * x(kOmega), x(kVx)) - delta,
          std::atan2(x(kVy) - car.l_r * x(kOmega), x(kVx))};
}

/// Lateral tire force model: maps slip angles to (F_f, F_r). Forces act
/// against the slip, so F_i = -pacejka(s_i).
struct PacejkaForces {
  PacejkaParams tires;

  std::array<double, 2> operator()(const SlipAngles& s) const {
    return {-pacejka_force(s.front, tires.B_f, tires.C_f, tires.D_f),
            -pacejka_force(s.rear, tires.B_r, tires.C_r, tires.D_r)};
  }
};

template <class Forces>
CarState car_derivative(const CarState& x, double d, double delta, const CarParams& car, const Forces& forces) {
  const double vx = x(kVx), vy = x(kVy), w = x(kOmega), psi = x(kPsi);
  const auto f = forces(slip_angles(x, delta, car));
  const double ff = f[0], fr = f[1];
  const double fx = car.C_m * d - car.C_d * vx * vx - car.C_roll;
  const double cd = std::cos(delta), sd = std::sin(delta);
  CarState dx;
  dx(kX) = vx * std::cos(psi) - vy * std::sin(psi);
  dx(kY) = vx * std::sin(psi) + vy * std::cos(psi);
  dx(kPsi) = w;
  dx(kVx) = (fx - ff * sd + car.mass * vy * w) / car.mass;
  dx(kVy) = (fr + ff * cd - car.mass * vx * w) / car.mass;
  dx(kOmega) = (ff * car.l_f * cd - fr * car.l_r) / car.I_z;
  return dx;
}

/// RK4 over T_s split into car.substeps pieces; inputs are clamped and v_x floored.
template <class Forces>
CarState car_step_with(const CarState& state, const Eigen::Vector2d& input, const CarParams& car,
                       const Forces& forces, const Eigen::Vector2d& noise = Eigen::Vector2d::Zero()) {
  const double d = std::clamp(input(0), -car.throttle_max, car.throttle_max);
  const double delta = std::clamp(input(1), -car.steer_max, car.steer_max);
  const double h = car.T_s / car.substeps;
  CarState x = state;
  x(kVx) = std::max(x(kVx), car.v_floor);
  for (int i = 0; i < car.substeps; ++i) {
    const CarState k1 = car_derivative(x, d, delta, car, forces);
    const CarState k2 = car_derivative(CarState(x + 0.5 * h * k1), d, delta, car, forces);
    const CarState k3 = car_derivative(CarState(x + 0.5 * h * k2), d, delta, car, forces);
    const CarState k4 = car_derivative(CarState(x + h * k3), d, delta, car, forces);
    x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  x(kVy) += noise(0);
  x(kOmega) += noise(1);
  x(kVx) = std::max(x(kVx), car.v_floor);
  return x;
}

inline CarState car_step(const CarState& state, const Eigen::Vector2d& input, const CarParams& car,
                         const PacejkaParams& tires, const Eigen::Vector2d& noise = Eigen::Vector2d::Zero()) {
  return car_step_with(state, input, car, PacejkaForces{tires}, noise);
}

/// Grip factor g in linspace(0.6, 1.2, M) scales the peak forces; B and C get
/// seeded +-10% perturbations.
inline PacejkaParams make_task_tires(const PacejkaParams& base, int task_index, int count, std::uint64_t seed) {
  require(count >= 1 && task_index >= 0 && task_index < count, ErrorKind::InvalidArgument,
          "make_task_tires: task index out of range");
  const double g = count == 1 ? 0.6 : 0.6 + 0.6 * task_index / (count - 1);
  Rng rng = child_stream(seed, {stream_id("tires"), static_cast<std::uint64_t>(task_index)});
  PacejkaParams p = base.scaled_grip(g);
  p.B_f *= uniform(rng, 0.9, 1.1);
  p.C_f *= uniform(rng, 0.9, 1.1);
  p.B_r *= uniform(rng, 0.9, 1.1);
  p.C_r *= uniform(rng, 0.9, 1.1);
  return p;
}

inline nlohmann::json to_json(const PacejkaParams& p) {
  return {{"B_f", p.B_f}, {"C_f", p.C_f}, {"D_f", p.D_f}, {"B_r", p.B_r}, {"C_r", p.C_r}, {"D_r", p.D_r}};
}

inline PacejkaParams pacejka_from_json(const nlohmann::json& j) {
  PacejkaParams p;
  p.B_f = j.at("B_f").get<double>();
  p.C_f = j.at("C_f").get<double>();
  p.D_f = j.at("D_f").get<double>();
  p.B_r = j.at("B_r").get<double>();
  p.C_r = j.at("C_r").get<double>();
  p.D_r = j.at("D_r").get<double>();
  p.validate();
  return p;
}

// ---- track

struct Projection {
  double s = 0.0;
  double e_lat = 0.0;
};

/// Centerline as a cubic spline parameterized by arclength (periodic when closed).
class Track {
 public:
  static Track from_waypoints(const MatrixXd& pts, double half_width, bool closed = true) {
    require(pts.cols() == 2 && pts.rows() >= (closed ? 3 : 2), ErrorKind::InvalidArgument,
            "Track: need at least 3 (closed) or 2 (open) 2-D waypoints");
    require(half_width > 0.0, ErrorKind::InvalidArgument, "Track: half_width <= 0");
    Track t;
    t.half_width_ = half_width;
    t.closed_ = closed;
    t.pts_ = pts;
    // First pass with chord-length knots, then re-knot at the spline's arclength.
    t.fit(t.chord_knots());
    std::vector<double> knots(t.knots_.size());
    knots[0] = 0.0;
    for (std::size_t i = 1; i < knots.size(); ++i) knots[i] = knots[i - 1] + t.segment_arclength(i - 1);
    t.fit(knots);
    for (std::size_t i = 1; i < t.knots_.size(); ++i)
      require(t.knots_[i] > t.knots_[i - 1], ErrorKind::InvalidArgument, "Track: repeated waypoints");
    for (std::size_t i = 0; i + 1 < t.knots_.size(); ++i)
      require(t.knots_[i + 1] - t.knots_[i] <= half_width * (1.0 + 1e-9), ErrorKind::InvalidArgument,
              "Track: waypoint spacing exceeds half_width");
    return t;
  }

  static Track load_csv(const std::filesystem::path& path, double half_width, bool closed = true) {
    const io::CsvTable table = io::read_csv(path);
    require(table.header.size() == 2 && table.header[0] == "x" && table.header[1] == "y", ErrorKind::Io,
            "track csv must have header x,y: " + path.string());
    return from_waypoints(table.rows, half_width, closed);
  }

  double length() const { return knots_.back(); }
  double half_width() const { return half_width_; }
  bool closed() const { return closed_; }
  const MatrixXd& waypoints() const { return pts_; }

  double wrap(double s) const {
    if (!closed_) return std::clamp(s, 0.0, length());
    const double l = length();
    double r = std::fmod(s, l);
    if (r < 0.0) r += l;
    return r;
  }

  Vector2d position(double s) const { return eval(s, 0); }
  Vector2d tangent(double s) const { return eval(s, 1).normalized(); }
  double heading(double s) const {
    const Vector2d t = eval(s, 1);
    return std::atan2(t(1), t(0));
  }
  double curvature(double s) const {
    const Vector2d d1 = eval(s, 1), d2 = eval(s, 2);
    return (d1(0) * d2(1) - d1(1) * d2(0)) / std::pow(d1.norm(), 3);
  }

  /// Signed lateral offset of p from the centerline point at s (positive to the left).
  double lateral_offset(const Vector2d& p, double s) const {
    const Vector2d t = tangent(s);
    const Vector2d r = p - position(s);
    return t(0) * r(1) - t(1) * r(0);
  }

  /// Nearest centerline point: coarse scan over knots within +-25% of the
  /// length around s_hint, then safeguarded Newton on the squared distance.
  Projection project(const Vector2d& p, double s_hint) const {
    const double l = length();
    const std::size_t n = knots_.size() - 1;
    double best_s = wrap(s_hint), best_d = (position(best_s) - p).squaredNorm();
    for (std::size_t i = 0; i < n + (closed_ ? 0 : 1); ++i) {
      double ds = knots_[i] - wrap(s_hint);
      if (closed_) ds = std::remainder(ds, l);
      if (std::abs(ds) > 0.25 * l) continue;
      const double d = (pts_.row(static_cast<Eigen::Index>(i)).transpose() - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best_s = knots_[i];
      }
    }
    double s = best_s;
    for (int it = 0; it < 50; ++it) {
      const Vector2d r = p - eval(s, 0), d1 = eval(s, 1), d2 = eval(s, 2);
      const double g = -r.dot(d1);
      const double h = d1.squaredNorm() - r.dot(d2);
      double step = h > 1e-9 ? -g / h : -g;
      step = std::clamp(step, -0.5 * half_width_, 0.5 * half_width_);
      s = wrap(s + step);
      if (std::abs(step) < 1e-10) return {s, lateral_offset(p, s)};
    }
    throw Error(ErrorKind::ProjectionDiverged, "track projection did not converge in 50 iterations");
  }

 private:
  MatrixXd pts_;
  std::vector<double> knots_;  // n+1 entries when closed (last closes the loop)
  MatrixXd second_;            // second derivatives at knots, (n+1) x 2
  double half_width_ = 0.2;
  bool closed_ = true;

  Vector2d point(std::size_t i) const {
    return pts_.row(static_cast<Eigen::Index>(i % static_cast<std::size_t>(pts_.rows()))).transpose();
  }

  std::vector<double> chord_knots() const {
    const std::size_t n = static_cast<std::size_t>(pts_.rows());
    const std::size_t segs = closed_ ? n : n - 1;
    std::vector<double> k(segs + 1, 0.0);
    for (std::size_t i = 0; i < segs; ++i) k[i + 1] = k[i] + (point(i + 1) - point(i)).norm();
    return k;
  }

  void fit(const std::vector<double>& knots) {
    knots_ = knots;
    const std::size_t segs = knots_.size() - 1;
    const auto m = static_cast<Eigen::Index>(closed_ ? segs : segs + 1);
    std::vector<Eigen::Triplet<double>> trip;
    MatrixXd rhs = MatrixXd::Zero(m, 2);
    auto h = [&](std::size_t i) { return knots_[i + 1] - knots_[i]; };
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      if (!closed_ && (i == 0 || i == m - 1)) {
        trip.emplace_back(i, i, 1.0);
        continue;
      }
      const std::size_t prev = iu == 0 ? segs - 1 : iu - 1;
      const double hp = h(prev), hn = h(iu);
      const Eigen::Index ip = closed_ ? static_cast<Eigen::Index>(prev) : i - 1;
      const Eigen::Index in = closed_ ? (i + 1) % m : i + 1;
      trip.emplace_back(i, ip, hp);
      trip.emplace_back(i, i, 2.0 * (hp + hn));
      trip.emplace_back(i, in, hn);
      rhs.row(i) = 6.0 * ((point(iu + 1) - point(iu)) / hn - (point(iu) - point(prev)) / hp).transpose();
    }
    Eigen::SparseMatrix<double> a(m, m);
    a.setFromTriplets(trip.begin(), trip.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(a);
    require(lu.info() == Eigen::Success, ErrorKind::SolveFailed, "Track: spline system singular");
    const MatrixXd sol = lu.solve(rhs);
    second_.resize(static_cast<Eigen::Index>(segs + 1), 2);
    second_.topRows(m) = sol;
    if (closed_) second_.row(static_cast<Eigen::Index>(segs)) = sol.row(0);
  }

  Vector2d eval_segment(std::size_t i, double t, int order) const {
    const double h = knots_[i + 1] - knots_[i];
    const double a = (knots_[i + 1] - t) / h, b = (t - knots_[i]) / h;
    const Vector2d y0 = point(i), y1 = point(i + 1);
    const Vector2d m0 = second_.row(static_cast<Eigen::Index>(i)).transpose();
    const Vector2d m1 = second_.row(static_cast<Eigen::Index>(i + 1)).transpose();
    if (order == 0) return a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
    if (order == 1) return (y1 - y0) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
    return a * m0 + b * m1;
  }

  std::size_t segment_of(double s) const {
    const auto it = std::upper_bound(knots_.begin(), knots_.end(), s);
    const auto idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - knots_.begin() - 1, 0));
    return std::min(idx, knots_.size() - 2);
  }

  Vector2d eval(double s, int order) const {
    const double w = wrap(s);
    return eval_segment(segment_of(w), w, order);
  }

  double segment_arclength(std::size_t i) const {
    static constexpr std::array<double, 5> x{-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
                                             0.9061798459386640};
    static constexpr std::array<double, 5> w{0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                             0.4786286704993665, 0.2369268850561891};
    const double a = knots_[i], b = knots_[i + 1];
    double sum = 0.0;
    for (int k = 0; k < 5; ++k)
      sum += w[static_cast<std::size_t>(k)] *
             eval_segment(i, 0.5 * (a + b) + 0.5 * (b - a) * x[static_cast<std::size_t>(k)], 1).norm();
    return 0.5 * (b - a) * sum;
  }
};

inline std::filesystem::path default_track_path() {
  return std::filesystem::path(MLMPC_DATA_DIR) / "tracks" / "default.csv";
}

}  // namespace mlmpc::envs
