#pragma once

// Experiment drivers: configuration, data collection, meta-training, ELBO
// scans, meta-testing, racing, grip change and RMSE statistics. Every
// experiment writes its outputs plus a manifest under one output directory.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mlmpc/blr.hpp"
#include "mlmpc/envs.hpp"
#include "mlmpc/error.hpp"
#include "mlmpc/features.hpp"
#include "mlmpc/io.hpp"
#include "mlmpc/meta.hpp"
#include "mlmpc/mpc.hpp"
#include "mlmpc/rng.hpp"

#define MLMPC_VERSION "0.1.0"

namespace mlmpc::harness {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

// ---- configuration

/// Flat `key = value` text. `#` starts a comment, `[section]` prefixes the
/// following keys with `section.`, lists are comma separated.
class Config {
 public:
  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        require(t.back() == ']' && t.size() > 2, ErrorKind::InvalidArgument,
                "config line " + std::to_string(lineno) + ": bad section header");
        section = trim(t.substr(1, t.size() - 2)) + ".";
        continue;
      }
      const auto eq = t.find('=');
      require(eq != std::string::npos, ErrorKind::InvalidArgument,
              "config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      require(!key.empty(), ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": empty key");
      c.set(section + key, trim(t.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const fs::path& path) { return parse(io::read_text(path)); }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  const std::map<std::string, std::string>& entries() const { return kv_; }

  std::string str(const std::string& key, const std::string& def) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }

  double real(const std::string& key, double def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    return to_real(key, it->second);
  }

  long integer(const std::string& key, long def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(it->second, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == it->second.size() && used > 0, ErrorKind::InvalidArgument,
            "config " + key + ": not an integer: " + it->second);
    return v;
  }

  bool flag(const std::string& key, bool def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw Error(ErrorKind::InvalidArgument, "config " + key + ": not a boolean: " + it->second);
  }

  std::vector<double> reals(const std::string& key, std::vector<double> def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::vector<double> out;
    for (const auto& cell : io::split(it->second)) out.push_back(to_real(key, cell));
    require(!out.empty(), ErrorKind::InvalidArgument, "config " + key + ": empty list");
    return out;
  }

  /// Sorted `key = value` lines; the hash is taken over this text.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : kv_) s += k + " = " + v + "\n";
    return s;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static double to_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == v.size() && used > 0, ErrorKind::InvalidArgument, "config " + key + ": not a number: " + v);
    return d;
  }

  std::map<std::string, std::string> kv_;
};

struct RunContext {
  Config cfg;
  std::uint64_t seed = 1;
  fs::path out = "out";
  int threads = 1;

  static RunContext from(Config cfg, std::optional<std::uint64_t> seed, std::optional<fs::path> out) {
    RunContext c;
    c.seed = seed ? *seed : static_cast<std::uint64_t>(cfg.integer("seed", 1));
    c.out = out ? *out : fs::path(cfg.str("out", "out"));
    c.threads = static_cast<int>(cfg.integer("threads", 1));
    require(c.threads >= 0, ErrorKind::InvalidArgument, "threads must be >= 0");
    if (c.threads == 0) c.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    c.cfg = std::move(cfg);
    return c;
  }
};

struct ExperimentResult {
  json report = json::object();
  bool passed = true;
  std::vector<std::string> checks;  // human-readable check lines

  void check(bool ok, const std::string& what) {
    passed = passed && ok;
    checks.push_back(std::string(ok ? "PASS " : "FAIL ") + what);
  }
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json versions() {
  return {{"mlmpc", MLMPC_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus}};
}

inline void write_manifest(const RunContext& ctx, const std::string& experiment, double wall_seconds,
                           const ExperimentResult& result) {
  json m;
  m["experiment"] = experiment;
  m["seed"] = ctx.seed;
  m["config_hash"] = hex64(ctx.cfg.hash());
  m["config"] = ctx.cfg.entries();
  m["versions"] = versions();
  m["wall_clock_seconds"] = wall_seconds;
  m["threads"] = ctx.threads;
  m["checks"] = result.checks;
  m["passed"] = result.passed;
  io::write_text(ctx.out / ("manifest_" + experiment + ".json"), m.dump(2) + "\n");
}

inline std::uint64_t sid(std::string_view name) { return stream_id(name); }

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results keep index order.
template <class T, class F>
std::vector<T> parallel_map(int n, int threads, F&& fn) {
  std::vector<T> out(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        out[static_cast<std::size_t>(i)] = fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int w = std::max(1, std::min(threads, n));
  if (w == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < w; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---- statistics

/// Quantile by linear interpolation between order statistics, inclusive
/// definition: position q (n - 1) in the sorted sample.
inline double quantile_linear(std::vector<double> v, double q) {
  require(!v.empty(), ErrorKind::EmptyLog, "quantile of an empty sample");
  require(q >= 0.0 && q <= 1.0, ErrorKind::InvalidArgument, "quantile level outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct RmseReport {
  std::vector<double> values;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double whisker_low = 0.0;   // smallest value >= q1 - 1.5 IQR
  double whisker_high = 0.0;  // largest value <= q3 + 1.5 IQR

  static RmseReport from(std::vector<double> v) {
    require(!v.empty(), ErrorKind::EmptyLog, "RmseReport: no values");
    for (double x : v) require(x >= 0.0 && std::isfinite(x), ErrorKind::InvalidArgument, "RmseReport: bad value");
    RmseReport r;
    r.values = v;
    r.median = quantile_linear(v, 0.5);
    r.q1 = quantile_linear(v, 0.25);
    r.q3 = quantile_linear(v, 0.75);
    const double iqr = r.q3 - r.q1;
    std::sort(v.begin(), v.end());
    r.whisker_low = r.q1;
    r.whisker_high = r.q3;
    for (double x : v)
      if (x >= r.q1 - 1.5 * iqr) {
        r.whisker_low = x;
        break;
      }
    for (auto it = v.rbegin(); it != v.rend(); ++it)
      if (*it <= r.q3 + 1.5 * iqr) {
        r.whisker_high = *it;
        break;
      }
    return r;
  }

  json to_json() const {
    return {{"values", values}, {"median", median},           {"q1", q1},
            {"q3", q3},         {"whisker_low", whisker_low}, {"whisker_high", whisker_high}};
  }
};

/// Root mean squared position error over the common prefix of two logs: (X, Y)
/// when both logs carry them, otherwise the first state component.
inline double rmse_vs_ground_truth(const mpc::TrajectoryLog& run, const mpc::TrajectoryLog& ref) {
  const std::size_t n = std::min(run.size(), ref.size());
  require(n > 0, ErrorKind::EmptyLog, "rmse_vs_ground_truth: empty log");
  const bool planar = run.rows[0].state.size() >= 2 && ref.rows[0].state.size() >= 2 && !run.state_names.empty() &&
                      run.state_names[0] == "X";
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const VectorXd& a = run.rows[i].state;
    const VectorXd& b = ref.rows[i].state;
    const double dx = a(0) - b(0);
    const double dy = planar ? a(1) - b(1) : 0.0;
    sum += dx * dx + dy * dy;
  }
  return std::sqrt(sum / static_cast<double>(n));
}

/// Same metric on logs read back from CSV (columns X, Y or the first state column).
inline double rmse_from_csv(const fs::path& run, const fs::path& ref) {
  const io::CsvTable a = io::read_csv(run), b = io::read_csv(ref);
  const Eigen::Index n = std::min(a.rows.rows(), b.rows.rows());
  require(n > 0, ErrorKind::EmptyLog, "rmse: empty log");
  const bool planar = a.header.size() > 2 && a.header[1] == "X" && a.header[2] == "Y" && b.header[1] == "X";
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dx = a.rows(i, 1) - b.rows(i, 1);
    const double dy = planar ? a.rows(i, 2) - b.rows(i, 2) : 0.0;
    sum += dx * dx + dy * dy;
  }
  return std::sqrt(sum / static_cast<double>(n));
}

// ---- shared builders

inline envs::MountainCarParams mountain_car_params(const Config& c, double theta1) {
  envs::MountainCarParams p;
  p.T_s = c.real("mountain_car.T_s", p.T_s);
  p.theta1 = theta1;
  p.theta2 = c.real("mountain_car.theta2", p.theta2);
  p.process_noise_std = c.real("mountain_car.noise_std", p.process_noise_std);
  p.validate();
  return p;
}

inline mpc::SolverOptions solver_options(const Config& c, const std::string& prefix) {
  mpc::SolverOptions o;
  o.max_iters = static_cast<int>(c.integer(prefix + ".max_iters", o.max_iters));
  return o;
}

inline mpc::MountainCarMpcConfig mountain_car_mpc_config(const Config& c) {
  mpc::MountainCarMpcConfig m;
  m.horizon = static_cast<int>(c.integer("mountain_car.horizon", m.horizon));
  m.input_weight = c.real("mountain_car.input_weight", m.input_weight);
  m.goal = c.real("mountain_car.goal", m.goal);
  m.goal_margin = c.real("mountain_car.goal_margin", m.goal_margin);
  m.multistart = c.flag("mountain_car.multistart", m.multistart);
  m.solver = solver_options(c, "mountain_car.solver");
  return m;
}

inline Eigen::Vector2d mountain_car_start(const Config& c) {
  const auto x0 = c.reals("mountain_car.x0", {-0.5, 0.0});
  require(x0.size() == 2, ErrorKind::InvalidArgument, "mountain_car.x0 needs two values");
  return {x0[0], x0[1]};
}

inline mpc::MpccConfig mpcc_config(const Config& c) {
  mpc::MpccConfig m;
  m.horizon = static_cast<int>(c.integer("mpcc.horizon", m.horizon));
  m.q_contour = c.real("mpcc.q_contour", m.q_contour);
  m.q_lag = c.real("mpcc.q_lag", m.q_lag);
  m.gamma = c.real("mpcc.gamma", m.gamma);
  m.r_throttle = c.real("mpcc.r_throttle", m.r_throttle);
  m.r_steer = c.real("mpcc.r_steer", m.r_steer);
  m.bound_weight = c.real("mpcc.bound_weight", m.bound_weight);
  m.bound_margin = c.real("mpcc.bound_margin", m.bound_margin);
  m.slip_weight = c.real("mpcc.slip_weight", m.slip_weight);
  m.slip_max = c.real("mpcc.slip_max", m.slip_max);
  m.model_substeps = static_cast<int>(c.integer("mpcc.model_substeps", m.model_substeps));
  m.solver = solver_options(c, "mpcc.solver");
  m.validate();
  return m;
}

inline mpc::CarPlantConfig car_plant_config(const Config& c, double laps) {
  mpc::CarPlantConfig p;
  p.noise_std_vy = c.real("car.noise_std_vy", p.noise_std_vy);
  p.noise_std_omega = c.real("car.noise_std_omega", p.noise_std_omega);
  p.obs_noise_std = c.real("car.obs_noise_std", p.obs_noise_std);
  p.v0 = c.real("car.v0", p.v0);
  p.laps = laps;
  return p;
}

inline envs::Track load_track(const Config& c) {
  const std::string path = c.str("car.track", envs::default_track_path().string());
  return envs::Track::load_csv(path, c.real("car.half_width", 0.2), true);
}

inline mpc::AdapterConfig adapter_config(const Config& c, const std::string& key,
                                        const std::string& default_kind = "recursive",
                                        double default_eta = mpc::AdapterConfig{}.eta) {
  mpc::AdapterConfig a;
  const std::string kind = c.str(key + ".kind", default_kind);
  if (kind == "recursive")
    a.kind = mpc::AdapterKind::Recursive;
  else if (kind == "sgd")
    a.kind = mpc::AdapterKind::SgdMean;
  else if (kind == "none")
    a.kind = mpc::AdapterKind::None;
  else
    throw Error(ErrorKind::InvalidArgument, key + ".kind must be recursive, sgd or none");
  a.eta = c.real(key + ".eta", default_eta);
  require(a.eta > 0.0, ErrorKind::InvalidArgument, key + ".eta must be > 0");
  const std::string mode = c.str(key + ".sgd_mode", "shrink");
  require(mode == "shrink" || mode == "literal", ErrorKind::InvalidArgument, key + ".sgd_mode must be shrink or literal");
  a.sgd_mode = mode == "shrink" ? blr::SgdMode::Shrink : blr::SgdMode::LiteralPaper;
  return a;
}

/// SGD step for the car channels, sized for the normalized-force features.
constexpr double kCarSgdEta = 0.05;

inline std::string env_name(const Config& c) {
  const std::string env = c.str("env", "mountain_car");
  require(env == "mountain_car" || env == "car", ErrorKind::InvalidArgument, "env must be mountain_car or car");
  return env;
}

inline std::string task_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "task_%02d", i);
  return buf;
}

/// Test tires: base tires at the given grip with B and C perturbed by +-10%.
inline envs::PacejkaParams car_test_tires(const Config& c, std::uint64_t seed, double grip) {
  Rng rng = child_stream(seed, {sid("test-tires")});
  envs::PacejkaParams p = envs::PacejkaParams{}.scaled_grip(grip);
  if (c.flag("car.perturb_test_tires", true)) {
    p.B_f *= uniform(rng, 0.9, 1.1);
    p.C_f *= uniform(rng, 0.9, 1.1);
    p.B_r *= uniform(rng, 0.9, 1.1);
    p.C_r *= uniform(rng, 0.9, 1.1);
  }
  p.validate();
  return p;
}

// ---- meta-trained model on disk

struct MetaModel {
  std::string env;
  features::BasisSet basis;
  std::vector<std::string> channels;
  std::vector<VectorXd> prior_means;

  json to_json() const {
    json j;
    j["env"] = env;
    j["basis"] = features::to_json(basis);
    json ch = json::array();
    for (std::size_t i = 0; i < channels.size(); ++i)
      ch.push_back({{"name", channels[i]},
                    {"prior_mean", std::vector<double>(prior_means[i].data(),
                                                       prior_means[i].data() + prior_means[i].size())}});
    j["channels"] = ch;
    return j;
  }

  static MetaModel from_json(const json& j) {
    MetaModel m;
    m.env = j.at("env").get<std::string>();
    m.basis = features::basis_from_json(j.at("basis"));
    for (const auto& c : j.at("channels")) {
      m.channels.push_back(c.at("name").get<std::string>());
      const auto v = c.at("prior_mean").get<std::vector<double>>();
      require(static_cast<int>(v.size()) == m.basis.size(), ErrorKind::DimensionMismatch,
              "model: prior mean size != basis size");
      m.prior_means.push_back(Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return m;
  }

  static MetaModel load(const fs::path& path) {
    require(fs::exists(path), ErrorKind::Io, "model file missing (run meta-train first): " + path.string());
    return from_json(json::parse(io::read_text(path)));
  }

  /// Residual model at the meta-learned prior: mountain car adds to the
  /// velocity, the car channels are normalized front and rear forces.
  mpc::ResidualModel residual() const {
    mpc::ResidualModel r;
    for (std::size_t i = 0; i < channels.size(); ++i)
      r.channels.push_back(mpc::make_channel(channels[i], basis, env == "mountain_car" ? 1 : 0, prior_means[i]));
    return r;
  }
};

inline fs::path tasks_dir(const RunContext& ctx, const std::string& env) {
  return fs::path(ctx.cfg.str("data.dir", ctx.out.string())) / "tasks" / env;
}

inline fs::path model_path(const RunContext& ctx, const std::string& env) {
  return fs::path(ctx.cfg.str("model.dir", (ctx.out / "model").string())) / (env + ".json");
}

// ---- collect

inline ExperimentResult collect_mountain_car(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const auto thetas = c.reals("mountain_car.train_theta1", {0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6});
  const int max_steps = static_cast<int>(c.integer("mountain_car.max_steps", 60));
  const fs::path dir = ctx.out / "tasks" / "mountain_car";
  const fs::path logs = ctx.out / "logs" / "collect_mountain_car";
  fs::create_directories(dir);
  fs::create_directories(logs);
  struct Episode {
    mpc::TrajectoryLog log;
  };
  const auto episodes = parallel_map<Episode>(static_cast<int>(thetas.size()), ctx.threads, [&](int i) {
    const envs::MountainCarParams prm = mountain_car_params(c, thetas[static_cast<std::size_t>(i)]);
    mpc::MountainCarPlant plant(prm, mountain_car_start(c), c.real("mountain_car.goal", 0.6));
    mpc::MountainCarMpc ctrl(prm, mountain_car_mpc_config(c));
    mpc::ResidualModel exact = mpc::exact_mountain_car_residual(prm);
    Rng rng = child_stream(ctx.seed, {sid("collect"), sid("mountain_car"), static_cast<std::uint64_t>(i)});
    return Episode{mpc::run_closed_loop(plant, ctrl, exact, {mpc::AdapterKind::None}, {max_steps, 10}, rng)};
  });
  ExperimentResult r;
  json tasks = json::array();
  bool all_complete = true;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    const auto& log = episodes[i].log;
    const int n = static_cast<int>(log.size());
    meta::TaskDataset t{task_name(static_cast<int>(i)), MatrixXd(n, 1), VectorXd(n)};
    for (int k = 0; k < n; ++k) {
      t.x(k, 0) = log.rows[static_cast<std::size_t>(k)].state(0);
      t.y(k) = log.rows[static_cast<std::size_t>(k)].y(0);
    }
    meta::write_task_csv(dir / (t.task_id + ".csv"), t);
    log.write(logs / (t.task_id + ".csv"));
    tasks.push_back({{"task", t.task_id}, {"theta1", thetas[i]}, {"rows", n}, {"completed", log.completed}});
    all_complete = all_complete && log.completed;
    r.check(n >= 18, t.task_id + " has " + std::to_string(n) + " rows (>= 18)");
  }
  r.report["tasks"] = tasks;
  io::write_text(ctx.out / "collect_mountain_car.json", r.report.dump(2) + "\n");
  require(all_complete, ErrorKind::SolveFailed,
          "collect: a mountain-car episode did not reach the goal; see collect_mountain_car.json");
  return r;
}

inline ExperimentResult collect_car(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const int m = static_cast<int>(c.integer("car.num_tasks", 7));
  const int points = static_cast<int>(c.integer("car.points_per_task", 200));
  const double laps = c.real("car.collect_laps", 2.0);
  const int max_steps = static_cast<int>(c.integer("car.max_steps_per_lap", 600) * std::ceil(laps));
  require(m >= 1 && points >= 1, ErrorKind::InvalidArgument, "car.num_tasks and car.points_per_task must be >= 1");
  const envs::Track track = load_track(c);
  const envs::PacejkaParams base;
  const mpc::MpccConfig mcfg = mpcc_config(c);
  const fs::path dir = ctx.out / "tasks" / "car";
  const fs::path logs = ctx.out / "logs" / "collect_car";
  fs::create_directories(dir);
  fs::create_directories(logs);
  struct Episode {
    envs::PacejkaParams tires;
    mpc::TrajectoryLog log;
  };
  const auto episodes = parallel_map<Episode>(m, ctx.threads, [&](int i) {
    const envs::PacejkaParams tires = envs::make_task_tires(base, i, m, ctx.seed);
    mpc::CarPlant plant(track, envs::CarParams{}, tires, car_plant_config(c, laps), base);
    mpc::MpccController ctrl(track, envs::CarParams{}, mcfg, base, tires);
    mpc::ResidualModel none;
    Rng rng = child_stream(ctx.seed, {sid("collect"), sid("car"), static_cast<std::uint64_t>(i)});
    return Episode{tires, mpc::run_closed_loop(plant, ctrl, none, {mpc::AdapterKind::None}, {max_steps, 50}, rng)};
  });
  ExperimentResult r;
  json tasks = json::array();
  bool all_complete = true;
  for (int i = 0; i < m; ++i) {
    const auto& ep = episodes[static_cast<std::size_t>(i)];
    const std::string name = task_name(i);
    ep.log.write(logs / (name + ".csv"));
    const bool complete = ep.log.completed && static_cast<int>(ep.log.size()) >= points;
    all_complete = all_complete && complete;
    json info = {{"task", name}, {"tires", envs::to_json(ep.tires)}, {"steps", ep.log.size()},
                 {"completed", ep.log.completed}, {"aborted", ep.log.aborted}};
    tasks.push_back(info);
    if (!complete) continue;
    Rng rng = child_stream(ctx.seed, {sid("collect"), sid("car"), static_cast<std::uint64_t>(i), sid("sample")});
    std::vector<int> idx(ep.log.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(points));
    std::sort(idx.begin(), idx.end());
    for (int ch = 0; ch < 2; ++ch) {
      meta::TaskDataset t{name + (ch == 0 ? "_front" : "_rear"), MatrixXd(points, 1), VectorXd(points)};
      for (int k = 0; k < points; ++k) {
        const auto& row = ep.log.rows[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
        t.x(k, 0) = row.z(ch);
        t.y(k) = row.y(ch);
      }
      meta::write_task_csv(dir / (t.task_id + ".csv"), t);
      r.check(t.size() == points, t.task_id + " has " + std::to_string(t.size()) + " rows");
    }
  }
  r.report["tasks"] = tasks;
  io::write_text(ctx.out / "collect_car.json", r.report.dump(2) + "\n");
  require(all_complete, ErrorKind::SolveFailed,
          "collect: a car episode failed or was too short; see collect_car.json");
  return r;
}

inline ExperimentResult collect_tasks(const RunContext& ctx) {
  return env_name(ctx.cfg) == "car" ? collect_car(ctx) : collect_mountain_car(ctx);
}

// ---- meta-train

inline meta::MetaTrainConfig meta_train_config(const Config& c, const std::string& env, std::uint64_t seed) {
  meta::MetaTrainConfig m;
  const bool car = env == "car";
  m.max_iters = static_cast<int>(c.integer("meta.max_iters", car ? 60 : 200));
  m.grad_step = c.real("meta.grad_step", m.grad_step);
  m.initial_step = c.real("meta.initial_step", m.initial_step);
  m.max_task_points = static_cast<int>(c.integer("meta.max_task_points", m.max_task_points));
  const std::string opt = c.str("meta.optimizer", "gd");
  require(opt == "gd" || opt == "rprop", ErrorKind::InvalidArgument, "meta.optimizer must be gd or rprop");
  m.optimizer = opt == "gd" ? meta::Optimizer::GradientDescentWithBacktracking : meta::Optimizer::AdaptivePerParameter;
  m.init.num_inducing = static_cast<int>(c.integer("basis.num_inducing", car ? 14 : 4));
  m.init.lengthscale = c.real("basis.lengthscale", car ? 0.1 : 0.3);
  m.init.signal_var = c.real("basis.signal_var", car ? 1.0 : 0.1);
  m.init.noise_var = c.real("basis.noise_var", car ? 1e-3 : 1e-5);
  m.seed = seed;
  return m;
}

/// Per-channel prior means: the average of the per-task posterior means
/// (tasks grouped by their `_front` / `_rear` suffix for the car), or zero.
inline MetaModel build_model(const std::string& env, const features::BasisSet& basis, const meta::MetaDataset& data,
                             bool task_average) {
  MetaModel model;
  model.env = env;
  model.basis = basis;
  model.channels = env == "car" ? std::vector<std::string>{"front", "rear"} : std::vector<std::string>{"v"};
  for (const auto& ch : model.channels) {
    VectorXd sum = VectorXd::Zero(basis.size());
    int count = 0;
    if (task_average)
      for (const auto& t : data.tasks) {
        const bool match = env != "car" || t.task_id.size() > ch.size() + 1 &&
                                               t.task_id.compare(t.task_id.size() - ch.size(), ch.size(), ch) == 0;
        if (!match || t.size() == 0) continue;
        sum += meta::per_task_posterior(basis, t).mu;
        ++count;
      }
    model.prior_means.push_back(count > 0 ? (sum / count).eval() : sum);
  }
  return model;
}

inline bool trace_non_increasing(const std::vector<meta::TraceRow>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i)
    if (trace[i].loss > trace[i - 1].loss) return false;
  return true;
}

inline ExperimentResult meta_train_experiment(const RunContext& ctx) {
  const std::string env = env_name(ctx.cfg);
  const meta::MetaDataset data = meta::load_meta_dataset(tasks_dir(ctx, env));
  require(!data.tasks.empty(), ErrorKind::Io, "meta-train: no task files (run collect first)");
  const meta::MetaTrainConfig mcfg = meta_train_config(ctx.cfg, env, ctx.seed);
  const features::BasisSet basis0 = meta::initial_sor_basis(data, mcfg.init);
  const meta::MetaTrainResult res = meta::meta_train(data, mcfg, basis0);
  const MetaModel model = build_model(env, res.basis, data, ctx.cfg.str("prior.mean", "task_average") == "task_average");
  const fs::path dir = model_path(ctx, env).parent_path();
  fs::create_directories(dir);
  io::write_text(model_path(ctx, env), model.to_json().dump(2) + "\n");
  meta::write_loss_trace(dir / (env + "_trace.csv"), res.trace);
  ExperimentResult r;
  const double first = res.trace.front().loss, last = res.trace.back().loss;
  r.report = {{"env", env},          {"tasks", data.tasks.size()},
              {"iterations", res.trace.size() - 1}, {"initial_loss", first},
              {"final_loss", last},  {"noise_var", res.basis.kernel.noise_var()}};
  r.check(trace_non_increasing(res.trace), env + " loss trace non-increasing");
  r.check(last < first, env + " final loss " + io::num(last) + " < initial " + io::num(first));
  return r;
}

// ---- ELBO scan

inline std::vector<double> scan_grid(double lo, double hi, double step) {
  require(step > 0.0 && hi >= lo, ErrorKind::InvalidArgument, "elbo-scan: need step > 0 and hi >= lo");
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> g;
  for (long i = 0; i < n; ++i) g.push_back(lo + static_cast<double>(i) * step);
  return g;
}

struct ScanPoint {
  double value;
  double neg_elbo;
};

inline std::vector<ScanPoint> elbo_scan(const features::BasisSet& basis, const meta::MetaDataset& data,
                                        const std::string& param, const std::vector<double>& grid) {
  std::vector<ScanPoint> out;
  meta::ElboWorkspace ws;
  for (double v : grid) {
    features::BasisSet b = basis;
    if (param == "cosine_freq") {
      require(b.kind == features::BasisKind::ParametricCosine, ErrorKind::InvalidArgument,
              "elbo-scan: cosine_freq needs the cosine basis");
      b.cosine_freq = v;
    } else if (param == "lengthscale" || param == "signal_var" || param == "noise_var") {
      require(v > 0.0, ErrorKind::InvalidArgument, "elbo-scan: " + param + " values must be > 0");
      if (param == "lengthscale")
        b.kernel.log_lengthscale.setConstant(std::log(v));
      else if (param == "signal_var")
        b.kernel.log_signal_var = std::log(v);
      else
        b.kernel.log_noise_var = std::log(v);
    } else {
      throw Error(ErrorKind::InvalidArgument, "elbo-scan: unknown parameter " + param);
    }
    out.push_back({v, meta::negative_elbo(b, data, ws)});
  }
  return out;
}

inline std::vector<double> local_minima(const std::vector<ScanPoint>& curve) {
  std::vector<double> m;
  for (std::size_t i = 1; i + 1 < curve.size(); ++i)
    if (curve[i].neg_elbo < curve[i - 1].neg_elbo && curve[i].neg_elbo < curve[i + 1].neg_elbo)
      m.push_back(curve[i].value);
  return m;
}

/// max |f(v) - f(-v)| over mirrored grid points, relative to the curve range.
inline double symmetry_error(const std::vector<ScanPoint>& curve) {
  double lo = curve.front().neg_elbo, hi = lo, worst = 0.0;
  for (const auto& p : curve) {
    lo = std::min(lo, p.neg_elbo);
    hi = std::max(hi, p.neg_elbo);
  }
  for (std::size_t i = 0, j = curve.size() - 1; i < j; ++i, --j)
    if (std::abs(curve[i].value + curve[j].value) < 1e-9)
      worst = std::max(worst, std::abs(curve[i].neg_elbo - curve[j].neg_elbo));
  return hi > lo ? worst / (hi - lo) : 0.0;
}

inline ExperimentResult elbo_scan_experiment(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const meta::MetaDataset data = meta::load_meta_dataset(tasks_dir(ctx, "mountain_car"));
  require(!data.tasks.empty(), ErrorKind::Io, "elbo-scan: no mountain-car task files (run collect first)");
  const std::string param = c.str("elbo.param", "cosine_freq");
  const double noise_std = c.real("mountain_car.noise_std", 0.001);
  const features::BasisSet basis = features::BasisSet::parametric_cosine(
      c.real("mountain_car.T_s", 0.2), c.real("elbo.cosine_freq", 3.0),
      features::KernelHyper::make(VectorXd::Constant(1, c.real("elbo.lengthscale", 0.3)),
                                  c.real("elbo.signal_var", 0.01), c.real("elbo.noise_var", noise_std * noise_std)),
      c.real("elbo.prior_var", 1.0));
  const auto grid = scan_grid(c.real("elbo.lo", -5.0), c.real("elbo.hi", 5.0), c.real("elbo.step", 0.1));
  const auto curve = elbo_scan(basis, data, param, grid);
  fs::create_directories(ctx.out);
  io::CsvWriter w(ctx.out / "elbo_scan.csv", {"value", "neg_elbo"});
  for (const auto& p : curve) w.row({p.value, p.neg_elbo});
  ExperimentResult r;
  const auto minima = local_minima(curve);
  const double sym = symmetry_error(curve);
  r.report = {{"param", param}, {"points", curve.size()}, {"local_minima", minima}, {"symmetry_error", sym}};
  if (param == "cosine_freq" && grid.size() > 2) {
    const bool two = minima.size() == 2;
    r.check(two, "exactly two local minima (found " + std::to_string(minima.size()) + ")");
    if (two) {
      r.check(std::abs(minima[0] + 3.0) <= 0.2 + 1e-9 && std::abs(minima[1] - 3.0) <= 0.2 + 1e-9,
              "minima at " + io::num(minima[0]) + ", " + io::num(minima[1]) + " (want -3, 3 within 0.2)");
    }
    r.check(sym <= 0.02, "symmetry error " + io::num(sym) + " <= 0.02 of range");
  }
  return r;
}

// ---- meta-test (mountain car)

struct FitSummary {
  double coverage = 0.0;
  double final_rmse = 0.0;
  int points = 0;
};

/// Sequential recursive updates along (p_k, y_k); before each update the
/// noise-free truth is tested against mean +- 2 sqrt(epistemic + noise
/// variance). RMSE of the final posterior mean against the truth.
inline FitSummary sequential_fit(mpc::ResidualChannel ch, const mpc::TrajectoryLog& rec,
                                 std::vector<std::array<double, 5>>* rows = nullptr) {
  FitSummary s;
  int inside = 0;
  for (const auto& row : rec.rows) {
    const VectorXd z = VectorXd::Constant(1, row.z(0));
    const VectorXd phi = features::features(ch.basis, z);
    const double mean = phi.dot(ch.posterior.mu);
    const double sd = std::sqrt(std::max(0.0, phi.dot(ch.posterior.sigma * phi)) + ch.noise_var);
    if (std::abs(row.truth(0) - mean) <= 2.0 * sd) ++inside;
    if (rows) rows->push_back({row.z(0), row.y(0), row.truth(0), mean, sd});
    mpc::adapt(ch, z, row.y(0), {mpc::AdapterKind::Recursive});
    ++s.points;
  }
  double sq = 0.0;
  for (const auto& row : rec.rows) {
    const double e = ch.mean(VectorXd::Constant(1, row.z(0))) - row.truth(0);
    sq += e * e;
  }
  s.coverage = s.points ? static_cast<double>(inside) / s.points : 0.0;
  s.final_rmse = s.points ? std::sqrt(sq / s.points) : 0.0;
  return s;
}

inline ExperimentResult meta_test_experiment(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const MetaModel model = MetaModel::load(model_path(ctx, "mountain_car"));
  const auto thetas = c.reals("mountain_car.test_theta1", {0.65, 0.9, 1.3});
  const int seeds = static_cast<int>(c.integer("meta_test.seeds", 10));
  const int max_steps = static_cast<int>(c.integer("mountain_car.max_steps", 60));
  const double goal = c.real("mountain_car.goal", 0.6);
  const double min_coverage = c.real("meta_test.min_coverage", 0.9);
  const double max_rmse = c.real("meta_test.max_rmse", 0.01);
  const mpc::AdapterConfig adapter = adapter_config(c, "meta_test.adapt");
  const fs::path dir = ctx.out / "meta_test";
  fs::create_directories(dir);
  ExperimentResult r;
  json tasks = json::array();
  for (std::size_t j = 0; j < thetas.size(); ++j) {
    const envs::MountainCarParams prm = mountain_car_params(c, thetas[j]);
    const std::string name = task_name(static_cast<int>(j));

    // Recorded trajectory from the ground-truth controller, then sequential fit.
    mpc::MountainCarPlant rec_plant(prm, mountain_car_start(c), goal);
    mpc::MountainCarMpc rec_ctrl(prm, mountain_car_mpc_config(c));
    mpc::ResidualModel exact = mpc::exact_mountain_car_residual(prm);
    Rng rec_rng = child_stream(ctx.seed, {sid("meta-test"), static_cast<std::uint64_t>(j), sid("record")});
    const mpc::TrajectoryLog rec =
        mpc::run_closed_loop(rec_plant, rec_ctrl, exact, {mpc::AdapterKind::None}, {max_steps, 10}, rec_rng);
    std::vector<std::array<double, 5>> fit_rows;
    const FitSummary fit = sequential_fit(model.residual().channels[0], rec, &fit_rows);
    {
      io::CsvWriter w(dir / (name + "_fit.csv"), {"p", "y", "truth", "pred_mean", "pred_std"});
      for (const auto& fr : fit_rows) w.row(fr);
    }

    // Adaptive closed loop over seeds.
    struct Run {
      mpc::TrajectoryLog log;
      double final_p = 0.0;
    };
    const auto runs = parallel_map<Run>(seeds, ctx.threads, [&](int s) {
      mpc::MountainCarPlant plant(prm, mountain_car_start(c), goal);
      mpc::MountainCarMpc ctrl(prm, mountain_car_mpc_config(c));
      mpc::ResidualModel res = model.residual();
      Rng rng = child_stream(ctx.seed, {sid("meta-test"), static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(s)});
      mpc::TrajectoryLog log = mpc::run_closed_loop(plant, ctrl, res, adapter, {max_steps, 10}, rng);
      return Run{std::move(log), plant.state_vector()(0)};
    });
    int reached = 0;
    json steps = json::array();
    for (int s = 0; s < seeds; ++s) {
      const auto& run = runs[static_cast<std::size_t>(s)];
      run.log.write(dir / (name + "_seed_" + std::to_string(s) + ".csv"));
      reached += run.final_p >= goal ? 1 : 0;
      steps.push_back(run.log.size());
    }
    tasks.push_back({{"task", name},
                     {"theta1", thetas[j]},
                     {"coverage", fit.coverage},
                     {"final_rmse", fit.final_rmse},
                     {"fit_points", fit.points},
                     {"reached", reached},
                     {"seeds", seeds},
                     {"steps", steps}});
    r.check(fit.coverage >= min_coverage,
            name + " coverage " + io::num(fit.coverage) + " >= " + io::num(min_coverage));
    r.check(fit.final_rmse <= max_rmse, name + " final rmse " + io::num(fit.final_rmse) + " <= " + io::num(max_rmse));
    r.check(reached == seeds, name + " reached goal in " + std::to_string(reached) + "/" + std::to_string(seeds) +
                                  " seeds within " + std::to_string(max_steps) + " steps");
  }
  r.report["tasks"] = tasks;
  io::write_text(dir / "summary.json", r.report.dump(2) + "\n");
  return r;
}

// ---- race

struct RaceSeed {
  mpc::TrajectoryLog truth, adaptive, baseline;
  double rmse_adaptive = 0.0;
  double rmse_baseline = 0.0;
};

/// Runs the ground-truth, adaptive and non-adaptive controllers on the same
/// noise realization (common random numbers).
inline RaceSeed race_seed(const RunContext& ctx, const MetaModel& model, const envs::Track& track,
                          const envs::PacejkaParams& tires, int s, double laps, const mpc::GripSchedule& grip,
                          const mpc::AdapterConfig& adapter) {
  const Config& c = ctx.cfg;
  const envs::PacejkaParams norm;
  const mpc::MpccConfig mcfg = mpcc_config(c);
  const int max_steps = static_cast<int>(c.integer("car.max_steps_per_lap", 600) * std::ceil(laps));
  const Rng base_rng = child_stream(ctx.seed, {sid("race"), static_cast<std::uint64_t>(s)});
  auto run = [&](std::optional<envs::PacejkaParams> fixed, mpc::ResidualModel res, const mpc::AdapterConfig& a) {
    mpc::CarPlant plant(track, envs::CarParams{}, tires, car_plant_config(c, laps), norm, grip);
    mpc::MpccController ctrl(track, envs::CarParams{}, mcfg, norm, fixed);
    Rng rng = base_rng;
    return mpc::run_closed_loop(plant, ctrl, res, a, {max_steps, 50}, rng);
  };
  RaceSeed out;
  out.truth = run(tires, model.residual(), {mpc::AdapterKind::None});
  out.adaptive = run(std::nullopt, model.residual(), adapter);
  out.baseline = run(std::nullopt, model.residual(), {mpc::AdapterKind::None});
  out.rmse_adaptive = rmse_vs_ground_truth(out.adaptive, out.truth);
  out.rmse_baseline = rmse_vs_ground_truth(out.baseline, out.truth);
  return out;
}

inline ExperimentResult race_experiment(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const MetaModel model = MetaModel::load(model_path(ctx, "car"));
  const envs::Track track = load_track(c);
  const envs::PacejkaParams tires = car_test_tires(c, ctx.seed, c.real("race.grip", 0.7));
  const int seeds = static_cast<int>(c.integer("race.seeds", 30));
  const mpc::AdapterConfig adapter = adapter_config(c, "race.adapt", "sgd", kCarSgdEta);
  require(seeds >= 1, ErrorKind::InvalidArgument, "race.seeds must be >= 1");
  const auto results = parallel_map<RaceSeed>(seeds, ctx.threads, [&](int s) {
    return race_seed(ctx, model, track, tires, s, 1.0, {}, adapter);
  });
  const fs::path dir = ctx.out / "race";
  fs::create_directories(dir);
  const bool write_logs = c.flag("race.write_logs", true);
  io::CsvWriter w(dir / "rmse.csv", {"seed", "adaptive", "baseline", "adaptive_completed", "baseline_completed"});
  std::vector<double> ra, rb;
  int completed = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto& res = results[static_cast<std::size_t>(s)];
    const std::string stem = "seed_" + std::to_string(s);
    if (write_logs) {
      res.truth.write(dir / (stem + "_truth.csv"));
      res.adaptive.write(dir / (stem + "_adaptive.csv"));
      res.baseline.write(dir / (stem + "_baseline.csv"));
    }
    w.row({static_cast<double>(s), res.rmse_adaptive, res.rmse_baseline, res.adaptive.completed ? 1.0 : 0.0,
           res.baseline.completed ? 1.0 : 0.0});
    ra.push_back(res.rmse_adaptive);
    rb.push_back(res.rmse_baseline);
    completed += res.adaptive.completed ? 1 : 0;
  }
  const RmseReport a = RmseReport::from(ra), b = RmseReport::from(rb);
  ExperimentResult r;
  r.report = {{"tires", envs::to_json(tires)}, {"adaptive", a.to_json()}, {"baseline", b.to_json()},
              {"adaptive_completed", completed}, {"seeds", seeds}};
  io::write_text(dir / "report.json", r.report.dump(2) + "\n");
  r.check(a.median < 0.5 * b.median,
          "median rmse adaptive " + io::num(a.median) + " < 0.5 x baseline " + io::num(b.median));
  r.check(completed == seeds, "adaptive completed the lap in " + std::to_string(completed) + "/" +
                                  std::to_string(seeds) + " seeds");
  return r;
}

// ---- grip change

struct GripChangeReport {
  // [lap][half] residual prediction RMSE over both channels; NaN when empty.
  std::array<std::array<double, 2>, 2> rmse{};
  std::array<std::array<int, 2>, 2> count{};
  bool completed = false;
  bool lap2_inside = true;
  double lap2_max_abs_e = 0.0;
};

inline GripChangeReport grip_change_report(const mpc::TrajectoryLog& log, const envs::Track& track, double split) {
  GripChangeReport g;
  std::array<std::array<double, 2>, 2> sq{};
  for (const auto& row : log.rows) {
    const double s = row.state(6);
    const int lap = static_cast<int>(std::floor(s / track.length()));
    if (lap < 0 || lap > 1) continue;
    const int half = track.wrap(s) / track.length() >= split ? 1 : 0;
    for (Eigen::Index ch = 0; ch < row.pred_mean.size(); ++ch) {
      if (!std::isfinite(row.pred_mean(ch)) || !std::isfinite(row.truth(ch))) continue;
      const double e = row.pred_mean(ch) - row.truth(ch);
      sq[static_cast<std::size_t>(lap)][static_cast<std::size_t>(half)] += e * e;
      ++g.count[static_cast<std::size_t>(lap)][static_cast<std::size_t>(half)];
    }
    if (lap == 1) {
      g.lap2_max_abs_e = std::max(g.lap2_max_abs_e, std::abs(row.state(7)));
      g.lap2_inside = g.lap2_inside && std::abs(row.state(7)) <= track.half_width();
    }
  }
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      g.rmse[l][h] = g.count[l][h] ? std::sqrt(sq[l][h] / g.count[l][h]) : std::numeric_limits<double>::quiet_NaN();
  g.completed = log.completed;
  return g;
}

inline ExperimentResult grip_change_experiment(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  const MetaModel model = MetaModel::load(model_path(ctx, "car"));
  const envs::Track track = load_track(c);
  const envs::PacejkaParams tires = car_test_tires(c, ctx.seed, c.real("grip.base", 1.0));
  const double laps = c.real("grip.laps", 2.0);
  const mpc::GripSchedule schedule{c.real("grip.split", 0.5), c.real("grip.factor", 0.64)};
  require(schedule.split > 0.0 && schedule.split < 1.0 && schedule.second_half_grip > 0.0,
          ErrorKind::InvalidArgument, "grip.split must lie in (0, 1) and grip.factor > 0");
  const mpc::AdapterConfig adapter = adapter_config(c, "grip.adapt", "sgd", kCarSgdEta);
  const int seed_index = static_cast<int>(c.integer("grip.episode", 0));
  const mpc::MpccConfig mcfg = mpcc_config(c);
  const int max_steps = static_cast<int>(c.integer("car.max_steps_per_lap", 600) * std::ceil(laps));
  const envs::PacejkaParams norm;
  mpc::CarPlant plant(track, envs::CarParams{}, tires, car_plant_config(c, laps), norm, schedule);
  mpc::MpccController ctrl(track, envs::CarParams{}, mcfg, norm);
  mpc::ResidualModel res = model.residual();
  Rng rng = child_stream(ctx.seed, {sid("race"), static_cast<std::uint64_t>(seed_index)});
  const mpc::TrajectoryLog log = mpc::run_closed_loop(plant, ctrl, res, adapter, {max_steps, 50}, rng);
  const fs::path dir = ctx.out / "grip_change";
  fs::create_directories(dir);
  log.write(dir / "run.csv");
  log.write_prediction_csv(dir / "predictions.csv");
  const GripChangeReport g = grip_change_report(log, track, schedule.split);
  ExperimentResult r;
  r.report = {{"tires", envs::to_json(tires)},
              {"grip_factor", schedule.second_half_grip},
              {"split", schedule.split},
              {"rmse_lap1_first_half", g.rmse[0][0]},
              {"rmse_lap1_second_half", g.rmse[0][1]},
              {"rmse_lap2_first_half", g.rmse[1][0]},
              {"rmse_lap2_second_half", g.rmse[1][1]},
              {"completed", g.completed},
              {"aborted", log.aborted},
              {"lap2_inside_bounds", g.lap2_inside},
              {"lap2_max_abs_e_lat", g.lap2_max_abs_e}};
  io::write_text(dir / "report.json", r.report.dump(2) + "\n");
  r.check(g.count[1][1] > 0 && g.rmse[1][1] < 0.5 * g.rmse[0][1],
          "second-half rmse lap 2 " + io::num(g.rmse[1][1]) + " < 0.5 x lap 1 " + io::num(g.rmse[0][1]));
  r.check(g.completed, "completed " + io::num(laps) + " laps");
  r.check(g.count[1][0] + g.count[1][1] > 0 && g.lap2_inside,
          "inside track bounds throughout lap 2 (max |e_lat| " + io::num(g.lap2_max_abs_e) + ")");
  return r;
}

// ---- rmse between two stored logs

inline ExperimentResult rmse_experiment(const RunContext& ctx) {
  const Config& c = ctx.cfg;
  ExperimentResult r;
  if (c.has("rmse.run")) {
    require(c.has("rmse.ref"), ErrorKind::InvalidArgument, "rmse: rmse.ref missing");
    const double v = rmse_from_csv(c.str("rmse.run", ""), c.str("rmse.ref", ""));
    r.report = {{"run", c.str("rmse.run", "")}, {"ref", c.str("rmse.ref", "")}, {"rmse", v}};
  } else {
    const fs::path table = c.str("rmse.table", (ctx.out / "race" / "rmse.csv").string());
    const io::CsvTable t = io::read_csv(table);
    for (std::size_t j = 1; j < t.header.size(); ++j) {
      if (t.header[j].find("completed") != std::string::npos) continue;
      std::vector<double> v(t.rows.col(static_cast<Eigen::Index>(j)).data(),
                            t.rows.col(static_cast<Eigen::Index>(j)).data() + t.rows.rows());
      r.report[t.header[j]] = RmseReport::from(v).to_json();
    }
  }
  fs::create_directories(ctx.out);
  io::write_text(ctx.out / "rmse_report.json", r.report.dump(2) + "\n");
  return r;
}

// ---- dispatch

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"collect", "meta-train", "elbo-scan", "meta-test",
                                              "race",    "grip-change", "rmse"};
  return names;
}

inline ExperimentResult run_experiment(const std::string& name, const RunContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(ctx.out);
  ExperimentResult r;
  if (name == "collect")
    r = collect_tasks(ctx);
  else if (name == "meta-train")
    r = meta_train_experiment(ctx);
  else if (name == "elbo-scan")
    r = elbo_scan_experiment(ctx);
  else if (name == "meta-test")
    r = meta_test_experiment(ctx);
  else if (name == "race")
    r = race_experiment(ctx);
  else if (name == "grip-change")
    r = grip_change_experiment(ctx);
  else if (name == "rmse")
    r = rmse_experiment(ctx);
  else
    throw Error(ErrorKind::InvalidArgument, "unknown experiment " + name);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string tag = name;
  if (name == "collect" || name == "meta-train") tag += "_" + env_name(ctx.cfg);
  write_manifest(ctx, tag, secs, r);
  return r;
}

}  // namespace mlmpc::harness
