#ifndef DACBF_CLOSED_LOOP_HPP
#define DACBF_CLOSED_LOOP_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dacbf/adaptive_selector.hpp"
#include "dacbf/barrier_qp.hpp"
#include "dacbf/certificate.hpp"
#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"
#include "dacbf/unicycle.hpp"

namespace dacbf {

struct Scenario {
  std::string name;
  RobotState start;
  double goal_x = 0.0;
  double goal_y = 0.0;
  std::vector<Obstacle> obstacles;
  double horizon = 30.0;
  double dt = 0.05;
  double goal_tol = 0.3;

  void validate() const {
    if (!(dt > 0.0 && horizon > 0.0)) throw std::invalid_argument("Scenario " + name + ": dt and horizon must be > 0");
    for (const auto& o : obstacles) {
      if (!(o.radius > 0.0)) throw std::invalid_argument("Scenario " + name + ": obstacle radius must be > 0");
      if (eval_barrier(start, o).h <= 0.0) throw std::invalid_argument("Scenario " + name + ": start inside an obstacle");
      if (std::hypot(goal_x - o.cx, goal_y - o.cy) <= o.radius)
        throw std::invalid_argument("Scenario " + name + ": goal inside an obstacle");
    }
  }
};

enum class ControllerKind { Fixed, Learned, Oracle };

struct ControllerSpec {
  std::string name;
  ControllerKind kind = ControllerKind::Fixed;
  GammaPair gamma;                       // Fixed only
  const EnsembleModel* model = nullptr;  // Learned only; not owned

  static ControllerSpec fixed(std::string n, double g) { return {std::move(n), ControllerKind::Fixed, {g, g}, nullptr}; }
  static ControllerSpec learned(std::string n, const EnsembleModel& m) {
    return {std::move(n), ControllerKind::Learned, {}, &m};
  }
  static ControllerSpec oracle(std::string n = "oracle") { return {std::move(n), ControllerKind::Oracle, {}, nullptr}; }
};

/// Everything a controller needs besides the scenario.
struct BenchConfig {
  GenerationConfig gen;  // nominal controller, input box, feature ranges, oracle labels
  CandidateGrid grid = CandidateGrid::uniform(DomainBounds{});
  SelectorParams selector;
};

enum class EpisodeOutcome { Reached, Deadlock, Timeout };

inline const char* to_string(EpisodeOutcome o) {
  switch (o) {
    case EpisodeOutcome::Reached: return "reached";
    case EpisodeOutcome::Deadlock: return "deadlock";
    case EpisodeOutcome::Timeout: return "timeout";
  }
  return "?";
}

struct EpisodeResult {
  std::string scenario;
  std::string controller;
  std::vector<RobotState> trajectory;
  std::vector<GammaPair> gamma_trace;
  int collisions = 0;
  bool deadlock = false;
  EpisodeOutcome outcome = EpisodeOutcome::Timeout;
  double min_h = std::numeric_limits<double>::infinity();
  double time_to_goal = 0.0;  // horizon when not reached
  int infeasible_steps = 0;
  // min over steps with the nearest obstacle inside [d_min, d_max] of sup_u psi
  double min_margin = std::numeric_limits<double>::infinity();
};

/// Relative features of the robot against one obstacle, clamped into the
/// generation box where the predictor was trained.
inline Features clamped_features(const RobotState& s, const Obstacle& o, const GenerationConfig& g) {
  return {std::clamp(obstacle_distance(s, o), g.d_lo, g.d_hi), std::clamp(s.v, g.v_lo, g.v_hi),
          std::clamp(relative_heading(s, o), g.theta_lo, g.theta_hi)};
}

inline GammaPair choose_gamma(const ControllerSpec& c, const Features& f, const BenchConfig& cfg) {
  switch (c.kind) {
    case ControllerKind::Fixed: return c.gamma;
    case ControllerKind::Learned:
      if (!c.model) throw std::invalid_argument("controller " + c.name + ": missing model");
      return smooth_select(f, *c.model, cfg.grid, cfg.selector).selection.gamma;
    case ControllerKind::Oracle: return oracle_select(f, cfg.grid, cfg.selector, cfg.gen).gamma;
  }
  return c.gamma;
}

/// Each step: constrain against the nearest obstacle by h, pick gamma, filter
/// the nominal input through the CBF-QP, integrate. Collisions are counted per
/// obstacle on each entry into h < 0 and re-armed once h is positive again.
inline EpisodeResult run_episode(const Scenario& sc, const ControllerSpec& c, const BenchConfig& cfg) {
  sc.validate();
  EpisodeResult r;
  r.scenario = sc.name;
  r.controller = c.name;
  RobotState st = sc.start;
  const int steps = static_cast<int>(std::lround(sc.horizon / sc.dt));
  std::vector<bool> inside(sc.obstacles.size(), false);
  r.time_to_goal = sc.horizon;

  for (int k = 0; k <= steps; ++k) {
    r.trajectory.push_back(st);
    std::size_t nearest = 0;
    double nearest_h = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < sc.obstacles.size(); ++j) {
      const double h = eval_barrier(st, sc.obstacles[j]).h;
      r.min_h = std::min(r.min_h, h);
      if (h < 0.0 && !inside[j]) ++r.collisions;
      inside[j] = h < 0.0;
      if (h < nearest_h) {
        nearest_h = h;
        nearest = j;
      }
    }
    if (std::hypot(st.x - sc.goal_x, st.y - sc.goal_y) <= sc.goal_tol) {
      r.outcome = EpisodeOutcome::Reached;
      r.time_to_goal = k * sc.dt;
      break;
    }
    if (k == steps) break;

    const auto u_nom = cfg.gen.nominal(st, sc.goal_x, sc.goal_y, cfg.gen.input_bounds);
    ControlInput u = u_nom;
    if (!sc.obstacles.empty()) {
      const auto& obs = sc.obstacles[nearest];
      const auto g = choose_gamma(c, clamped_features(st, obs, cfg.gen), cfg);
      r.gamma_trace.push_back(g);
      const auto be = eval_barrier(st, obs);
      const auto qp = build_qp(be, u_nom, g, cfg.gen.input_bounds);
      const auto fc = filter_control(qp);
      if (fc.infeasible) ++r.infeasible_steps;
      if (cfg.gen.domain.contains_distance(obstacle_distance(st, obs)))
        r.min_margin = std::min(r.min_margin, margin_max(qp));
      u = fc.u;
    }
    st = step(st, u, sc.dt);
  }

  if (r.outcome != EpisodeOutcome::Reached) {
    const int window = std::min<int>(static_cast<int>(r.trajectory.size()), static_cast<int>(std::lround(2.0 / sc.dt)));
    double mean_speed = 0.0;
    for (int i = 0; i < window; ++i) mean_speed += std::abs(r.trajectory[r.trajectory.size() - 1 - i].v);
    mean_speed /= std::max(window, 1);
    r.deadlock = mean_speed < 0.05;
    r.outcome = r.deadlock ? EpisodeOutcome::Deadlock : EpisodeOutcome::Timeout;
  }
  return r;
}

// ---- layouts -----------------------------------------------------------------------

inline constexpr double kObstacleRadius = 0.3;
inline constexpr double kRobotRadius = 0.2;

inline Obstacle inflated(double x, double y) { return {x, y, kObstacleRadius + kRobotRadius}; }

struct StandardLayouts {
  Scenario simple;
  Scenario complex;
};

/// simple: three obstacles near the diagonal of a 10 x 10 m field.
/// complex: 4 x 4 staggered grid; physical gaps 1.3 m in a row, ~1.5 m across
/// rows, shifted so the start-goal diagonal clears every center by >= 0.33 m.
/// Both start at half speed, heading at the goal.
inline StandardLayouts build_standard_layouts() {
  StandardLayouts L;
  L.simple.name = "simple";
  L.simple.start = {1.0, 1.0, std::numbers::pi / 4.0, 0.5};
  L.simple.goal_x = 9.0;
  L.simple.goal_y = 9.0;
  L.simple.obstacles = {inflated(4.35, 3.7), inflated(7.86, 6.54), inflated(3.45, 4.28)};
  L.simple.horizon = 30.0;

  L.complex.name = "complex16";
  L.complex.start = {0.5, 0.5, std::numbers::pi / 4.0, 0.5};
  L.complex.goal_x = 9.5;
  L.complex.goal_y = 9.5;
  for (int row = 0; row < 4; ++row)
    for (int col = 0; col < 4; ++col)
      L.complex.obstacles.push_back(inflated(2.675 + 1.9 * col + (row % 2 ? 0.95 : 0.0), 2.2 + 1.9 * row));
  L.complex.horizon = 40.0;
  return L;
}

/// One obstacle between start and goal, offset laterally by a seeded amount.
inline Scenario single_obstacle_scenario(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x51A6ULL));
  Scenario sc;
  sc.name = "single";
  sc.start = {0.0, 0.0, 0.0, rng.uniform(0.0, 0.5)};
  sc.goal_x = 8.0;
  sc.goal_y = 0.0;
  sc.obstacles = {inflated(rng.uniform(3.0, 5.0), rng.uniform(-0.6, 0.6))};
  sc.horizon = 25.0;
  return sc;
}

// ---- suites -----------------------------------------------------------------------

struct SuiteRow {
  std::string scenario;
  std::string controller;
  int episodes = 0;
  int collisions = 0;
  double deadlock_rate = 0.0;
  double mean_time_to_goal = 0.0;
  double mean_min_h = 0.0;
  int infeasible_steps = 0;
};

struct SuiteResult {
  std::vector<EpisodeResult> episodes;  // scenario-major, then controller
  std::vector<SuiteRow> rows;
};

/// Runs every (scenario, controller) pair; rows aggregate per pair.
inline SuiteResult run_suite(const std::vector<Scenario>& scenarios, const std::vector<ControllerSpec>& controllers,
                             const BenchConfig& cfg, unsigned jobs = 1) {
  if (scenarios.empty() || controllers.empty()) throw std::invalid_argument("run_suite: empty scenario or controller list");
  SuiteResult res;
  const std::size_t n = scenarios.size() * controllers.size();
  res.episodes.resize(n);
  auto work = [&](unsigned w, unsigned stride) {
    for (std::size_t i = w; i < n; i += stride)
      res.episodes[i] = run_episode(scenarios[i / controllers.size()], controllers[i % controllers.size()], cfg);
  };
  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(work, w, jobs);
    for (auto& t : pool) t.join();
  }
  // rows keyed by (scenario name, controller) in first-seen order
  for (const auto& e : res.episodes) {
    auto it = std::find_if(res.rows.begin(), res.rows.end(),
                           [&](const SuiteRow& r) { return r.scenario == e.scenario && r.controller == e.controller; });
    if (it == res.rows.end()) {
      res.rows.push_back({e.scenario, e.controller});
      it = res.rows.end() - 1;
    }
    ++it->episodes;
    it->collisions += e.collisions;
    it->deadlock_rate += e.deadlock;
    it->mean_time_to_goal += e.time_to_goal;
    it->mean_min_h += e.min_h;
    it->infeasible_steps += e.infeasible_steps;
  }
  for (auto& r : res.rows) {
    r.deadlock_rate /= r.episodes;
    r.mean_time_to_goal /= r.episodes;
    r.mean_min_h /= r.episodes;
  }
  return res;
}

inline nlohmann::json to_json(const EpisodeResult& e) {
  nlohmann::json traj = nlohmann::json::array();
  for (const auto& s : e.trajectory) traj.push_back({s.x, s.y, s.theta, s.v});
  nlohmann::json gam = nlohmann::json::array();
  for (const auto& g : e.gamma_trace) gam.push_back({g.g0, g.g1});
  return {{"scenario", e.scenario},
          {"controller", e.controller},
          {"collisions", e.collisions},
          {"deadlock", e.deadlock},
          {"outcome", to_string(e.outcome)},
          {"min_h", std::isfinite(e.min_h) ? nlohmann::json(e.min_h) : nlohmann::json(nullptr)},
          {"time_to_goal", e.time_to_goal},
          {"infeasible_steps", e.infeasible_steps},
          {"min_margin", std::isfinite(e.min_margin) ? nlohmann::json(e.min_margin) : nlohmann::json(nullptr)},
          {"trajectory", traj},
          {"gamma_trace", gam}};
}

inline void write_trajectory_csv(const EpisodeResult& e, double dt, std::ostream& os) {
  os << "t,x,y,theta,v,gamma0,gamma1\n";
  for (std::size_t i = 0; i < e.trajectory.size(); ++i) {
    const auto& s = e.trajectory[i];
    os << i * dt << ',' << s.x << ',' << s.y << ',' << s.theta << ',' << s.v;
    if (i < e.gamma_trace.size())
      os << ',' << e.gamma_trace[i].g0 << ',' << e.gamma_trace[i].g1;
    else
      os << ",,";
    os << '\n';
  }
}

}  // namespace dacbf

#endif  // DACBF_CLOSED_LOOP_HPP
