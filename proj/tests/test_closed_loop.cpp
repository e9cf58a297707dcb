#include <cmath>

#include <gtest/gtest.h>

#include "dacbf/closed_loop.hpp"

using namespace dacbf;

namespace {

double gap(const Obstacle& a, const Obstacle& b) {
  // physical clearance between the un-inflated discs
  return std::hypot(a.cx - b.cx, a.cy - b.cy) - 2.0 * kObstacleRadius;
}

// Distance from point (px, py) to the segment (ax, ay)-(bx, by).
double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double t = std::clamp(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
  return std::hypot(px - ax - t * dx, py - ay - t * dy);
}

}  // namespace

TEST(Layouts, ComplexHasSixteenPassableObstacles) {
  const auto L = build_standard_layouts();
  const auto& c = L.complex;
  ASSERT_EQ(c.obstacles.size(), 16u);
  double min_gap = INFINITY;
  for (std::size_t i = 0; i < c.obstacles.size(); ++i)
    for (std::size_t j = i + 1; j < c.obstacles.size(); ++j) min_gap = std::min(min_gap, gap(c.obstacles[i], c.obstacles[j]));
  EXPECT_GE(min_gap, 2.0 * kRobotRadius);
  for (const auto& o : c.obstacles) {
    EXPECT_DOUBLE_EQ(o.radius, 0.5);
    EXPECT_GE(o.cx - kObstacleRadius, 0.0);
    EXPECT_LE(o.cx + kObstacleRadius, 10.0);
    EXPECT_GE(o.cy - kObstacleRadius, 0.0);
    EXPECT_LE(o.cy + kObstacleRadius, 10.0);
    EXPECT_GE(segment_distance(o.cx, o.cy, c.start.x, c.start.y, c.goal_x, c.goal_y), 0.33 - 1e-9);
  }
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(L.simple.validate());
  EXPECT_EQ(L.simple.obstacles.size(), 3u);
}

TEST(Scenario, Validation) {
  Scenario sc;
  sc.name = "bad";
  sc.goal_x = 5.0;
  sc.obstacles = {inflated(0.1, 0.0)};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.obstacles = {inflated(5.0, 0.2)};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.obstacles = {};
  sc.dt = 0.0;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
}

TEST(Episode, FreeFieldReachesGoal) {
  Scenario sc;
  sc.name = "free";
  sc.start = {0.0, 0.0, 0.0, 0.5};
  sc.goal_x = 4.0;
  sc.horizon = 20.0;
  const BenchConfig cfg;
  const auto r = run_episode(sc, ControllerSpec::fixed("fixed", 1.0), cfg);
  EXPECT_EQ(r.outcome, EpisodeOutcome::Reached);
  EXPECT_EQ(r.collisions, 0);
  EXPECT_TRUE(r.gamma_trace.empty());
  // accelerates at most a_max from 0.5 to v_ref, then cruises: a lower bound on travel time
  EXPECT_GT(r.time_to_goal, (4.0 - 0.3) / 1.0);
  EXPECT_LT(r.time_to_goal, 10.0);
  EXPECT_TRUE(std::isinf(r.min_h));
}

TEST(Episode, StoppedRobotWithZeroGainDeadlocks) {
  Scenario sc;
  sc.name = "stall";
  sc.start = {0.0, 0.0, 0.0, 0.0};
  sc.goal_x = 4.0;
  sc.horizon = 5.0;
  BenchConfig cfg;
  cfg.gen.nominal.k_v = 0.0;
  const auto r = run_episode(sc, ControllerSpec::fixed("fixed", 1.0), cfg);
  EXPECT_EQ(r.outcome, EpisodeOutcome::Deadlock);
  EXPECT_TRUE(r.deadlock);
  EXPECT_DOUBLE_EQ(r.time_to_goal, 5.0);
  EXPECT_EQ(r.trajectory.size(), 101u);
}

TEST(Episode, SingleObstacleConservativeIsSafe) {
  const BenchConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto sc = single_obstacle_scenario(seed);
    const auto r = run_episode(sc, ControllerSpec::fixed("low", 0.5), cfg);
    EXPECT_EQ(r.collisions, 0) << "seed " << seed;
    EXPECT_GT(r.min_h, 0.0);
    ASSERT_FALSE(r.gamma_trace.empty());
    for (const auto& g : r.gamma_trace) EXPECT_EQ(g, (GammaPair{0.5, 0.5}));
  }
}

TEST(Episode, DeterministicAndOracleRuns) {
  const BenchConfig cfg;
  const auto sc = single_obstacle_scenario(3);
  const auto a = run_episode(sc, ControllerSpec::oracle(), cfg);
  const auto b = run_episode(sc, ControllerSpec::oracle(), cfg);
  ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    EXPECT_EQ(a.trajectory[i].x, b.trajectory[i].x);
    EXPECT_EQ(a.trajectory[i].y, b.trajectory[i].y);
  }
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  for (const auto& g : a.gamma_trace) {
    EXPECT_GE(g.g0, cfg.gen.domain.gamma_min);
    EXPECT_LE(g.g1, cfg.gen.domain.gamma_max);
  }
}

TEST(Episode, LearnedWithoutModelThrows) {
  ControllerSpec c{"broken", ControllerKind::Learned, {}, nullptr};
  EXPECT_THROW(run_episode(single_obstacle_scenario(0), c, BenchConfig{}), std::invalid_argument);
}

TEST(Features, ClampedIntoGenerationBox) {
  const GenerationConfig g;
  const auto f = clamped_features({0.0, 0.0, 0.0, 3.0}, inflated(10.0, 0.0), g);
  EXPECT_EQ(f.d, g.d_hi);
  EXPECT_EQ(f.v, g.v_hi);
  EXPECT_EQ(f.delta_theta, g.theta_lo);
}

TEST(Suite, RowsAggregateAndJobsAgree) {
  const BenchConfig cfg;
  std::vector<Scenario> sc{single_obstacle_scenario(1), single_obstacle_scenario(2)};
  const std::vector<ControllerSpec> ctl{ControllerSpec::fixed("low", 0.5), ControllerSpec::fixed("high", 2.5)};
  const auto one = run_suite(sc, ctl, cfg, 1);
  const auto four = run_suite(sc, ctl, cfg, 4);
  ASSERT_EQ(one.episodes.size(), 4u);
  ASSERT_EQ(one.rows.size(), 2u);  // both scenarios share the name "single"
  EXPECT_EQ(one.rows[0].episodes, 2);
  EXPECT_NEAR(one.rows[0].mean_min_h, 0.5 * (one.episodes[0].min_h + one.episodes[2].min_h), 1e-15);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(to_json(one.episodes[i]).dump(), to_json(four.episodes[i]).dump());
  EXPECT_THROW(run_suite({}, ctl, cfg), std::invalid_argument);
}
