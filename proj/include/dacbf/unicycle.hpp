#ifndef DACBF_UNICYCLE_HPP
#define DACBF_UNICYCLE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dacbf {

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

/// DynamicUnicycle2D state: planar pose plus forward speed.
struct RobotState {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // rad, kept in (-pi, pi]
  double v = 0.0;      // m/s

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(theta) && std::isfinite(v);
  }
};

struct ControlInput {
  double accel = 0.0;  // m/s^2
  double omega = 0.0;  // rad/s
};

/// Box input set |accel| <= a_max, |omega| <= omega_max.
struct InputBounds {
  double a_max = 1.0;
  double omega_max = 1.0;

  bool contains(const ControlInput& u, double tol = 0.0) const {
    return std::abs(u.accel) <= a_max + tol && std::abs(u.omega) <= omega_max + tol;
  }
  ControlInput clip(const ControlInput& u) const {
    return {std::clamp(u.accel, -a_max, a_max), std::clamp(u.omega, -omega_max, omega_max)};
  }
};

/// Circular obstacle; radius already inflated by the robot radius.
struct Obstacle {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.5;
};

/// Class-K parameters (gamma0, gamma1) of the relative-degree-2 barrier condition.
struct GammaPair {
  double g0 = 1.0;
  double g1 = 1.0;

  friend bool operator==(const GammaPair&, const GammaPair&) = default;
};

/// h, its first derivative, and the decomposition hdd = lf2h + lglfh . u.
struct BarrierEval {
  double h = 0.0;
  double h_dot = 0.0;
  double lf2h = 0.0;
  std::array<double, 2> lglfh{0.0, 0.0};

  double h_ddot(const ControlInput& u) const { return lf2h + lglfh[0] * u.accel + lglfh[1] * u.omega; }
};

namespace detail {

struct StateDeriv {
  double dx, dy, dtheta, dv;
};

inline StateDeriv unicycle_rhs(double theta, double v, const ControlInput& u) {
  return {v * std::cos(theta), v * std::sin(theta), u.omega, u.accel};
}

}  // namespace detail

/// One RK4 step of x' = v cos(theta), y' = v sin(theta), theta' = omega, v' = a
/// with the input held constant over the step.
inline RobotState step(const RobotState& s, const ControlInput& u, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("step: dt must be positive and finite");
  if (!s.finite() || !std::isfinite(u.accel) || !std::isfinite(u.omega))
    throw std::invalid_argument("step: non-finite state or input");

  using detail::unicycle_rhs;
  const auto k1 = unicycle_rhs(s.theta, s.v, u);
  const auto k2 = unicycle_rhs(s.theta + 0.5 * dt * k1.dtheta, s.v + 0.5 * dt * k1.dv, u);
  const auto k3 = unicycle_rhs(s.theta + 0.5 * dt * k2.dtheta, s.v + 0.5 * dt * k2.dv, u);
  const auto k4 = unicycle_rhs(s.theta + dt * k3.dtheta, s.v + dt * k3.dv, u);

  RobotState out;
  out.x = s.x + dt / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx);
  out.y = s.y + dt / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy);
  out.theta = wrap_angle(s.theta + dt / 6.0 * (k1.dtheta + 2.0 * k2.dtheta + 2.0 * k3.dtheta + k4.dtheta));
  out.v = s.v + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv);
  return out;
}

/// Barrier h = |p - c|^2 - r^2 and its Lie-derivative chain. The input enters
/// at the second derivative through both accel and omega.
inline BarrierEval eval_barrier(const RobotState& s, const Obstacle& obs) {
  if (!(obs.radius > 0.0)) throw std::invalid_argument("eval_barrier: obstacle radius must be positive");
  const double dx = s.x - obs.cx;
  const double dy = s.y - obs.cy;
  const double c = std::cos(s.theta);
  const double sn = std::sin(s.theta);

  BarrierEval be;
  be.h = dx * dx + dy * dy - obs.radius * obs.radius;
  be.h_dot = 2.0 * s.v * (dx * c + dy * sn);
  be.lf2h = 2.0 * s.v * s.v;
  be.lglfh = {2.0 * (dx * c + dy * sn), 2.0 * s.v * (-dx * sn + dy * c)};
  return be;
}

/// CBF margin psi = hdd + (g0 + g1) hd + g0 g1 h at input u.
inline double psi(const BarrierEval& be, const ControlInput& u, const GammaPair& g) {
  return be.h_ddot(u) + (g.g0 + g.g1) * be.h_dot + g.g0 * g.g1 * be.h;
}

/// Distance from the robot to the obstacle center.
inline double obstacle_distance(const RobotState& s, const Obstacle& obs) {
  return std::hypot(s.x - obs.cx, s.y - obs.cy);
}

/// Unsigned angle in [0, pi] between the heading and the bearing to the obstacle.
/// Zero means the robot points straight at it.
inline double relative_heading(const RobotState& s, const Obstacle& obs) {
  const double bearing = std::atan2(obs.cy - s.y, obs.cx - s.x);
  return std::abs(wrap_angle(bearing - s.theta));
}

}  // namespace dacbf

#endif  // DACBF_UNICYCLE_HPP
