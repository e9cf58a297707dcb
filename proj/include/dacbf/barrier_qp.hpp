#ifndef DACBF_BARRIER_QP_HPP
#define DACBF_BARRIER_QP_HPP

#include <array>
#include <cmath>
#include <limits>
#include <optional>

#include "dacbf/unicycle.hpp"

namespace dacbf {

/// min |u - u_nom|^2  s.t.  row . u + constant >= 0,  u in box.
struct QpProblem {
  ControlInput u_nom;
  std::array<double, 2> constraint_row{0.0, 0.0};
  double constraint_const = 0.0;
  InputBounds bounds;

  double margin(const ControlInput& u) const {
    return constraint_row[0] * u.accel + constraint_row[1] * u.omega + constraint_const;
  }
  double cost(const ControlInput& u) const {
    const double da = u.accel - u_nom.accel;
    const double dw = u.omega - u_nom.omega;
    return da * da + dw * dw;
  }
};

struct ActiveSet {
  bool cbf = false;
  bool a_lo = false;
  bool a_hi = false;
  bool omega_lo = false;
  bool omega_hi = false;

  bool empty() const { return !(cbf || a_lo || a_hi || omega_lo || omega_hi); }
};

struct QpSolution {
  ControlInput u;
  double margin = 0.0;
  ActiveSet active_set;
};

inline constexpr double kQpTol = 1e-9;

inline QpProblem build_qp(const BarrierEval& be, const ControlInput& u_nom, const GammaPair& g,
                          const InputBounds& bounds = {}) {
  QpProblem qp;
  qp.u_nom = u_nom;
  qp.constraint_row = be.lglfh;
  qp.constraint_const = be.lf2h + (g.g0 + g.g1) * be.h_dot + g.g0 * g.g1 * be.h;
  qp.bounds = bounds;
  return qp;
}

/// Box vertex maximizing the (linear) constraint function.
inline ControlInput margin_max_input(const QpProblem& qp) {
  return {qp.constraint_row[0] >= 0.0 ? qp.bounds.a_max : -qp.bounds.a_max,
          qp.constraint_row[1] >= 0.0 ? qp.bounds.omega_max : -qp.bounds.omega_max};
}

inline double margin_max(const QpProblem& qp) { return qp.margin(margin_max_input(qp)); }

/// Exact solve by enumerating the active sets of the 2-variable problem:
/// the unconstrained point, the box-only optimum, the projection onto the
/// constraint line, its intersections with the four box faces, and the four
/// vertices. Returns nullopt when the half-plane misses the box.
inline std::optional<QpSolution> solve(const QpProblem& qp) {
  const double mmax = margin_max(qp);
  if (mmax < 0.0) return std::nullopt;

  const auto& r = qp.constraint_row;
  const auto& b = qp.bounds;
  const double scale = 1.0 + std::abs(qp.constraint_const) + std::abs(r[0]) * b.a_max + std::abs(r[1]) * b.omega_max;
  const double feas_tol = kQpTol * scale;

  std::array<ControlInput, 12> cand{};
  std::size_t n = 0;
  cand[n++] = qp.u_nom;
  cand[n++] = b.clip(qp.u_nom);
  cand[n++] = margin_max_input(qp);

  const double rr = r[0] * r[0] + r[1] * r[1];
  if (rr > 0.0) {
    const double t = -qp.margin(qp.u_nom) / rr;
    cand[n++] = {qp.u_nom.accel + t * r[0], qp.u_nom.omega + t * r[1]};
    // line intersections with the faces a = +-a_max and omega = +-omega_max
    for (double a : {-b.a_max, b.a_max}) {
      if (r[1] != 0.0) cand[n++] = {a, -(qp.constraint_const + r[0] * a) / r[1]};
    }
    for (double w : {-b.omega_max, b.omega_max}) {
      if (r[0] != 0.0) cand[n++] = {-(qp.constraint_const + r[1] * w) / r[0], w};
    }
  }
  for (double a : {-b.a_max, b.a_max})
    for (double w : {-b.omega_max, b.omega_max})
      if (n < cand.size()) cand[n++] = {a, w};

  std::optional<QpSolution> best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    ControlInput u = cand[i];
    if (!std::isfinite(u.accel) || !std::isfinite(u.omega)) continue;
    if (!b.contains(u, kQpTol)) continue;
    u = b.clip(u);
    const double m = qp.margin(u);
    if (m < -feas_tol) continue;
    const double c = qp.cost(u);
    if (c < best_cost) {
      best_cost = c;
      best = QpSolution{u, m, {}};
    }
  }
  // The margin-max vertex is always feasible here, so best is set.
  auto& sol = *best;
  sol.active_set.cbf = std::abs(sol.margin) <= feas_tol;
  sol.active_set.a_lo = std::abs(sol.u.accel + b.a_max) <= kQpTol;
  sol.active_set.a_hi = std::abs(sol.u.accel - b.a_max) <= kQpTol;
  sol.active_set.omega_lo = std::abs(sol.u.omega + b.omega_max) <= kQpTol;
  sol.active_set.omega_hi = std::abs(sol.u.omega - b.omega_max) <= kQpTol;
  return best;
}

/// Closed-loop policy: the QP solution when feasible, else the least-violating
/// (margin-max) input. `infeasible` reports which branch was taken.
struct FilteredControl {
  ControlInput u;
  double margin = 0.0;
  bool infeasible = false;
};

inline FilteredControl filter_control(const QpProblem& qp) {
  if (auto sol = solve(qp)) return {sol->u, sol->margin, false};
  const auto u = margin_max_input(qp);
  return {u, qp.margin(u), true};
}

}  // namespace dacbf

#endif  // DACBF_BARRIER_QP_HPP
