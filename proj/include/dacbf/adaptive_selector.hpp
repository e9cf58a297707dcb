#ifndef DACBF_ADAPTIVE_SELECTOR_HPP
#define DACBF_ADAPTIVE_SELECTOR_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"
#include "dacbf/safety_surrogate.hpp"
#include "dacbf/unicycle.hpp"

namespace dacbf {

struct CandidateGrid {
  std::vector<GammaPair> candidates;

  /// n x n uniform grid over the gamma box, corners included.
  static CandidateGrid uniform(const DomainBounds& b, int n = 7) {
    if (n < 1) throw std::invalid_argument("CandidateGrid: n must be >= 1");
    CandidateGrid g;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double t0 = n == 1 ? 0.5 : static_cast<double>(i) / (n - 1);
        const double t1 = n == 1 ? 0.5 : static_cast<double>(j) / (n - 1);
        g.candidates.push_back({b.gamma_min + t0 * (b.gamma_max - b.gamma_min),
                                b.gamma_min + t1 * (b.gamma_max - b.gamma_min)});
      }
    return g;
  }

  void validate(const DomainBounds& b) const {
    if (candidates.empty()) throw std::invalid_argument("CandidateGrid: empty");
    for (const auto& c : candidates)
      if (c.g0 < b.gamma_min || c.g0 > b.gamma_max || c.g1 < b.gamma_min || c.g1 > b.gamma_max)
        throw std::invalid_argument("CandidateGrid: candidate outside the gamma box");
  }
};

struct SelectorParams {
  double tau_s = 0.5;
  double kappa = 0.5;
  // loose defaults: only candidates far outside the trained ensemble's usual
  // spread are gated; +inf disables a filter
  double jrd_max = 1.0;
  double cvar_alpha = 0.95;
  double cvar_max = 1.5;
  double gate_width = 0.05;  // sigmoid width as a fraction of each threshold

  void validate() const {
    if (!(tau_s > 0.0)) throw std::invalid_argument("SelectorParams: tau_s must be positive");
    if (!(kappa >= 0.0)) throw std::invalid_argument("SelectorParams: kappa must be non-negative");
    if (!(jrd_max > 0.0 && cvar_max > 0.0)) throw std::invalid_argument("SelectorParams: thresholds must be positive");
    if (!(cvar_alpha > 0.0 && cvar_alpha < 1.0)) throw std::invalid_argument("SelectorParams: cvar_alpha in (0, 1)");
    if (!(gate_width > 0.0)) throw std::invalid_argument("SelectorParams: gate_width must be positive");
  }
};

/// Aggressiveness J(gamma) = gamma0 + gamma1.
inline double aggressiveness(const GammaPair& g) { return g.g0 + g.g1; }

/// L_M = kappa diam(Gamma) with diam = sqrt(2) (gamma_max - gamma_min).
inline double lipschitz_constant(const SelectorParams& p, const DomainBounds& b) { return p.kappa * b.gamma_diameter(); }

inline double log_sigmoid(double x) { return -softplus(-x); }

struct FilterResult {
  std::vector<bool> pass;
  std::vector<double> gate;      // in (0, 1]
  std::vector<double> log_gate;  // ln(gate), finite
};

/// Hard pass/fail and smooth gate per candidate. An infinite threshold
/// contributes a factor of exactly 1.
inline FilterResult filter_mask(const std::vector<double>& jrd_values, const std::vector<double>& cvar_values,
                                const SelectorParams& p) {
  if (jrd_values.size() != cvar_values.size()) throw std::invalid_argument("filter_mask: size mismatch");
  FilterResult f;
  auto term = [&](double value, double thr) {
    return std::isinf(thr) ? 0.0 : log_sigmoid((thr - value) / (p.gate_width * thr));
  };
  for (std::size_t i = 0; i < jrd_values.size(); ++i) {
    f.pass.push_back(jrd_values[i] <= p.jrd_max && cvar_values[i] <= p.cvar_max);
    const double lg = term(jrd_values[i], p.jrd_max) + term(cvar_values[i], p.cvar_max);
    f.log_gate.push_back(lg);
    f.gate.push_back(std::exp(lg));
  }
  return f;
}

struct Selection {
  GammaPair gamma;
  std::vector<double> weights;  // normalized, sum to 1
};

/// Soft-max rule on given loss estimates and log-gates:
/// w_i ∝ exp(J_i / tau_s - kappa softplus(phi_i)) gate_i, gamma* = sum w_i gamma_i.
inline Selection select_from_predictions(const CandidateGrid& grid, const std::vector<double>& phi_hat,
                                         const std::vector<double>& log_gate, const SelectorParams& p) {
  const std::size_t n = grid.candidates.size();
  if (n == 0) throw std::invalid_argument("select: empty grid");
  if (phi_hat.size() != n || log_gate.size() != n) throw std::invalid_argument("select: size mismatch");
  std::vector<double> lw(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    lw[i] = aggressiveness(grid.candidates[i]) / p.tau_s - p.kappa * softplus(phi_hat[i]) + log_gate[i];
    mx = std::max(mx, lw[i]);
  }
  Selection s;
  s.weights.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += s.weights[i] = std::exp(lw[i] - mx);
  double g0 = 0.0, g1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.weights[i] /= total;
    g0 += s.weights[i] * grid.candidates[i].g0;
    g1 += s.weights[i] * grid.candidates[i].g1;
  }
  // rounding can leave the hull by an ulp; the convex-hull bound is exact
  double lo0 = grid.candidates[0].g0, hi0 = lo0, lo1 = grid.candidates[0].g1, hi1 = lo1;
  for (const auto& c : grid.candidates) {
    lo0 = std::min(lo0, c.g0);
    hi0 = std::max(hi0, c.g0);
    lo1 = std::min(lo1, c.g1);
    hi1 = std::max(hi1, c.g1);
  }
  s.gamma = {std::clamp(g0, lo0, hi0), std::clamp(g1, lo1, hi1)};
  return s;
}

struct SelectionReport {
  Selection selection;
  std::vector<double> phi_hat;
  std::vector<double> jrd;
  std::vector<double> cvar;
  FilterResult filter;
};

/// Learned selector: queries the ensemble for every candidate at features s.
inline SelectionReport smooth_select(const Features& s, const EnsembleModel& model, const CandidateGrid& grid,
                                     const SelectorParams& p) {
  std::vector<std::array<double, kInputDim>> inputs;
  for (const auto& c : grid.candidates) inputs.push_back(raw_input(s, c));
  const auto preds = predict_batch(model, inputs);
  SelectionReport r;
  for (const auto& pr : preds) {
    r.phi_hat.push_back(pr.mean_phi);
    r.jrd.push_back(pr.members.size() >= 2 ? jrd(pr) : 0.0);
    r.cvar.push_back(cvar(pr, p.cvar_alpha));
  }
  r.filter = filter_mask(r.jrd, r.cvar, p);
  r.selection = select_from_predictions(grid, r.phi_hat, r.filter.log_gate, p);
  return r;
}

}  // namespace dacbf

#endif  // DACBF_ADAPTIVE_SELECTOR_HPP
