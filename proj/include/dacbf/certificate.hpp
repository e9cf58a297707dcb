#ifndef DACBF_CERTIFICATE_HPP
#define DACBF_CERTIFICATE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dacbf/adaptive_selector.hpp"
#include "dacbf/barrier_qp.hpp"
#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"
#include "dacbf/safety_surrogate.hpp"

namespace dacbf {

enum class Provenance { Analytic, Estimated, User };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::Analytic: return "analytic";
    case Provenance::Estimated: return "estimated";
    case Provenance::User: return "user";
  }
  return "?";
}

/// Bounds on barrier quantities over the operating region.
struct StateEnvelope {
  double h_max = 0.0;
  double hdot_max = 0.0;
  double lgh_max = 0.0;  // |L_g h|; zero for a relative-degree-2 barrier
  double u_max = 0.0;
  double v_psi = 0.0;    // sup |psi_dot|
  double l_e = 0.0;      // Lipschitz bound of the prediction error
  double sigma = 0.0;    // sub-Gaussian parameter of pointwise errors

  void validate() const {
    for (double x : {h_max, hdot_max, lgh_max, u_max, v_psi, l_e, sigma})
      if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument("StateEnvelope: fields must be finite and >= 0");
  }
};

/// L_psi <= |hdot| + |hdot| + 2 gamma_max |h| + |h|.
inline double lipschitz_psi(const StateEnvelope& env, const DomainBounds& b) {
  return 2.0 * env.hdot_max + 2.0 * b.gamma_max * env.h_max + env.h_max;
}

/// L_Psi <= 2 (|hdot_max| + |L_g h| u_max + gamma_max |h_max|).
inline double lipschitz_Psi(const StateEnvelope& env, const DomainBounds& b) {
  return 2.0 * (env.hdot_max + env.lgh_max * env.u_max + b.gamma_max * env.h_max);
}

/// eps* = delta_min / (L_psi L_M).
inline double safety_budget(double delta_min, double l_psi, double l_m) {
  if (!(delta_min > 0.0 && l_psi > 0.0 && l_m > 0.0)) throw std::invalid_argument("safety_budget: arguments must be > 0");
  return delta_min / (l_psi * l_m);
}

/// Margin needed to certify error eps: L_psi L_M eps.
inline double delta_req(double eps, double l_psi, double l_m) { return l_psi * l_m * eps; }

/// dt_max = (delta_min - L_psi L_M eps) / V_psi. Zero when the budget is exactly
/// spent; negative degraded margin has no admissible period.
inline double sampling_bound(double delta_min, double eps, double l_psi, double l_m, double v_psi) {
  if (!(v_psi > 0.0)) throw std::invalid_argument("sampling_bound: v_psi must be positive");
  const double degraded = delta_min - l_psi * l_m * eps;
  // eps = safety_budget(...) can miss delta_min by an ulp or two
  if (degraded < 0.0 && degraded >= -1e-12 * std::abs(delta_min)) return 0.0;
  if (degraded < 0.0) throw std::domain_error("sampling_bound: prediction error exceeds the safety budget");
  return degraded / v_psi;
}

struct CoveringBound {
  double probability = 0.0;  // clamped to [0, 1]
  double raw = 0.0;          // 1 - 2 M |Gamma| exp(...) before clamping
  double covering_number = 0.0;
  bool vacuous = false;      // raw <= 0
};

/// 1 - 2 M |Gamma_cand| exp(-(eps - L_e r)^2 / (2 sigma^2)), M = (diam / r)^n.
inline CoveringBound covering_probability(double eps, double r, const StateEnvelope& env, int n_dim,
                                          std::size_t n_candidates, double diam_op) {
  if (!(r > 0.0 && diam_op > 0.0 && n_dim >= 1)) throw std::invalid_argument("covering_probability: bad geometry");
  const double gap = eps - env.l_e * r;
  if (!(gap > 0.0)) throw std::domain_error("covering_probability: eps <= L_e r, bound is vacuous");
  CoveringBound cb;
  cb.covering_number = std::pow(diam_op / r, n_dim);
  const double tail = env.sigma > 0.0 ? std::exp(-gap * gap / (2.0 * env.sigma * env.sigma)) : 0.0;
  cb.raw = 1.0 - 2.0 * cb.covering_number * static_cast<double>(n_candidates) * tail;
  cb.vacuous = cb.raw <= 0.0;
  cb.probability = std::clamp(cb.raw, 0.0, 1.0);
  return cb;
}

struct CertifiedSet {
  std::vector<bool> mask;
  double fraction = 0.0;
  double threshold = 0.0;
};

/// {x : psi(gamma*_Phi(x)) >= L_psi L_M eps} on a margin grid.
inline CertifiedSet certified_set(const std::vector<double>& oracle_margins, double eps, double l_psi, double l_m) {
  CertifiedSet cs;
  cs.threshold = delta_req(eps, l_psi, l_m);
  std::size_t n = 0;
  for (double m : oracle_margins) {
    const bool in = m >= cs.threshold;
    cs.mask.push_back(in);
    n += in;
  }
  cs.fraction = oracle_margins.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(oracle_margins.size());
  return cs;
}

struct FeasibilityCheck {
  bool pass = false;
  double slack = 0.0;  // inf mu - L_Psi L_M eps
  double inf_mu = 0.0;
};

/// L_Psi L_M eps < inf_x mu(x) over the grid.
inline FeasibilityCheck qp_feasibility_check(const std::vector<double>& margins_mu, double eps, double l_Psi, double l_m) {
  if (margins_mu.empty()) throw std::invalid_argument("qp_feasibility_check: empty grid");
  FeasibilityCheck f;
  f.inf_mu = *std::min_element(margins_mu.begin(), margins_mu.end());
  f.slack = f.inf_mu - l_Psi * l_m * eps;
  f.pass = f.slack > 0.0;
  return f;
}

/// Covering lower bound min_j psi(x_j) - L_psi L_M L_Phi^true r.
inline double oracle_margin_bound(const std::vector<double>& grid_margins, double r, double l_psi, double l_m,
                                  double l_phi_true) {
  if (grid_margins.empty()) throw std::invalid_argument("oracle_margin_bound: empty grid");
  return *std::min_element(grid_margins.begin(), grid_margins.end()) - l_psi * l_m * l_phi_true * r;
}

// ---- estimation from data and models ---------------------------------------------

/// Envelope from the dataset's per-episode maxima, inflated by `inflate`.
/// l_e and sigma are left for the caller.
inline StateEnvelope envelope_from_dataset(const Dataset& ds, const InputBounds& ub, double inflate = 1.1) {
  StateEnvelope env;
  for (const auto& z : ds.samples) {
    env.h_max = std::max(env.h_max, z.envelope[0]);
    env.hdot_max = std::max(env.hdot_max, z.envelope[1]);
    env.v_psi = std::max(env.v_psi, z.envelope[2]);
  }
  env.h_max *= inflate;
  env.hdot_max *= inflate;
  env.v_psi *= inflate;
  env.lgh_max = 0.0;
  env.u_max = std::hypot(ub.a_max, ub.omega_max);
  return env;
}

inline std::array<double, kInputDim> input_of(const LabeledSample& z) { return raw_input(z.s, z.gamma); }

/// Largest |Phi_i - Phi_j| / |x_i - x_j| over dataset pairs (x = features and gamma).
/// Pairs closer than min_sep are skipped. An estimate, not a bound.
inline double lipschitz_phi_true(const Dataset& ds, double min_sep = 1e-3) {
  double best = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto xi = input_of(ds.samples[i]);
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      const auto xj = input_of(ds.samples[j]);
      double d2 = 0.0;
      for (int k = 0; k < kInputDim; ++k) d2 += (xi[k] - xj[k]) * (xi[k] - xj[k]);
      const double d = std::sqrt(d2);
      if (d < min_sep) continue;
      best = std::max(best, std::abs(ds.samples[i].phi_label - ds.samples[j].phi_label) / d);
    }
  }
  return best;
}

/// Largest sampled difference quotient of the pooled mean over random inputs in
/// the generation box, along random unit directions with step h.
inline double lipschitz_phi_nn(const EnsembleModel& e, const GenerationConfig& g, std::size_t samples, std::uint64_t seed,
                               double h = 1e-4) {
  Rng rng(seed);
  std::vector<std::array<double, kInputDim>> inputs;
  for (std::size_t i = 0; i < samples; ++i) {
    std::array<double, kInputDim> x{rng.uniform(g.d_lo, g.d_hi), rng.uniform(g.v_lo, g.v_hi),
                                    rng.uniform(g.theta_lo, g.theta_hi), rng.uniform(g.gamma_lo, g.gamma_hi),
                                    rng.uniform(g.gamma_lo, g.gamma_hi)};
    std::array<double, kInputDim> dir{};
    double n2 = 0.0;
    for (auto& c : dir) {
      c = rng.uniform(-1.0, 1.0);
      n2 += c * c;
    }
    auto y = x;
    for (int k = 0; k < kInputDim; ++k) y[k] += h * dir[k] / std::sqrt(n2);
    inputs.push_back(x);
    inputs.push_back(y);
  }
  const auto p = predict_batch(e, inputs);
  double best = 0.0;
  for (std::size_t i = 0; i < samples; ++i) best = std::max(best, std::abs(p[2 * i + 1].mean_phi - p[2 * i].mean_phi) / h);
  return best;
}

/// Sub-Gaussian parameter from independent retrains: per-point standard
/// deviation of the pooled mean across models, then the q-quantile.
inline double fit_sigma(const std::vector<EnsembleModel>& retrains, const Dataset& points, double q = 0.95) {
  if (retrains.size() < 2) throw std::invalid_argument("fit_sigma: need at least two retrains");
  std::vector<std::array<double, kInputDim>> inputs;
  for (const auto& z : points.samples) inputs.push_back(input_of(z));
  std::vector<std::vector<Prediction>> preds;
  for (const auto& m : retrains) preds.push_back(predict_batch(m, inputs));
  std::vector<double> sds;
  const double R = static_cast<double>(retrains.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double mean = 0.0;
    for (const auto& p : preds) mean += p[i].mean_phi;
    mean /= R;
    double var = 0.0;
    for (const auto& p : preds) var += (p[i].mean_phi - mean) * (p[i].mean_phi - mean);
    sds.push_back(std::sqrt(var / (R - 1.0)));
  }
  return empirical_quantile(sds, q);
}

/// Max |pooled mean - label| over a dataset: the uniform-error surrogate.
inline double max_abs_error(const EnsembleModel& e, const Dataset& ds) {
  std::vector<std::array<double, kInputDim>> inputs;
  for (const auto& z : ds.samples) inputs.push_back(input_of(z));
  const auto p = predict_batch(e, inputs);
  double m = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, std::abs(p[i].mean_phi - ds.samples[i].phi_label));
  return m;
}

// ---- oracle margin grid ------------------------------------------------------------

/// Regular grid over (d, v, dtheta); counts per axis >= 2.
struct StateGridSpec {
  int n_d = 8;
  int n_v = 5;
  int n_theta = 6;
  double d_lo = 0.65, d_hi = 2.5;
  double v_lo = 0.01, v_hi = 1.0;
  double theta_lo = 0.01, theta_hi = std::numbers::pi / 2.0;

  std::vector<Features> states() const {
    if (n_d < 2 || n_v < 2 || n_theta < 2) throw std::invalid_argument("StateGridSpec: need >= 2 points per axis");
    std::vector<Features> out;
    for (int i = 0; i < n_d; ++i)
      for (int j = 0; j < n_v; ++j)
        for (int k = 0; k < n_theta; ++k)
          out.push_back({d_lo + (d_hi - d_lo) * i / (n_d - 1), v_lo + (v_hi - v_lo) * j / (n_v - 1),
                         theta_lo + (theta_hi - theta_lo) * k / (n_theta - 1)});
    return out;
  }

  /// Covering radius: half the cell diagonal.
  double covering_radius() const {
    const double a = (d_hi - d_lo) / (n_d - 1), b = (v_hi - v_lo) / (n_v - 1), c = (theta_hi - theta_lo) / (n_theta - 1);
    return 0.5 * std::sqrt(a * a + b * b + c * c);
  }

  double diameter() const {
    return std::sqrt((d_hi - d_lo) * (d_hi - d_lo) + (v_hi - v_lo) * (v_hi - v_lo) +
                     (theta_hi - theta_lo) * (theta_hi - theta_lo));
  }
};

/// Robot at the origin heading dtheta, obstacle at (d, 0): the canonical state
/// with the given relative features.
inline BarrierEval canonical_barrier(const Features& s, double obstacle_radius) {
  return eval_barrier(RobotState{0.0, 0.0, s.delta_theta, s.v}, Obstacle{s.d, 0.0, obstacle_radius});
}

/// Controllable margin sup_u psi(x, u; gamma) over the input box.
inline double controllable_margin(const BarrierEval& be, const GammaPair& g, const InputBounds& ub) {
  return margin_max(build_qp(be, ControlInput{}, g, ub));
}

/// Oracle selection: the soft-max rule on simulated (true) losses, no gates.
inline Selection oracle_select(const Features& s, const CandidateGrid& grid, const SelectorParams& p,
                               const GenerationConfig& g) {
  std::vector<double> phis;
  for (const auto& c : grid.candidates) phis.push_back(true_phi(s, c, g));
  return select_from_predictions(grid, phis, std::vector<double>(phis.size(), 0.0), p);
}

struct OracleGrid {
  std::vector<Features> states;
  std::vector<GammaPair> gamma_star;
  std::vector<double> margins;  // sup_u psi at gamma*
};

inline OracleGrid oracle_margin_grid(const StateGridSpec& spec, const CandidateGrid& grid, const SelectorParams& p,
                                     const GenerationConfig& g, unsigned jobs = 1) {
  OracleGrid og;
  og.states = spec.states();
  const std::size_t n = og.states.size();
  og.gamma_star.resize(n);
  og.margins.resize(n);
  auto work = [&](unsigned w, unsigned stride) {
    for (std::size_t i = w; i < n; i += stride) {
      og.gamma_star[i] = oracle_select(og.states[i], grid, p, g).gamma;
      og.margins[i] = controllable_margin(canonical_barrier(og.states[i], g.obstacle_radius), og.gamma_star[i],
                                          g.input_bounds);
    }
  };
  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(work, w, jobs);
    for (auto& t : pool) t.join();
  }
  return og;
}

/// Fraction of grid points that enter the certified set when eps shrinks from
/// eps_base to eps_new, with the relative reduction of the required margin.
struct Expansion {
  double fraction_base = 0.0;
  double fraction_new = 0.0;
  double delta_req_base = 0.0;
  double delta_req_new = 0.0;
  double reduction = 0.0;  // 1 - delta_req_new / delta_req_base
  bool nested = true;      // mask(base) subset of mask(new) when eps_new < eps_base
};

inline Expansion certified_expansion(const std::vector<double>& margins, double eps_base, double eps_new, double l_psi,
                                     double l_m) {
  const auto a = certified_set(margins, eps_base, l_psi, l_m);
  const auto b = certified_set(margins, eps_new, l_psi, l_m);
  Expansion x;
  x.fraction_base = a.fraction;
  x.fraction_new = b.fraction;
  x.delta_req_base = a.threshold;
  x.delta_req_new = b.threshold;
  x.reduction = a.threshold > 0.0 ? 1.0 - b.threshold / a.threshold : 0.0;
  if (eps_new < eps_base)
    for (std::size_t i = 0; i < margins.size(); ++i)
      if (a.mask[i] && !b.mask[i]) x.nested = false;
  return x;
}

inline nlohmann::json to_json(const StateEnvelope& e) {
  return {{"h_max", e.h_max}, {"hdot_max", e.hdot_max}, {"lgh_max", e.lgh_max}, {"u_max", e.u_max},
          {"v_psi", e.v_psi}, {"l_e", e.l_e},           {"sigma", e.sigma}};
}

}  // namespace dacbf

#endif  // DACBF_CERTIFICATE_HPP
