#ifndef DACBF_SAFETY_SURROGATE_HPP
#define DACBF_SAFETY_SURROGATE_HPP

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dacbf {

struct SurrogateParams {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double beta1 = 1.0;
  double beta2 = 1.0;

  void validate() const {
    if (!(lambda1 > 0.0 && lambda2 > 0.0 && beta1 > 0.0 && beta2 > 0.0))
      throw std::invalid_argument("SurrogateParams: lambda1, lambda2, beta1, beta2 must be positive");
  }
};

/// Operating domain: obstacle distance range and the gamma box.
struct DomainBounds {
  double d_min = 0.65;
  double d_max = 2.5;
  double gamma_min = 0.5;
  double gamma_max = 2.5;

  void validate() const {
    if (!(d_min > 0.0 && d_min < d_max)) throw std::invalid_argument("DomainBounds: need 0 < d_min < d_max");
    if (!(gamma_min > 0.0 && gamma_min < gamma_max))
      throw std::invalid_argument("DomainBounds: need 0 < gamma_min < gamma_max");
  }
  bool contains_distance(double d) const { return d >= d_min && d <= d_max; }
  double gamma_diameter() const { return std::numbers::sqrt2 * (gamma_max - gamma_min); }
};

struct PhiInputs {
  double d = 1.0;
  double delta_theta = 0.0;
  double psi = 0.0;
};

struct DenominatorBounds {
  double d_min;
  double d_max;
};

struct PhiBounds {
  double lo;
  double hi;
};

/// The geometric denominator beta1 exp(-beta2 (cos dtheta + 1)) d^2 + 1.
inline double phi_denominator(double d, double delta_theta, const SurrogateParams& p) {
  return p.beta1 * std::exp(-p.beta2 * (std::cos(delta_theta) + 1.0)) * d * d + 1.0;
}

/// Safety loss  lambda1 exp(-lambda2 psi) / (beta1 exp(-beta2 (cos dtheta + 1)) d^2 + 1).
inline double phi(const PhiInputs& in, const DomainBounds& b, const SurrogateParams& p) {
  if (!b.contains_distance(in.d))
    throw std::domain_error("phi: distance " + std::to_string(in.d) + " outside [d_min, d_max]");
  if (!(in.delta_theta >= 0.0 && in.delta_theta <= std::numbers::pi))
    throw std::domain_error("phi: relative heading outside [0, pi]");
  if (!std::isfinite(in.psi)) throw std::domain_error("phi: non-finite psi");
  return p.lambda1 * std::exp(-p.lambda2 * in.psi) / phi_denominator(in.d, in.delta_theta, p);
}

inline DenominatorBounds denominator_bounds(const DomainBounds& b, const SurrogateParams& p) {
  return {p.beta1 * std::exp(-2.0 * p.beta2) * b.d_min * b.d_min + 1.0, p.beta1 * b.d_max * b.d_max + 1.0};
}

/// lambda1 e^{-lambda2 psi} / D_max <= phi <= lambda1 e^{-lambda2 psi} / D_min on the domain.
inline PhiBounds two_sided_bounds(double psi_value, const DomainBounds& b, const SurrogateParams& p) {
  const auto den = denominator_bounds(b, p);
  const double num = p.lambda1 * std::exp(-p.lambda2 * psi_value);
  return {num / den.d_max, num / den.d_min};
}

/// Bound on |psi_hat - psi| given |phi_hat - phi| <= eps_phi and an upper bound
/// psi_max_hat on the true margin.
inline double invert_psi_error(double eps_phi, double psi_max_hat, const DomainBounds& b, const SurrogateParams& p) {
  if (!(eps_phi >= 0.0)) throw std::invalid_argument("invert_psi_error: eps_phi must be non-negative");
  const auto den = denominator_bounds(b, p);
  return std::log1p(den.d_max / (p.lambda1 * std::exp(-p.lambda2 * psi_max_hat)) * eps_phi) / p.lambda2;
}

/// Upper bound on psi implied by an observed loss: from phi <= lambda1 e^{-lambda2 psi} / D_min,
/// psi <= -(1/lambda2) ln(phi D_min / lambda1).
inline double psi_upper_from_phi(double phi_hat, const DomainBounds& b, const SurrogateParams& p) {
  if (!(phi_hat > 0.0)) throw std::invalid_argument("psi_upper_from_phi: phi_hat must be positive");
  const auto den = denominator_bounds(b, p);
  return -std::log(phi_hat * den.d_min / p.lambda1) / p.lambda2;
}

/// Composition used by the certificate: psi_max_hat is the margin upper bound
/// valid for every loss in [phi_hat - eps, phi_hat + eps]. Infinite when that
/// interval reaches zero (no finite bound exists).
inline double psi_error_bound(double phi_hat, double eps_phi, const DomainBounds& b, const SurrogateParams& p) {
  if (eps_phi == 0.0) return 0.0;
  if (!(phi_hat > eps_phi)) return std::numeric_limits<double>::infinity();
  return invert_psi_error(eps_phi, psi_upper_from_phi(phi_hat - eps_phi, b, p), b, p);
}

/// Solve D_min/D_max relations for (beta1, beta2) given target denominators.
/// beta1 = (D_max - 1) / d_max^2, beta2 = -ln((D_min - 1) / (beta1 d_min^2)) / 2.
inline SurrogateParams calibrate_beta(const DomainBounds& b, double target_d_min, double target_d_max,
                                      double lambda1 = 1.0, double lambda2 = 1.0) {
  SurrogateParams p;
  p.lambda1 = lambda1;
  p.lambda2 = lambda2;
  p.beta1 = (target_d_max - 1.0) / (b.d_max * b.d_max);
  p.beta2 = -0.5 * std::log((target_d_min - 1.0) / (p.beta1 * b.d_min * b.d_min));
  p.validate();
  return p;
}

/// Defaults: lambda1 = lambda2 = 1 and betas calibrated to D_min = 1.08, D_max = 26.3
/// over d in [0.65, 2.5].
inline SurrogateParams default_surrogate_params() { return calibrate_beta(DomainBounds{}, 1.08, 26.3); }

}  // namespace dacbf

#endif  // DACBF_SAFETY_SURROGATE_HPP
