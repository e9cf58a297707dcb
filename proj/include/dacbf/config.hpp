#ifndef DACBF_CONFIG_HPP
#define DACBF_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dacbf/adaptive_selector.hpp"
#include "dacbf/certificate.hpp"
#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"
#include "dacbf/rng.hpp"
#include "dacbf/tracin.hpp"

namespace dacbf {

/// Bad or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AttributionSettings {
  InfluenceConfig influence;
  double rho = 0.10;
  std::vector<double> rho_sweep{0.0, 0.05, 0.10, 0.15, 0.20};
};

struct CertificateSettings {
  double inflate = 1.1;
  StateGridSpec grid;
  int sigma_retrains = 10;
  double sigma_quantile = 0.95;
  std::size_t nn_lipschitz_samples = 20000;
  double probe_delta_min = 10.0;
  // overrides; negative = estimate from data
  double h_max = -1.0, hdot_max = -1.0, v_psi = -1.0, sigma = -1.0, l_e = -1.0;
};

struct BenchSettings {
  int single_runs = 20;
  double fixed_low = 0.01;
  double fixed_high = 0.35;
  bool include_oracle = true;
};

struct PipelineConfig {
  std::uint64_t seed = 42;
  std::size_t samples = 1500;
  double train_frac = 0.7;
  GenerationConfig gen;
  TrainConfig train;
  AttributionSettings attribution;
  SelectorParams selector;
  int grid_n = 7;
  CertificateSettings certificate;
  BenchSettings bench;

  CandidateGrid candidate_grid() const { return CandidateGrid::uniform(gen.domain, grid_n); }

  void validate() const {
    try {
      gen.domain.validate();
      gen.surrogate.validate();
      train.validate();
      selector.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (samples < 2) throw ConfigError("generation.samples must be >= 2");
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("split.train_frac must be in (0, 1)");
    if (gen.d_lo < gen.domain.d_min || gen.d_hi > gen.domain.d_max || gen.d_lo >= gen.d_hi)
      throw ConfigError("generation distance range must lie inside [domain.d_min, domain.d_max]");
    if (gen.gamma_lo < gen.domain.gamma_min || gen.gamma_hi > gen.domain.gamma_max || gen.gamma_lo >= gen.gamma_hi)
      throw ConfigError("generation gamma range must lie inside the domain gamma box");
    if (!(gen.v_lo < gen.v_hi && gen.theta_lo < gen.theta_hi)) throw ConfigError("generation ranges are empty");
    if (!(gen.dt > 0.0 && gen.horizon > gen.dt)) throw ConfigError("generation dt/horizon invalid");
    if (!(attribution.rho >= 0.0 && attribution.rho < 1.0)) throw ConfigError("attribution.rho must be in [0, 1)");
    for (double r : attribution.rho_sweep)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("attribution.rho_sweep entries must be in [0, 1)");
    if (!(attribution.influence.unsafe_quantile >= 0.0 && attribution.influence.unsafe_quantile < 1.0))
      throw ConfigError("attribution.unsafe_quantile must be in [0, 1)");
    if (attribution.influence.safety_sign != 1.0 && attribution.influence.safety_sign != -1.0)
      throw ConfigError("attribution.safety_sign must be 1 or -1");
    if (grid_n < 1) throw ConfigError("selector.grid_n must be >= 1");
    if (certificate.sigma_retrains < 2) throw ConfigError("certificate.sigma_retrains must be >= 2");
    if (bench.single_runs < 0) throw ConfigError("bench.single_runs must be >= 0");
  }

  /// Every setting, in fixed order and full precision; the digest is its hash.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "pipeline/v1 seed=" << seed << " n=" << samples << " split=" << train_frac << '\n'
       << gen.canonical() << '\n'
       << train.canonical() << '\n'
       << "attr q=" << attribution.influence.unsafe_quantile << " w=" << attribution.influence.w_safety << ','
       << attribution.influence.w_self << " sign=" << attribution.influence.safety_sign
       << " last=" << attribution.influence.last_layer_only << " rho=" << attribution.rho << " sweep=";
    for (double r : attribution.rho_sweep) os << r << ',';
    os << "\nsel tau=" << selector.tau_s << " kappa=" << selector.kappa << " jrd=" << selector.jrd_max
       << " alpha=" << selector.cvar_alpha << " cvar=" << selector.cvar_max << " gw=" << selector.gate_width
       << " n=" << grid_n << '\n'
       << "cert inflate=" << certificate.inflate << " grid=" << certificate.grid.n_d << ',' << certificate.grid.n_v
       << ',' << certificate.grid.n_theta << " retrains=" << certificate.sigma_retrains
       << " q=" << certificate.sigma_quantile << " nn=" << certificate.nn_lipschitz_samples
       << " probe=" << certificate.probe_delta_min << " ovr=" << certificate.h_max << ',' << certificate.hdot_max << ','
       << certificate.v_psi << ',' << certificate.sigma << ',' << certificate.l_e << '\n'
       << "bench single=" << bench.single_runs << " low=" << bench.fixed_low << " high=" << bench.fixed_high
       << " oracle=" << bench.include_oracle;
    return os.str();
  }
  std::string digest() const { return fnv1a_hex(canonical()); }
};

namespace detail {

inline std::vector<double> parse_list(std::string s) {
  for (char& c : s)
    if (c == '[' || c == ']') c = ' ';
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    std::size_t used = 0;
    const double v = std::stod(item.substr(first), &used);
    if (item.find_first_not_of(" \t", first + used) != std::string::npos) throw std::invalid_argument(item);
    out.push_back(v);
  }
  return out;
}

inline std::string unquote(std::string s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

class Reader {
 public:
  explicit Reader(const boost::property_tree::ptree& pt) : pt_(pt) {}

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    const auto node = pt_.get_optional<std::string>(key);
    if (!node) return;
    const std::string v = unquote(*node);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1")
          out = true;
        else if (v == "false" || v == "0")
          out = false;
        else
          throw std::invalid_argument(v);
      } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        out = parse_list(v);
      } else if constexpr (std::is_same_v<T, std::vector<int>>) {
        out.clear();
        for (double d : parse_list(v)) {
          if (d != static_cast<int>(d)) throw std::invalid_argument(v);
          out.push_back(static_cast<int>(d));
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t used = 0;
        if (v == "inf")
          out = std::numeric_limits<T>::infinity();
        else
          out = static_cast<T>(std::stod(v, &used));
        if (v != "inf" && used != v.size()) throw std::invalid_argument(v);
      } else {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size() || (x < 0 && std::is_unsigned_v<T>)) throw std::invalid_argument(v);
        out = static_cast<T>(x);
      }
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    }
  }

  void reject_unknown() const {
    for (const auto& [section, body] : pt_) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' outside any section");
      for (const auto& [key, _] : body) {
        const std::string full = section + "." + key;
        if (!used_.count(full)) throw ConfigError("config: unknown key '" + full + "'");
      }
    }
  }

 private:
  const boost::property_tree::ptree& pt_;
  std::set<std::string> used_;
};

}  // namespace detail

/// Parses a sectioned key = value document. Missing keys keep defaults; unknown
/// keys are rejected.
inline PipelineConfig parse_config(std::istream& is, const std::string& name = "<config>") {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(name + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  PipelineConfig c;
  detail::Reader r(pt);
  r.get("run.seed", c.seed);

  auto& g = c.gen;
  r.get("generation.samples", c.samples);
  r.get("generation.d_lo", g.d_lo);
  r.get("generation.d_hi", g.d_hi);
  r.get("generation.v_lo", g.v_lo);
  r.get("generation.v_hi", g.v_hi);
  r.get("generation.theta_lo", g.theta_lo);
  r.get("generation.theta_hi", g.theta_hi);
  r.get("generation.gamma_lo", g.gamma_lo);
  r.get("generation.gamma_hi", g.gamma_hi);
  r.get("generation.obstacle_radius", g.obstacle_radius);
  r.get("generation.goal_beyond", g.goal_beyond);
  r.get("generation.goal_tol", g.goal_tol);
  r.get("generation.dt", g.dt);
  r.get("generation.horizon", g.horizon);
  r.get("generation.k_theta", g.nominal.k_theta);
  r.get("generation.k_v", g.nominal.k_v);
  r.get("generation.v_ref", g.nominal.v_ref);
  r.get("generation.a_max", g.input_bounds.a_max);
  r.get("generation.omega_max", g.input_bounds.omega_max);

  r.get("domain.d_min", g.domain.d_min);
  r.get("domain.d_max", g.domain.d_max);
  r.get("domain.gamma_min", g.domain.gamma_min);
  r.get("domain.gamma_max", g.domain.gamma_max);

  double dmin_target = 1.08, dmax_target = 26.3;
  r.get("surrogate.lambda1", g.surrogate.lambda1);
  r.get("surrogate.lambda2", g.surrogate.lambda2);
  r.get("surrogate.denominator_min", dmin_target);
  r.get("surrogate.denominator_max", dmax_target);
  try {
    g.surrogate = calibrate_beta(g.domain, dmin_target, dmax_target, g.surrogate.lambda1, g.surrogate.lambda2);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("surrogate calibration: ") + e.what());
  }

  r.get("split.train_frac", c.train_frac);

  auto& t = c.train;
  r.get("train.hidden", t.hidden);
  r.get("train.members", t.members);
  r.get("train.epochs", t.epochs);
  r.get("train.batch_size", t.batch_size);
  r.get("train.lr", t.lr);
  r.get("train.checkpoints", t.checkpoints);
  r.get("train.var_floor", t.var_floor);

  auto& a = c.attribution;
  r.get("attribution.unsafe_quantile", a.influence.unsafe_quantile);
  r.get("attribution.w_safety", a.influence.w_safety);
  r.get("attribution.w_self", a.influence.w_self);
  r.get("attribution.safety_sign", a.influence.safety_sign);
  r.get("attribution.last_layer_only", a.influence.last_layer_only);
  r.get("attribution.rho", a.rho);
  r.get("attribution.rho_sweep", a.rho_sweep);

  auto& s = c.selector;
  r.get("selector.tau_s", s.tau_s);
  r.get("selector.kappa", s.kappa);
  r.get("selector.jrd_max", s.jrd_max);
  r.get("selector.cvar_alpha", s.cvar_alpha);
  r.get("selector.cvar_max", s.cvar_max);
  r.get("selector.gate_width", s.gate_width);
  r.get("selector.grid_n", c.grid_n);

  auto& ce = c.certificate;
  r.get("certificate.inflate", ce.inflate);
  r.get("certificate.grid_d", ce.grid.n_d);
  r.get("certificate.grid_v", ce.grid.n_v);
  r.get("certificate.grid_theta", ce.grid.n_theta);
  r.get("certificate.sigma_retrains", ce.sigma_retrains);
  r.get("certificate.sigma_quantile", ce.sigma_quantile);
  r.get("certificate.nn_lipschitz_samples", ce.nn_lipschitz_samples);
  r.get("certificate.probe_delta_min", ce.probe_delta_min);
  r.get("certificate.h_max", ce.h_max);
  r.get("certificate.hdot_max", ce.hdot_max);
  r.get("certificate.v_psi", ce.v_psi);
  r.get("certificate.sigma", ce.sigma);
  r.get("certificate.l_e", ce.l_e);
  ce.grid.d_lo = g.d_lo;
  ce.grid.d_hi = g.d_hi;
  ce.grid.v_lo = g.v_lo;
  ce.grid.v_hi = g.v_hi;
  ce.grid.theta_lo = g.theta_lo;
  ce.grid.theta_hi = g.theta_hi;

  r.get("bench.single_runs", c.bench.single_runs);
  r.get("bench.fixed_low", c.bench.fixed_low);
  r.get("bench.fixed_high", c.bench.fixed_high);
  r.get("bench.include_oracle", c.bench.include_oracle);

  r.reject_unknown();
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  return parse_config(is, path);
}

}  // namespace dacbf

#endif  // DACBF_CONFIG_HPP
