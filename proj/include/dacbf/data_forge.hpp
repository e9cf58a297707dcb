#ifndef DACBF_DATA_FORGE_HPP
#define DACBF_DATA_FORGE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dacbf/barrier_qp.hpp"
#include "dacbf/rng.hpp"
#include "dacbf/safety_surrogate.hpp"
#include "dacbf/unicycle.hpp"

namespace dacbf {

enum class Outcome { Success, Collision, Deadlock };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "success";
    case Outcome::Collision: return "collision";
    case Outcome::Deadlock: return "deadlock";
  }
  return "?";
}

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "success") return Outcome::Success;
  if (s == "collision") return Outcome::Collision;
  if (s == "deadlock") return Outcome::Deadlock;
  throw std::runtime_error("unknown outcome '" + s + "'");
}

/// Relative-state features of one robot/obstacle encounter.
struct Features {
  double d = 1.0;            // distance to obstacle center, m
  double v = 0.5;            // forward speed, m/s
  double delta_theta = 0.0;  // rad, [0, pi]
};

struct LabeledSample {
  std::int64_t id = 0;
  Features s;
  GammaPair gamma;
  double phi_label = 0.0;
  double td_label = 0.0;
  Outcome outcome = Outcome::Success;
  PhiInputs worst;                       // step that produced phi_label
  std::array<double, 3> envelope{};      // max |h|, |hdot|, |psi_dot| over in-domain steps
};

struct Dataset {
  std::vector<LabeledSample> samples;
  std::uint64_t seed = 0;
  std::string config_hash;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Proportional goal-seeking controller used before the safety filter.
struct NominalController {
  double k_theta = 2.0;
  double k_v = 1.0;
  double v_ref = 1.0;

  ControlInput operator()(const RobotState& s, double goal_x, double goal_y, const InputBounds& b) const {
    const double heading = std::atan2(goal_y - s.y, goal_x - s.x);
    return b.clip({k_v * (v_ref - s.v), k_theta * wrap_angle(heading - s.theta)});
  }
};

struct GenerationConfig {
  // sampling ranges for the initial encounter
  double d_lo = 0.65, d_hi = 2.5;
  double v_lo = 0.01, v_hi = 1.0;
  double theta_lo = 0.01, theta_hi = std::numbers::pi / 2.0;
  double gamma_lo = 0.5, gamma_hi = 2.5;

  double obstacle_radius = 0.5;  // inflated: 0.3 m obstacle + 0.2 m robot
  double goal_beyond = 2.0;      // goal distance along the initial heading, beyond d
  double goal_tol = 0.3;
  double dt = 0.05;
  double horizon = 20.0;

  NominalController nominal;
  InputBounds input_bounds;
  DomainBounds domain;
  SurrogateParams surrogate = default_surrogate_params();

  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "gen/v1 d=" << d_lo << ',' << d_hi << " v=" << v_lo << ',' << v_hi
       << " th=" << theta_lo << ',' << theta_hi << " g=" << gamma_lo << ',' << gamma_hi << " r=" << obstacle_radius
       << " goal=" << goal_beyond << ',' << goal_tol << " dt=" << dt << " T=" << horizon << " nom=" << nominal.k_theta
       << ',' << nominal.k_v << ',' << nominal.v_ref << " u=" << input_bounds.a_max << ',' << input_bounds.omega_max
       << " dom=" << domain.d_min << ',' << domain.d_max << ',' << domain.gamma_min << ',' << domain.gamma_max
       << " sur=" << surrogate.lambda1 << ',' << surrogate.lambda2 << ',' << surrogate.beta1 << ','
       << surrogate.beta2;
    return os.str();
  }
  std::string hash() const { return fnv1a_hex(canonical()); }
};

struct EncounterResult {
  double phi_label = 0.0;
  double td_label = 0.0;
  Outcome outcome = Outcome::Success;
  PhiInputs worst;
  std::array<double, 3> envelope{};
  int infeasible_steps = 0;
};

/// Single-obstacle encounter under the CBF-QP with fixed gamma. The robot starts
/// at the origin with heading delta_theta, the obstacle sits at (d, 0) and the
/// goal lies straight ahead along the initial heading, so the outcome is a
/// function of (s, gamma) alone.
inline EncounterResult run_encounter(const Features& s, const GammaPair& g, const GenerationConfig& cfg) {
  const Obstacle obs{s.d, 0.0, cfg.obstacle_radius};
  const double reach = s.d + cfg.goal_beyond;
  const double gx = reach * std::cos(s.delta_theta);
  const double gy = reach * std::sin(s.delta_theta);
  RobotState st{0.0, 0.0, wrap_angle(s.delta_theta), s.v};

  EncounterResult res;
  res.phi_label = -std::numeric_limits<double>::infinity();
  res.td_label = cfg.horizon;
  res.outcome = Outcome::Deadlock;

  const int steps = static_cast<int>(std::lround(cfg.horizon / cfg.dt));
  double prev_psi = std::numeric_limits<double>::quiet_NaN();
  for (int k = 0; k <= steps; ++k) {
    const double t = k * cfg.dt;
    const auto be = eval_barrier(st, obs);
    if (be.h < 0.0) {
      res.outcome = Outcome::Collision;
      break;
    }
    if (std::hypot(st.x - gx, st.y - gy) <= cfg.goal_tol) {
      res.outcome = Outcome::Success;
      res.td_label = t;
      break;
    }
    if (k == steps) break;

    const auto u_nom = cfg.nominal(st, gx, gy, cfg.input_bounds);
    const auto qp = build_qp(be, u_nom, g, cfg.input_bounds);
    const auto fc = filter_control(qp);
    if (fc.infeasible) ++res.infeasible_steps;

    const double d = obstacle_distance(st, obs);
    if (cfg.domain.contains_distance(d)) {
      const PhiInputs in{d, relative_heading(st, obs), fc.margin};
      const double ph = phi(in, cfg.domain, cfg.surrogate);
      if (ph > res.phi_label) {
        res.phi_label = ph;
        res.worst = in;
      }
      res.envelope[0] = std::max(res.envelope[0], std::abs(be.h));
      res.envelope[1] = std::max(res.envelope[1], std::abs(be.h_dot));
      if (std::isfinite(prev_psi)) res.envelope[2] = std::max(res.envelope[2], std::abs(fc.margin - prev_psi) / cfg.dt);
      prev_psi = fc.margin;
    } else {
      prev_psi = std::numeric_limits<double>::quiet_NaN();
    }
    st = step(st, fc.u, cfg.dt);
  }
  if (!std::isfinite(res.phi_label)) throw std::logic_error("run_encounter: no in-domain step (start outside domain?)");
  return res;
}

/// Ground-truth safety loss of (s, gamma): the label the predictor learns.
inline double true_phi(const Features& s, const GammaPair& g, const GenerationConfig& cfg) {
  return run_encounter(s, g, cfg).phi_label;
}

inline LabeledSample generate_sample(std::int64_t id, std::uint64_t seed, const GenerationConfig& cfg) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
  LabeledSample z;
  z.id = id;
  z.s.d = rng.uniform(cfg.d_lo, cfg.d_hi);
  z.s.v = rng.uniform(cfg.v_lo, cfg.v_hi);
  z.s.delta_theta = rng.uniform(cfg.theta_lo, cfg.theta_hi);
  z.gamma = {rng.uniform(cfg.gamma_lo, cfg.gamma_hi), rng.uniform(cfg.gamma_lo, cfg.gamma_hi)};
  const auto r = run_encounter(z.s, z.gamma, cfg);
  z.phi_label = r.phi_label;
  z.td_label = r.td_label;
  z.outcome = r.outcome;
  z.worst = r.worst;
  z.envelope = r.envelope;
  return z;
}

/// Seeded sweep of n encounters. Work is split across `jobs` threads; each
/// sample depends only on (seed, id), so the result is independent of `jobs`.
inline Dataset generate(std::size_t n, std::uint64_t seed, const GenerationConfig& cfg, unsigned jobs = 1) {
  Dataset ds;
  ds.seed = seed;
  ds.config_hash = cfg.hash();
  ds.samples.resize(n);
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < n; i += jobs) ds.samples[i] = generate_sample(static_cast<std::int64_t>(i), seed, cfg);
  };
  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return ds;
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split: train_frac must be in (0, 1)");
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5117ULL));
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(ds.size())));
  Dataset train, test;
  train.seed = test.seed = ds.seed;
  train.config_hash = test.config_hash = ds.config_hash;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? train : test).samples.push_back(ds.samples[idx[i]]);
  auto by_id = [](const LabeledSample& a, const LabeledSample& b) { return a.id < b.id; };
  std::sort(train.samples.begin(), train.samples.end(), by_id);
  std::sort(test.samples.begin(), test.samples.end(), by_id);
  return {std::move(train), std::move(test)};
}

/// Samples whose id is not in `removed` (sorted or not).
inline Dataset without_ids(const Dataset& ds, const std::vector<std::int64_t>& removed) {
  std::vector<std::int64_t> r = removed;
  std::sort(r.begin(), r.end());
  Dataset out;
  out.seed = ds.seed;
  out.config_hash = ds.config_hash;
  for (const auto& z : ds.samples)
    if (!std::binary_search(r.begin(), r.end(), z.id)) out.samples.push_back(z);
  return out;
}

/// Linear-interpolated empirical quantile (q in [0, 1]).
inline double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("empirical_quantile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Test samples with phi above the q-quantile of the test labels. q = 0 keeps
/// every sample (weight identically one).
inline Dataset unsafe_subset(const Dataset& test, double q) {
  if (test.empty()) throw std::invalid_argument("unsafe_subset: empty test set");
  Dataset out;
  out.seed = test.seed;
  out.config_hash = test.config_hash;
  if (q <= 0.0) {
    out.samples = test.samples;
    return out;
  }
  std::vector<double> labels;
  for (const auto& z : test.samples) labels.push_back(z.phi_label);
  const double thr = empirical_quantile(labels, q);
  for (const auto& z : test.samples)
    if (z.phi_label > thr) out.samples.push_back(z);
  if (out.empty()) {
    std::ostringstream os;
    os << "unsafe_subset: no test label exceeds the " << q << " quantile (" << thr << ")";
    throw std::runtime_error(os.str());
  }
  return out;
}

// ---- persistence -------------------------------------------------------------

inline nlohmann::json sample_to_json(const LabeledSample& z) {
  return {{"kind", "sample"},
          {"id", z.id},
          {"s", {z.s.d, z.s.v, z.s.delta_theta}},
          {"gamma", {z.gamma.g0, z.gamma.g1}},
          {"phi", z.phi_label},
          {"td", z.td_label},
          {"outcome", to_string(z.outcome)},
          {"worst", {z.worst.d, z.worst.delta_theta, z.worst.psi}},
          {"env", {z.envelope[0], z.envelope[1], z.envelope[2]}}};
}

inline LabeledSample sample_from_json(const nlohmann::json& j) {
  LabeledSample z;
  z.id = j.at("id").get<std::int64_t>();
  const auto& s = j.at("s");
  z.s = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
  z.gamma = {j.at("gamma").at(0).get<double>(), j.at("gamma").at(1).get<double>()};
  z.phi_label = j.at("phi").get<double>();
  z.td_label = j.at("td").get<double>();
  z.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  if (j.contains("worst")) {
    const auto& w = j.at("worst");
    z.worst = {w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>()};
  }
  if (j.contains("env")) {
    const auto& e = j.at("env");
    z.envelope = {e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>()};
  }
  return z;
}

inline void write_dataset(const Dataset& ds, std::ostream& os) {
  const nlohmann::json header = {{"kind", "header"}, {"seed", ds.seed}, {"config_hash", ds.config_hash}, {"version", 1}};
  os << header.dump() << '\n';
  for (const auto& z : ds.samples) os << sample_to_json(z).dump() << '\n';
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_dataset(ds, os);
}

inline Dataset read_dataset(std::istream& is, const std::string& name = "<stream>") {
  Dataset ds;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(name + ": empty dataset file");
  const auto header = nlohmann::json::parse(line);
  if (header.value("kind", "") != "header" || header.value("version", 0) != 1)
    throw std::runtime_error(name + ": missing or unsupported header record");
  ds.seed = header.at("seed").get<std::uint64_t>();
  ds.config_hash = header.at("config_hash").get<std::string>();
  std::int64_t expect = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.value("kind", "") != "sample") throw std::runtime_error(name + ": unexpected record kind");
    auto z = sample_from_json(j);
    if (z.id != expect++) throw std::runtime_error(name + ": sample ids are not dense");
    ds.samples.push_back(std::move(z));
  }
  return ds;
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_dataset(is, path);
}

}  // namespace dacbf

#endif  // DACBF_DATA_FORGE_HPP
