#ifndef DACBF_PIPELINE_HPP
#define DACBF_PIPELINE_HPP

// Batch stages over an output directory. Each stage reads named upstream
// artifacts, checks that they carry the current config digest, and writes its
// own artifacts byte-deterministically (no timestamps, fixed ordering).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dacbf/adaptive_selector.hpp"
#include "dacbf/certificate.hpp"
#include "dacbf/closed_loop.hpp"
#include "dacbf/config.hpp"
#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"
#include "dacbf/risk.hpp"
#include "dacbf/svg.hpp"
#include "dacbf/tracin.hpp"

namespace dacbf {

namespace fs = std::filesystem;
using nlohmann::json;

/// Missing or unreadable upstream artifact (exit code 3).
struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Artifacts from different configurations were mixed (exit code 2).
struct DigestMismatch : ConfigError {
  using ConfigError::ConfigError;
};

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitArtifact = 3, kExitNumerical = 4 };

struct RunContext {
  PipelineConfig cfg;
  fs::path out;
  unsigned jobs = 1;
  std::string digest;  // cfg.digest(), cached

  RunContext(PipelineConfig c, fs::path o, unsigned j) : cfg(std::move(c)), out(std::move(o)), jobs(std::max(1u, j)) {
    cfg.validate();
    digest = cfg.digest();
  }
  fs::path operator/(const std::string& name) const { return out / name; }
};

// ---- artifact helpers ---------------------------------------------------------------

namespace artifact {

inline constexpr const char* kDataset = "dataset.jsonl";
inline constexpr const char* kBaseline = "model_baseline.bin";
inline constexpr const char* kTrainLog = "train_log.csv";
inline constexpr const char* kInfluence = "influence.csv";
inline constexpr const char* kCuration = "curation.json";
inline constexpr const char* kRmseTable = "rmse_table.csv";
inline constexpr const char* kAblation = "ablation.csv";
inline constexpr const char* kMetrics = "metrics.json";
inline constexpr const char* kCertificate = "certificate.json";
inline constexpr const char* kCertGrid = "certified_grid.csv";
inline constexpr const char* kClosedLoopJson = "closed_loop.json";
inline constexpr const char* kClosedLoopCsv = "closed_loop.csv";
inline constexpr const char* kTrajectories = "trajectories";
inline constexpr const char* kReport = "report";

}  // namespace artifact

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string rho_tag(double rho) {
  std::ostringstream os;
  os << "rho_" << std::fixed << std::setprecision(2) << rho;
  return os.str();
}

inline std::string model_file(const std::string& tag) { return "model_" + tag + ".bin"; }

inline void write_text(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << content;
  if (!os) throw std::runtime_error("write failed for " + p.string());
}

inline void require(const fs::path& p) {
  if (!fs::exists(p)) throw ArtifactError("missing artifact: " + p.string());
}

inline std::string read_text(const fs::path& p) {
  require(p);
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ArtifactError("cannot open artifact: " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void check_digest(const std::string& found, const std::string& expected, const fs::path& p) {
  if (found != expected)
    throw DigestMismatch(p.string() + ": config digest " + found + " does not match current config " + expected);
}

/// First line of every CSV artifact.
inline std::string csv_stamp(const RunContext& ctx) {
  return "# config_digest=" + ctx.digest + " seed=" + std::to_string(ctx.cfg.seed) + "\n";
}

inline json json_stamp(const RunContext& ctx) { return {{"config_digest", ctx.digest}, {"seed", ctx.cfg.seed}}; }

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p, const std::string& digest,
                                                      std::vector<std::string>* header = nullptr) {
  std::istringstream is(read_text(p));
  std::string line;
  if (!std::getline(is, line) || line.rfind("# config_digest=", 0) != 0)
    throw ArtifactError(p.string() + ": missing digest stamp");
  const auto stamp = line.substr(16, line.find(' ', 16) - 16);
  check_digest(stamp, digest, p);
  auto split_row = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(is, line)) throw ArtifactError(p.string() + ": missing header row");
  if (header) *header = split_row(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line))
    if (!line.empty()) rows.push_back(split_row(line));
  return rows;
}

inline json read_json_artifact(const fs::path& p, const std::string& digest) {
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ArtifactError(p.string() + ": corrupt JSON (" + e.what() + ")");
  }
  check_digest(j.value("config_digest", std::string{}), digest, p);
  return j;
}

inline double parse_double(const std::string& s, const fs::path& p) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ArtifactError(p.string() + ": bad number '" + s + "'");
  }
}

// ---- loaded inputs -------------------------------------------------------------------

struct Splits {
  Dataset all, train, test;
};

inline Splits load_splits(const RunContext& ctx) {
  const auto p = ctx / artifact::kDataset;
  require(p);
  Splits s;
  try {
    s.all = read_dataset(p.string());
  } catch (const std::runtime_error& e) {
    throw ArtifactError(e.what());
  }
  check_digest(s.all.config_hash, ctx.digest, p);
  std::tie(s.train, s.test) = split(s.all, ctx.cfg.train_frac, ctx.cfg.seed);
  return s;
}

inline LoadedModel load_model(const RunContext& ctx, const std::string& file) {
  const auto p = ctx / file;
  require(p);
  LoadedModel m;
  try {
    m = read_model(p.string());
  } catch (const std::exception& e) {
    throw ArtifactError(e.what());
  }
  check_digest(m.extra.value("config_digest", std::string{}), ctx.digest, p);
  return m;
}

inline void save_model(const RunContext& ctx, const std::string& tag, const TrainResult& r) {
  json extra = json_stamp(ctx);
  extra["tag"] = tag;
  extra["params"] = r.model.num_params();
  write_model((ctx / model_file(tag)).string(), r.model, r.checkpoints, extra);
}

inline TrainResult train_tagged(const RunContext& ctx, const Dataset& data, std::uint64_t seed) {
  return train(data, ctx.cfg.train, seed, ctx.jobs);
}

// ---- stages --------------------------------------------------------------------------

inline void cmd_generate(const RunContext& ctx) {
  auto ds = generate(ctx.cfg.samples, ctx.cfg.seed, ctx.cfg.gen, ctx.jobs);
  ds.config_hash = ctx.digest;
  fs::create_directories(ctx.out);
  write_dataset(ds, (ctx / artifact::kDataset).string());
}

inline void cmd_train(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  const auto r = train_tagged(ctx, s.train, ctx.cfg.seed);
  save_model(ctx, "baseline", r);
  std::ostringstream os;
  os << csv_stamp(ctx) << "epoch";
  for (std::size_t k = 0; k < r.loss_history.size(); ++k) os << ",loss_member" << k;
  os << '\n';
  for (std::size_t e = 0; e < r.loss_history.front().size(); ++e) {
    os << e + 1;
    for (const auto& h : r.loss_history) os << ',' << fmt(h[e]);
    os << '\n';
  }
  write_text(ctx / artifact::kTrainLog, os.str());
}

struct InfluenceTable {
  std::vector<InfluenceRecord> records;  // raw terms, training-set order
};

inline void cmd_attribute(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  const auto m = load_model(ctx, artifact::kBaseline);
  const auto& ic = ctx.cfg.attribution.influence;
  const auto unsafe = unsafe_subset(s.test, ic.unsafe_quantile);
  auto recs = influence_terms(s.train, unsafe, m.checkpoints, m.model.normalization, m.model.var_floor,
                              ic.last_layer_only, ctx.jobs);
  auto infl = recs, self = recs;
  assign_scores(recs, ic, ScoreMode::Combined);
  assign_scores(infl, ic, ScoreMode::InfluenceOnly);
  assign_scores(self, ic, ScoreMode::SelfOnly);
  const auto cur = curate(s.train, recs, ctx.cfg.attribution.rho);
  std::ostringstream os;
  os << csv_stamp(ctx) << "id,tau_safety,tau_self,score,score_influence,score_self,removed\n";
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const bool removed = std::binary_search(cur.removed_ids.begin(), cur.removed_ids.end(), recs[i].id);
    os << recs[i].id << ',' << fmt(recs[i].tau_safety) << ',' << fmt(recs[i].tau_self) << ',' << fmt(recs[i].score)
       << ',' << fmt(infl[i].score) << ',' << fmt(self[i].score) << ',' << (removed ? 1 : 0) << '\n';
  }
  write_text(ctx / artifact::kInfluence, os.str());
}

inline InfluenceTable load_influence(const RunContext& ctx) {
  const auto p = ctx / artifact::kInfluence;
  std::vector<std::string> header;
  const auto rows = read_csv(p, ctx.digest, &header);
  if (header.size() < 3 || header[0] != "id" || header[1] != "tau_safety" || header[2] != "tau_self")
    throw ArtifactError(p.string() + ": unexpected columns");
  InfluenceTable t;
  for (const auto& r : rows) {
    if (r.size() < 3) throw ArtifactError(p.string() + ": short row");
    InfluenceRecord rec;
    rec.id = static_cast<std::int64_t>(parse_double(r[0], p));
    rec.tau_safety = parse_double(r[1], p);
    rec.tau_self = parse_double(r[2], p);
    t.records.push_back(rec);
  }
  return t;
}

/// One curated training set to retrain on.
struct CurationSet {
  std::string tag;
  std::string mode;
  double rho = 0.0;
  std::vector<std::int64_t> removed_ids;
};

/// The sweep over rho with the combined score, plus the two single-signal
/// ablations at the configured rho.
inline std::vector<CurationSet> curation_plan(const Dataset& train_set, const InfluenceTable& t,
                                              const PipelineConfig& cfg) {
  std::vector<CurationSet> out;
  auto scored = [&](ScoreMode mode) {
    auto r = t.records;
    assign_scores(r, cfg.attribution.influence, mode);
    return r;
  };
  const auto combined = scored(ScoreMode::Combined);
  auto sweep = cfg.attribution.rho_sweep;
  if (std::find(sweep.begin(), sweep.end(), cfg.attribution.rho) == sweep.end()) sweep.push_back(cfg.attribution.rho);
  std::sort(sweep.begin(), sweep.end());
  sweep.erase(std::unique(sweep.begin(), sweep.end()), sweep.end());
  for (double rho : sweep) {
    if (rho == 0.0) continue;  // the baseline model
    out.push_back({rho_tag(rho), "combined", rho, curate(train_set, combined, rho).removed_ids});
  }
  for (auto mode : {ScoreMode::InfluenceOnly, ScoreMode::SelfOnly})
    out.push_back({std::string("ablation_") + to_string(mode), to_string(mode), cfg.attribution.rho,
                   curate(train_set, scored(mode), cfg.attribution.rho).removed_ids});
  return out;
}

inline void cmd_curate(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  const auto t = load_influence(ctx);
  if (t.records.size() != s.train.size())
    throw ArtifactError((ctx / artifact::kInfluence).string() + ": record count does not match the training split");
  json j = json_stamp(ctx);
  j["n_train"] = s.train.size();
  j["rho_sweep"] = ctx.cfg.attribution.rho_sweep;
  j["rho"] = ctx.cfg.attribution.rho;
  j["sets"] = json::array();
  for (const auto& c : curation_plan(s.train, t, ctx.cfg))
    j["sets"].push_back({{"tag", c.tag},
                         {"mode", c.mode},
                         {"rho", c.rho},
                         {"removed", c.removed_ids.size()},
                         {"kept", s.train.size() - c.removed_ids.size()},
                         {"removed_ids", c.removed_ids}});
  write_text(ctx / artifact::kCuration, j.dump(2) + "\n");
}

inline std::vector<CurationSet> load_curation(const RunContext& ctx) {
  const auto j = read_json_artifact(ctx / artifact::kCuration, ctx.digest);
  std::vector<CurationSet> out;
  try {
    for (const auto& s : j.at("sets"))
      out.push_back({s.at("tag").get<std::string>(), s.at("mode").get<std::string>(), s.at("rho").get<double>(),
                     s.at("removed_ids").get<std::vector<std::int64_t>>()});
  } catch (const json::exception& e) {
    throw ArtifactError((ctx / artifact::kCuration).string() + ": " + e.what());
  }
  return out;
}

/// Retrains every curated set from the baseline seed, so only the data differs.
inline void cmd_retrain(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  for (const auto& c : load_curation(ctx)) {
    const auto kept = without_ids(s.train, c.removed_ids);
    save_model(ctx, c.tag, train_tagged(ctx, kept, ctx.cfg.seed));
  }
}

/// Model errors under the conventions the certificate and tables use.
struct ModelErrors {
  double test_rmse = 0.0;
  double max_abs = 0.0;
  RiskReport safety;
};

inline ModelErrors model_errors(const EnsembleModel& m, const Dataset& test, double unsafe_q) {
  return {rmse(m, test), max_abs_error(m, test), safety_weighted_report(m, test, unsafe_q)};
}

inline void cmd_evaluate(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  const auto sets = load_curation(ctx);
  const double q = ctx.cfg.attribution.influence.unsafe_quantile;

  struct Row {
    std::string tag, mode;
    double rho;
    std::size_t kept;
    ModelErrors err;
  };
  std::vector<Row> rows;
  rows.push_back({"baseline", "none", 0.0, s.train.size(),
                  model_errors(load_model(ctx, artifact::kBaseline).model, s.test, q)});
  for (const auto& c : sets)
    rows.push_back({c.tag, c.mode, c.rho, s.train.size() - c.removed_ids.size(),
                    model_errors(load_model(ctx, model_file(c.tag)).model, s.test, q)});

  auto line = [](std::ostringstream& os, const Row& r) {
    os << r.tag << ',' << r.mode << ',' << fmt(r.rho) << ',' << r.kept << ',' << fmt(r.err.safety.rmse) << ','
       << fmt(r.err.safety.risk) << ',' << fmt(r.err.test_rmse) << ',' << fmt(r.err.max_abs) << '\n';
  };
  const std::string cols = "tag,mode,rho,kept,sw_rmse,sw_risk,test_rmse,max_abs_err\n";
  std::ostringstream rt, ab;
  rt << csv_stamp(ctx) << cols;
  ab << csv_stamp(ctx) << cols;
  json sweep = json::array();
  for (const auto& r : rows) {
    if (r.mode == "none" || r.mode == "combined") {
      line(rt, r);
      sweep.push_back({{"rho", r.rho}, {"sw_rmse", r.err.safety.rmse}});
    }
    if (r.mode != "none" && r.rho == ctx.cfg.attribution.rho) line(ab, r);
  }
  write_text(ctx / artifact::kRmseTable, rt.str());
  write_text(ctx / artifact::kAblation, ab.str());

  const auto& base = rows.front().err.safety;
  const Row* at_rho = nullptr;
  const Row* best = &rows.front();
  for (const auto& r : rows) {
    if (r.mode == "combined" && r.rho == ctx.cfg.attribution.rho) at_rho = &r;
    if ((r.mode == "combined" || r.mode == "none") && r.err.safety.rmse < best->err.safety.rmse) best = &r;
  }
  json j = json_stamp(ctx);
  j["unsafe_quantile"] = q;
  j["unsafe_threshold"] = base.threshold;
  j["unsafe_count"] = base.count;
  j["n_train"] = s.train.size();
  j["n_test"] = s.test.size();
  j["sweep"] = sweep;
  j["argmin_rho"] = best->rho;
  if (at_rho) j["sw_rmse_reduction_at_rho"] = 1.0 - at_rho->err.safety.rmse / base.rmse;
  j["models"] = json::object();
  for (const auto& r : rows)
    j["models"][r.tag] = {{"mode", r.mode},
                          {"rho", r.rho},
                          {"kept", r.kept},
                          {"sw_rmse", r.err.safety.rmse},
                          {"sw_risk", r.err.safety.risk},
                          {"test_rmse", r.err.test_rmse},
                          {"max_abs_err", r.err.max_abs}};
  write_text(ctx / artifact::kMetrics, j.dump(2) + "\n");
}

// ---- certificate ----------------------------------------------------------------------

inline std::uint64_t retrain_seed(std::uint64_t seed, int r) {
  return derive_seed(seed, 0x5167A000ULL + static_cast<std::uint64_t>(r));
}

/// Envelope estimated from the training sweep, with config overrides applied.
inline StateEnvelope certificate_envelope(const PipelineConfig& cfg, const Dataset& train_set, json& provenance) {
  auto env = envelope_from_dataset(train_set, cfg.gen.input_bounds, cfg.certificate.inflate);
  auto apply = [&](const char* name, double& field, double override_value) {
    if (override_value >= 0.0) {
      field = override_value;
      provenance[name] = to_string(Provenance::User);
    } else {
      provenance[name] = to_string(Provenance::Estimated);
    }
  };
  apply("h_max", env.h_max, cfg.certificate.h_max);
  apply("hdot_max", env.hdot_max, cfg.certificate.hdot_max);
  apply("v_psi", env.v_psi, cfg.certificate.v_psi);
  provenance["lgh_max"] = to_string(Provenance::Analytic);
  provenance["u_max"] = to_string(Provenance::Analytic);
  return env;
}

/// Everything the certificate states about one trained model.
struct ModelCertificate {
  std::string tag;
  ModelErrors err;
  double sigma = 0.0;
  double l_phi_nn = 0.0;
  double l_e = 0.0;
};

inline json null_if_nonfinite(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline ModelCertificate certify_model(const RunContext& ctx, const std::string& tag, const EnsembleModel& model,
                                      const Dataset& train_data, const Dataset& test, double l_phi_true) {
  const auto& cc = ctx.cfg.certificate;
  ModelCertificate mc;
  mc.tag = tag;
  mc.err = model_errors(model, test, ctx.cfg.attribution.influence.unsafe_quantile);
  mc.l_phi_nn = lipschitz_phi_nn(model, ctx.cfg.gen, cc.nn_lipschitz_samples, derive_seed(ctx.cfg.seed, 0x11FULL));
  mc.l_e = cc.l_e >= 0.0 ? cc.l_e : mc.l_phi_nn + l_phi_true;
  if (cc.sigma >= 0.0) {
    mc.sigma = cc.sigma;
  } else {
    std::vector<EnsembleModel> retrains;
    for (int r = 0; r < cc.sigma_retrains; ++r)
      retrains.push_back(train(train_data, ctx.cfg.train, retrain_seed(ctx.cfg.seed, r), ctx.jobs).model);
    mc.sigma = fit_sigma(retrains, test, cc.sigma_quantile);
  }
  return mc;
}

/// Budget, sampling, covering and feasibility conditions for one error level.
inline json certificate_conditions(const RunContext& ctx, double eps, double delta_min, double l_psi, double l_Psi,
                                   double l_m, const StateEnvelope& env, const std::vector<double>& margins) {
  json c;
  c["eps"] = eps;
  c["delta_req"] = delta_req(eps, l_psi, l_m);
  const bool have_budget = delta_min > 0.0;
  const double eps_star = have_budget ? safety_budget(delta_min, l_psi, l_m) : NAN;
  c["eps_budget"] = null_if_nonfinite(eps_star);
  c["budget_pass"] = have_budget && eps <= eps_star;
  json samp;
  if (have_budget && eps <= eps_star && env.v_psi > 0.0) {
    const double dt_max = sampling_bound(delta_min, eps, l_psi, l_m, env.v_psi);
    samp = {{"dt_max", dt_max}, {"dt", ctx.cfg.gen.dt}, {"pass", ctx.cfg.gen.dt <= dt_max}};
  } else {
    samp = {{"dt_max", nullptr}, {"dt", ctx.cfg.gen.dt}, {"pass", false},
            {"reason", have_budget ? "prediction error exceeds the safety budget" : "no positive delta_min"}};
  }
  c["sampling"] = samp;
  const auto fc = qp_feasibility_check(margins, eps, l_Psi, l_m);
  c["qp_feasibility"] = {{"pass", fc.pass}, {"slack", fc.slack}, {"inf_mu", fc.inf_mu}};
  const auto cs = certified_set(margins, eps, l_psi, l_m);
  c["certified_fraction"] = cs.fraction;
  return c;
}

inline json covering_report(double eps, double r, const StateEnvelope& env, double diam, std::size_t n_candidates) {
  try {
    const auto cb = covering_probability(eps, r, env, 3, n_candidates, diam);
    return {{"eps", eps},
            {"probability", cb.probability},
            {"raw", cb.raw},
            {"covering_number", cb.covering_number},
            {"vacuous", cb.vacuous}};
  } catch (const std::domain_error& e) {
    return {{"eps", eps}, {"probability", nullptr}, {"vacuous", true}, {"reason", e.what()}};
  }
}

inline void cmd_certify(const RunContext& ctx) {
  const auto s = load_splits(ctx);
  const auto& cfg = ctx.cfg;
  const auto& b = cfg.gen.domain;
  const auto grid = cfg.candidate_grid();
  const std::string cur_tag = rho_tag(cfg.attribution.rho);
  const auto base = load_model(ctx, artifact::kBaseline);
  const auto cur = load_model(ctx, model_file(cur_tag));
  const auto sets = load_curation(ctx);
  const auto cur_set = std::find_if(sets.begin(), sets.end(), [&](const CurationSet& c) { return c.tag == cur_tag; });
  if (cur_set == sets.end()) throw ArtifactError((ctx / artifact::kCuration).string() + ": no set tagged " + cur_tag);
  const auto cur_train = without_ids(s.train, cur_set->removed_ids);

  json prov;
  auto env = certificate_envelope(cfg, s.train, prov);
  const double l_psi = lipschitz_psi(env, b);
  const double l_Psi = lipschitz_Psi(env, b);
  const double l_m = lipschitz_constant(cfg.selector, b);
  const auto den = denominator_bounds(b, cfg.gen.surrogate);
  const double l_phi_true = lipschitz_phi_true(s.train);

  const auto og = oracle_margin_grid(cfg.certificate.grid, grid, cfg.selector, cfg.gen, ctx.jobs);
  const double r = cfg.certificate.grid.covering_radius();
  const double diam = cfg.certificate.grid.diameter();
  const double grid_min = *std::min_element(og.margins.begin(), og.margins.end());
  const double covering_lb = oracle_margin_bound(og.margins, r, l_psi, l_m, l_phi_true);
  const double delta_min = grid_min;

  std::vector<ModelCertificate> models{certify_model(ctx, "baseline", base.model, s.train, s.test, l_phi_true),
                                       certify_model(ctx, cur_tag, cur.model, cur_train, s.test, l_phi_true)};

  json j = json_stamp(ctx);
  j["constants"] = {
      {"L_psi", {{"value", l_psi}, {"provenance", "analytic bound on estimated envelope"}}},
      {"L_Psi", {{"value", l_Psi}, {"provenance", "analytic bound on estimated envelope"}}},
      {"L_M", {{"value", l_m}, {"provenance", to_string(Provenance::Analytic)}}},
      {"D_min", {{"value", den.d_min}, {"provenance", to_string(Provenance::Analytic)}}},
      {"D_max", {{"value", den.d_max}, {"provenance", to_string(Provenance::Analytic)}}},
      {"L_phi_true", {{"value", l_phi_true}, {"provenance", to_string(Provenance::Estimated)}}},
      {"covering_radius", {{"value", r}, {"provenance", to_string(Provenance::Analytic)}}},
      {"diam_op", {{"value", diam}, {"provenance", to_string(Provenance::Analytic)}}}};
  json envj = to_json(env);
  json env_out;
  for (auto it = envj.begin(); it != envj.end(); ++it) {
    if (it.key() == "l_e" || it.key() == "sigma") continue;  // per model below
    env_out[it.key()] = {{"value", it.value()}, {"provenance", prov.value(it.key(), "estimated")}};
  }
  j["envelope"] = env_out;
  j["delta_min"] = {{"value", delta_min},
                    {"source", "minimum oracle margin over the state grid"},
                    {"provenance", to_string(Provenance::Estimated)},
                    {"covering_lower_bound", covering_lb}};
  j["grid"] = {{"points", og.states.size()},
               {"n_d", cfg.certificate.grid.n_d},
               {"n_v", cfg.certificate.grid.n_v},
               {"n_theta", cfg.certificate.grid.n_theta},
               {"candidates", grid.candidates.size()}};

  const double probe_eps = safety_budget(cfg.certificate.probe_delta_min, l_psi, l_m);
  j["models"] = json::object();
  for (const auto& mc : models) {
    StateEnvelope menv = env;
    menv.l_e = mc.l_e;
    menv.sigma = mc.sigma;
    json m;
    m["errors"] = {{"max_abs", mc.err.max_abs},
                   {"test_rmse", mc.err.test_rmse},
                   {"sw_rmse", mc.err.safety.rmse},
                   {"sw_max_abs", mc.err.safety.max_abs_err}};
    m["sigma"] = {{"value", mc.sigma}, {"provenance", cfg.certificate.sigma >= 0.0 ? "user" : "estimated"}};
    m["L_phi_nn"] = {{"value", mc.l_phi_nn}, {"provenance", to_string(Provenance::Estimated)}};
    m["L_e"] = {{"value", mc.l_e}, {"provenance", cfg.certificate.l_e >= 0.0 ? "user" : "estimated"}};
    // primary convention: max |error| on the test split; plain and
    // safety-weighted RMSE reported alongside
    m["max_abs"] = certificate_conditions(ctx, mc.err.max_abs, delta_min, l_psi, l_Psi, l_m, menv, og.margins);
    m["rmse"] = certificate_conditions(ctx, mc.err.test_rmse, delta_min, l_psi, l_Psi, l_m, menv, og.margins);
    m["sw_rmse"] = certificate_conditions(ctx, mc.err.safety.rmse, delta_min, l_psi, l_Psi, l_m, menv, og.margins);
    m["covering_at_probe"] = covering_report(probe_eps, r, menv, diam, grid.candidates.size());
    m["covering_at_probe"]["delta_min"] = cfg.certificate.probe_delta_min;
    // error inversion composed with the margin bound at the median test label, flagged as such
    std::vector<double> labels;
    for (const auto& z : s.test.samples) labels.push_back(z.phi_label);
    const double med = empirical_quantile(labels, 0.5);
    m["psi_error_at_median_label"] = {
        {"phi_hat", med},
        {"bound", null_if_nonfinite(psi_error_bound(med, mc.err.max_abs, b, cfg.gen.surrogate))},
        {"note", "composes invert_psi_error with the margin upper bound implied by phi_hat - eps"}};
    j["models"][mc.tag] = m;
  }

  // nesting over every computed eps pair, and the expansion between the two models
  std::vector<double> eps_list;
  for (const auto& mc : models) eps_list.insert(eps_list.end(), {mc.err.max_abs, mc.err.test_rmse, mc.err.safety.rmse});
  std::sort(eps_list.begin(), eps_list.end());
  std::size_t pairs = 0, violations = 0;
  for (std::size_t a = 0; a < eps_list.size(); ++a)
    for (std::size_t c = 0; c < a; ++c) {
      if (!(eps_list[c] < eps_list[a])) continue;
      ++pairs;
      if (!certified_expansion(og.margins, eps_list[a], eps_list[c], l_psi, l_m).nested) ++violations;
    }
  j["nesting"] = {{"pairs", pairs}, {"violations", violations}};
  auto expansion = [&](double eb, double en) {
    const auto x = certified_expansion(og.margins, eb, en, l_psi, l_m);
    return json{{"eps_baseline", eb},
                {"eps_curated", en},
                {"fraction_baseline", x.fraction_base},
                {"fraction_curated", x.fraction_new},
                {"delta_req_baseline", x.delta_req_base},
                {"delta_req_curated", x.delta_req_new},
                {"margin_requirement_reduction", x.reduction},
                {"strict_expansion", x.fraction_new > x.fraction_base},
                {"nested", x.nested}};
  };
  j["expansion"] = {{"max_abs", expansion(models[0].err.max_abs, models[1].err.max_abs)},
                    {"rmse", expansion(models[0].err.test_rmse, models[1].err.test_rmse)},
                    {"sw_rmse", expansion(models[0].err.safety.rmse, models[1].err.safety.rmse)}};
  j["primary_convention"] = "max_abs";
  write_text(ctx / artifact::kCertificate, j.dump(2) + "\n");

  const auto cs_base = certified_set(og.margins, models[0].err.max_abs, l_psi, l_m);
  const auto cs_cur = certified_set(og.margins, models[1].err.max_abs, l_psi, l_m);
  std::ostringstream os;
  os << csv_stamp(ctx) << "d,v,delta_theta,gamma0,gamma1,margin,certified_baseline,certified_curated\n";
  for (std::size_t i = 0; i < og.states.size(); ++i)
    os << fmt(og.states[i].d) << ',' << fmt(og.states[i].v) << ',' << fmt(og.states[i].delta_theta) << ','
       << fmt(og.gamma_star[i].g0) << ',' << fmt(og.gamma_star[i].g1) << ',' << fmt(og.margins[i]) << ','
       << cs_base.mask[i] << ',' << cs_cur.mask[i] << '\n';
  write_text(ctx / artifact::kCertGrid, os.str());
}

// ---- closed loop ----------------------------------------------------------------------

struct BenchModels {
  EnsembleModel baseline, curated;
};

/// Controllers in report order. The low/high fixed gains sit outside the
/// training box, so in-box equivalents at the box corners run alongside.
inline std::vector<ControllerSpec> bench_controllers(const PipelineConfig& cfg, const BenchModels& m) {
  std::vector<ControllerSpec> c{ControllerSpec::fixed("fixed_low", cfg.bench.fixed_low),
                                ControllerSpec::fixed("fixed_high", cfg.bench.fixed_high),
                                ControllerSpec::fixed("fixed_low_in", cfg.gen.domain.gamma_min),
                                ControllerSpec::fixed("fixed_high_in", cfg.gen.domain.gamma_max),
                                ControllerSpec::learned("adaptive", m.baseline),
                                ControllerSpec::learned("dacbf", m.curated)};
  if (cfg.bench.include_oracle) c.push_back(ControllerSpec::oracle("oracle"));
  return c;
}

inline std::vector<Scenario> bench_scenarios(const PipelineConfig& cfg) {
  const auto L = build_standard_layouts();
  std::vector<Scenario> s{L.simple, L.complex};
  for (int i = 0; i < cfg.bench.single_runs; ++i)
    s.push_back(single_obstacle_scenario(derive_seed(cfg.seed, 0x5C0000ULL + static_cast<std::uint64_t>(i))));
  return s;
}

inline void cmd_simulate(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  BenchModels m{load_model(ctx, artifact::kBaseline).model,
                load_model(ctx, model_file(rho_tag(cfg.attribution.rho))).model};
  BenchConfig bc;
  bc.gen = cfg.gen;
  bc.grid = cfg.candidate_grid();
  bc.selector = cfg.selector;
  const auto scenarios = bench_scenarios(cfg);
  const auto controllers = bench_controllers(cfg, m);
  const auto res = run_suite(scenarios, controllers, bc, ctx.jobs);

  json j = json_stamp(ctx);
  j["dt"] = scenarios.front().dt;
  j["rows"] = json::array();
  std::ostringstream os;
  os << csv_stamp(ctx)
     << "scenario,controller,episodes,collisions,deadlock_rate,mean_time_to_goal,mean_min_h,infeasible_steps\n";
  for (const auto& r : res.rows) {
    j["rows"].push_back({{"scenario", r.scenario},
                         {"controller", r.controller},
                         {"episodes", r.episodes},
                         {"collisions", r.collisions},
                         {"deadlock_rate", r.deadlock_rate},
                         {"mean_time_to_goal", r.mean_time_to_goal},
                         {"mean_min_h", r.mean_min_h},
                         {"infeasible_steps", r.infeasible_steps}});
    os << r.scenario << ',' << r.controller << ',' << r.episodes << ',' << r.collisions << ',' << fmt(r.deadlock_rate)
       << ',' << fmt(r.mean_time_to_goal) << ',' << fmt(r.mean_min_h) << ',' << r.infeasible_steps << '\n';
  }
  j["episodes"] = json::array();
  for (const auto& e : res.episodes) {
    if (e.scenario == "single") continue;  // aggregated in rows; traces kept for the fixed layouts
    auto ej = to_json(e);
    ej.erase("trajectory");
    ej.erase("gamma_trace");
    j["episodes"].push_back(ej);
    std::ostringstream t;
    write_trajectory_csv(e, scenarios.front().dt, t);
    write_text(ctx.out / artifact::kTrajectories / (e.scenario + "__" + e.controller + ".csv"), csv_stamp(ctx) + t.str());
  }
  write_text(ctx / artifact::kClosedLoopJson, j.dump(2) + "\n");
  write_text(ctx / artifact::kClosedLoopCsv, os.str());
}

// ---- report ------------------------------------------------------------------------

/// Safety-consistency check: if the measured error is within budget and the
/// oracle keeps a positive margin on visited states, DA-CBF must not collide.
inline json closed_loop_consistency(const json& cert, const json& cl, const std::string& cur_tag) {
  const auto& mc = cert.at("models").at(cur_tag).at("max_abs");
  const bool within = mc.at("budget_pass").get<bool>();
  auto episode = [&](const std::string& sc, const std::string& ctl) -> const json* {
    for (const auto& e : cl.at("episodes"))
      if (e.at("scenario") == sc && e.at("controller") == ctl) return &e;
    return nullptr;
  };
  json out;
  const json* oracle = episode("simple", "oracle");
  const json* dacbf = episode("simple", "dacbf");
  const json* low = episode("simple", "fixed_low");
  const double oracle_margin =
      oracle && !oracle->at("min_margin").is_null() ? oracle->at("min_margin").get<double>() : NAN;
  const bool precondition = within && oracle_margin > 0.0;
  out["eps"] = mc.at("eps");
  out["eps_budget"] = mc.at("eps_budget");
  out["within_budget"] = within;
  out["oracle_visited_margin"] = null_if_nonfinite(oracle_margin);
  out["precondition_holds"] = precondition;
  out["dacbf_collisions_simple"] = dacbf ? dacbf->at("collisions") : json(nullptr);
  out["implication_holds"] = !precondition || (dacbf && dacbf->at("collisions").get<int>() == 0);
  out["fixed_low_collisions_simple"] = low ? low->at("collisions") : json(nullptr);
  int adaptive16 = -1, dacbf16 = -1;
  for (const auto& r : cl.at("rows")) {
    if (r.at("scenario") != "complex16") continue;
    if (r.at("controller") == "adaptive") adaptive16 = r.at("collisions").get<int>();
    if (r.at("controller") == "dacbf") dacbf16 = r.at("collisions").get<int>();
  }
  out["complex16_collisions"] = {{"adaptive", adaptive16}, {"dacbf", dacbf16}};
  return out;
}

inline void cmd_report(const RunContext& ctx) {
  // presence first, in pipeline order, so the first missing artifact is named
  for (const char* a : {artifact::kDataset, artifact::kBaseline, artifact::kInfluence, artifact::kCuration,
                        artifact::kRmseTable, artifact::kAblation, artifact::kMetrics, artifact::kCertificate,
                        artifact::kCertGrid, artifact::kClosedLoopJson, artifact::kClosedLoopCsv})
    require(ctx / a);

  const auto rep = ctx.out / artifact::kReport;
  const auto metrics = read_json_artifact(ctx / artifact::kMetrics, ctx.digest);
  const auto cert = read_json_artifact(ctx / artifact::kCertificate, ctx.digest);
  const auto cl = read_json_artifact(ctx / artifact::kClosedLoopJson, ctx.digest);
  read_json_artifact(ctx / artifact::kCuration, ctx.digest);
  load_model(ctx, artifact::kBaseline);
  load_splits(ctx);

  // error table and removal-fraction sweep
  std::vector<std::string> hdr;
  const auto rt = read_csv(ctx / artifact::kRmseTable, ctx.digest, &hdr);
  svg::Series sweep{"safety-weighted RMSE", {}, {}};
  for (const auto& r : rt) {
    sweep.x.push_back(parse_double(r.at(2), ctx / artifact::kRmseTable));
    sweep.y.push_back(parse_double(r.at(4), ctx / artifact::kRmseTable));
  }
  std::ostringstream t1;
  t1 << csv_stamp(ctx) << "rho,kept,sw_rmse,test_rmse\n";
  for (const auto& r : rt) t1 << r.at(2) << ',' << r.at(3) << ',' << r.at(4) << ',' << r.at(6) << '\n';
  write_text(rep / "table_rmse.csv", t1.str());
  write_text(rep / "removal_sweep.svg",
             svg::line_plot({sweep}, "Removal fraction sweep", "removal fraction rho", "safety-weighted RMSE"));

  // ablation table
  const auto ab = read_csv(ctx / artifact::kAblation, ctx.digest, &hdr);
  std::ostringstream t2;
  t2 << csv_stamp(ctx) << "score,rho,sw_rmse\n";
  for (const auto& r : ab) t2 << r.at(1) << ',' << r.at(2) << ',' << r.at(4) << '\n';
  write_text(rep / "table_ablation.csv", t2.str());

  // influence histogram
  const auto infl = load_influence(ctx);
  std::vector<double> taus;
  for (const auto& r : infl.records) taus.push_back(r.tau_safety);
  std::vector<int> counts;
  std::vector<double> edges;
  write_text(rep / "influence_hist.svg", svg::histogram(taus, 40, "TracIn safety influence", "tau_safety", &counts, &edges));
  std::ostringstream hc;
  hc << csv_stamp(ctx) << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < counts.size(); ++i) hc << fmt(edges[i]) << ',' << fmt(edges[i + 1]) << ',' << counts[i] << '\n';
  write_text(rep / "influence_hist.csv", hc.str());
  std::size_t positive = 0;
  for (double t : taus) positive += t > 0.0;

  // certificate summary
  std::ostringstream cs;
  cs << csv_stamp(ctx) << "model,convention,eps,delta_req,eps_budget,budget_pass,certified_fraction,qp_feasible\n";
  for (auto it = cert.at("models").begin(); it != cert.at("models").end(); ++it)
    for (const char* conv : {"max_abs", "rmse", "sw_rmse"}) {
      const auto& c = it.value().at(conv);
      cs << it.key() << ',' << conv << ',' << fmt(c.at("eps").get<double>()) << ','
         << fmt(c.at("delta_req").get<double>()) << ','
         << (c.at("eps_budget").is_null() ? std::string("") : fmt(c.at("eps_budget").get<double>())) << ','
         << c.at("budget_pass").get<bool>() << ',' << fmt(c.at("certified_fraction").get<double>()) << ','
         << c.at("qp_feasibility").at("pass").get<bool>() << '\n';
    }
  write_text(rep / "certificate_summary.csv", cs.str());

  // closed-loop table
  std::ostringstream ct;
  ct << csv_stamp(ctx) << "scenario,controller,episodes,collisions,deadlock_rate,mean_time_to_goal,mean_min_h\n";
  for (const auto& r : cl.at("rows"))
    ct << r.at("scenario").get<std::string>() << ',' << r.at("controller").get<std::string>() << ','
       << r.at("episodes").get<int>() << ',' << r.at("collisions").get<int>() << ','
       << fmt(r.at("deadlock_rate").get<double>()) << ',' << fmt(r.at("mean_time_to_goal").get<double>()) << ','
       << fmt(r.at("mean_min_h").get<double>()) << '\n';
  write_text(rep / "closed_loop_table.csv", ct.str());

  json sum = json_stamp(ctx);
  sum["sweep"] = metrics.at("sweep");
  sum["argmin_rho"] = metrics.at("argmin_rho");
  if (metrics.contains("sw_rmse_reduction_at_rho")) sum["sw_rmse_reduction_at_rho"] = metrics["sw_rmse_reduction_at_rho"];
  sum["influence_positive_fraction"] = taus.empty() ? 0.0 : static_cast<double>(positive) / taus.size();
  sum["expansion"] = cert.at("expansion");
  sum["closed_loop_consistency"] = closed_loop_consistency(cert, cl, rho_tag(ctx.cfg.attribution.rho));
  write_text(rep / "summary.json", sum.dump(2) + "\n");
}

/// Runs every stage in order.
inline void cmd_all(const RunContext& ctx) {
  cmd_generate(ctx);
  cmd_train(ctx);
  cmd_attribute(ctx);
  cmd_curate(ctx);
  cmd_retrain(ctx);
  cmd_evaluate(ctx);
  cmd_certify(ctx);
  cmd_simulate(ctx);
  cmd_report(ctx);
}

}  // namespace dacbf

#endif  // DACBF_PIPELINE_HPP
