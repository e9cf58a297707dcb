#ifndef DACBF_TRACIN_HPP
#define DACBF_TRACIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"

namespace dacbf {

/// Gradient of a single sample's loss, flattened in MlpWeights::flatten order.
/// The sample is normalized with `norm` first.
inline Eigen::VectorXd per_sample_gradient(const MlpWeights& m, const Normalizer& norm, const LabeledSample& z,
                                           double var_floor, LossHeads heads = LossHeads::Both) {
  Dataset one;
  one.samples.push_back(z);
  Eigen::MatrixXd X, Y;
  design_matrices(one, norm, X, Y);
  return loss_gradient(m, X, Y, var_floor, heads, false).flatten();
}

namespace detail {

/// Per-layer backprop deltas dLoss_j/dz_l for every column j (unscaled sum loss).
inline std::vector<Eigen::MatrixXd> layer_deltas(const MlpWeights& m, const ForwardCache& c, const Eigen::MatrixXd& d_raw) {
  std::vector<Eigen::MatrixXd> dz(m.W.size());
  dz.back() = d_raw;
  for (std::size_t l = m.W.size() - 1; l > 0; --l) {
    const Eigen::MatrixXd da = m.W[l].transpose() * dz[l];
    dz[l - 1] = da.cwiseProduct((c.z[l - 1].array() > 0.0).cast<double>().matrix());
  }
  return dz;
}

}  // namespace detail

/// Per-sample inner products <grad_j, G> and squared norms |grad_j|^2 for all
/// columns of (X, Y) at once. Uses the rank-one structure of each layer's
/// per-sample weight gradient (delta a^T), so no per-sample vector is formed.
/// With last_layer_only, both quantities are restricted to the output layer.
inline void gradient_dots(const MlpWeights& m, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double var_floor,
                          const MlpWeights& G, bool last_layer_only, Eigen::VectorXd& dots, Eigen::VectorXd& sq_norms) {
  const auto cache = forward_cache(m, X);
  Eigen::MatrixXd d_raw;
  nll_and_output_grad(cache.a.back(), Y, var_floor, LossHeads::Both, &d_raw);
  const auto dz = detail::layer_deltas(m, cache, d_raw);
  const Eigen::Index B = X.cols();
  dots = Eigen::VectorXd::Zero(B);
  sq_norms = Eigen::VectorXd::Zero(B);
  const std::size_t first = last_layer_only ? m.W.size() - 1 : 0;
  for (std::size_t l = first; l < m.W.size(); ++l) {
    const Eigen::MatrixXd& a = cache.a[l];
    // <delta a^T, G_W> = sum_i delta_i (G_W a)_i
    const Eigen::MatrixXd ga = G.W[l] * a;
    dots += (dz[l].cwiseProduct(ga)).colwise().sum().transpose();
    dots += (dz[l].transpose() * G.b[l]);
    const Eigen::VectorXd dn = dz[l].colwise().squaredNorm().transpose();
    const Eigen::VectorXd an = a.colwise().squaredNorm().transpose();
    sq_norms += dn.cwiseProduct(an) + dn;
  }
}

struct InfluenceRecord {
  std::int64_t id = 0;
  double tau_safety = 0.0;
  double tau_self = 0.0;
  double score = 0.0;
};

/// Which raw signals enter the curation score.
enum class ScoreMode { Combined, InfluenceOnly, SelfOnly };

inline const char* to_string(ScoreMode m) {
  switch (m) {
    case ScoreMode::Combined: return "combined";
    case ScoreMode::InfluenceOnly: return "influence";
    case ScoreMode::SelfOnly: return "self";
  }
  return "?";
}

struct InfluenceConfig {
  double unsafe_quantile = 0.75;
  double w_safety = 0.7;
  double w_self = 0.3;
  bool last_layer_only = false;
  // +1: a sample whose gradient aligns with the unsafe-test gradient scores high.
  // -1: anti-aligned samples score high, i.e. those whose removal lowers the
  // unsafe-set loss to first order under gradient descent.
  double safety_sign = -1.0;
};

/// eta_k for a checkpoint: recorded lr times the epochs it stands for.
inline double checkpoint_eta(const Checkpoint& c) { return c.lr * static_cast<double>(c.interval_epochs); }

/// Raw TracIn terms for every training sample, averaged over ensemble members:
/// tau_safety_i = sum_k eta_k <grad l(z_i; w_k), mean_t grad l_phi(z_t; w_k)>,
/// tau_self_i   = sum_k eta_k |grad l(z_i; w_k)|^2.
/// Records are in training-set order.
inline std::vector<InfluenceRecord> influence_terms(const Dataset& train_set, const Dataset& unsafe,
                                                    const std::vector<Checkpoint>& checkpoints, const Normalizer& norm,
                                                    double var_floor, bool last_layer_only = false,
                                                    unsigned jobs = 1) {
  if (unsafe.empty()) throw std::invalid_argument("influence_terms: empty unsafe set");
  if (checkpoints.empty()) throw std::invalid_argument("influence_terms: no checkpoints");
  Eigen::MatrixXd X, Y, Xt, Yt;
  design_matrices(train_set, norm, X, Y);
  design_matrices(unsafe, norm, Xt, Yt);
  const auto N = static_cast<Eigen::Index>(train_set.size());
  const std::size_t K = checkpoints.front().weights.size();

  // one partial sum per (checkpoint, member) task, reduced in fixed order
  const std::size_t tasks = checkpoints.size() * K;
  std::vector<Eigen::VectorXd> part_safety(tasks), part_self(tasks);
  auto run = [&](std::size_t t) {
    const auto& ck = checkpoints[t / K];
    const auto& w = ck.weights[t % K];
    const auto G = loss_gradient(w, Xt, Yt, var_floor, LossHeads::PhiOnly, true);
    Eigen::VectorXd dots, sq;
    gradient_dots(w, X, Y, var_floor, G, last_layer_only, dots, sq);
    const double eta = checkpoint_eta(ck);
    part_safety[t] = eta * dots;
    part_self[t] = eta * sq;
  };
  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    for (std::size_t t = 0; t < tasks; ++t) run(t);
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j)
      pool.emplace_back([&, j] {
        for (std::size_t t = j; t < tasks; t += jobs) run(t);
      });
    for (auto& th : pool) th.join();
  }
  Eigen::VectorXd ts = Eigen::VectorXd::Zero(N), tself = Eigen::VectorXd::Zero(N);
  for (std::size_t t = 0; t < tasks; ++t) {
    ts += part_safety[t];
    tself += part_self[t];
  }
  ts /= static_cast<double>(K);
  tself /= static_cast<double>(K);

  std::vector<InfluenceRecord> out(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) {
    auto& r = out[static_cast<std::size_t>(i)];
    r.id = train_set.samples[static_cast<std::size_t>(i)].id;
    r.tau_safety = ts[i];
    r.tau_self = tself[i];
  }
  return out;
}

/// Z-scores (population sd). A constant column maps to all zeros.
inline std::vector<double> zscore(const std::vector<double>& x) {
  if (x.empty()) return {};
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(x.size(), 0.0);
  if (sd > 0.0)
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / sd;
  return out;
}

/// Fills `score` from z-normalized raw terms.
inline void assign_scores(std::vector<InfluenceRecord>& recs, const InfluenceConfig& cfg,
                          ScoreMode mode = ScoreMode::Combined) {
  std::vector<double> s, self;
  for (const auto& r : recs) {
    s.push_back(cfg.safety_sign * r.tau_safety);
    self.push_back(r.tau_self);
  }
  const auto zs = zscore(s);
  const auto zself = zscore(self);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    switch (mode) {
      case ScoreMode::Combined: recs[i].score = cfg.w_safety * zs[i] + cfg.w_self * zself[i]; break;
      case ScoreMode::InfluenceOnly: recs[i].score = zs[i]; break;
      case ScoreMode::SelfOnly: recs[i].score = zself[i]; break;
    }
  }
}

/// Full attribution pass: unsafe subset of `test`, raw terms, and scores.
inline std::vector<InfluenceRecord> attribute(const Dataset& train_set, const Dataset& test,
                                              const std::vector<Checkpoint>& checkpoints, const EnsembleModel& model,
                                              const InfluenceConfig& cfg, ScoreMode mode = ScoreMode::Combined,
                                              unsigned jobs = 1) {
  const auto unsafe = unsafe_subset(test, cfg.unsafe_quantile);
  auto recs = influence_terms(train_set, unsafe, checkpoints, model.normalization, model.var_floor,
                              cfg.last_layer_only, jobs);
  assign_scores(recs, cfg, mode);
  return recs;
}

struct CurationResult {
  std::vector<std::int64_t> removed_ids;  // ascending
  Dataset kept;
  double rho = 0.0;
};

/// Number of samples removed at fraction rho (round half away from zero).
inline std::size_t removal_count(std::size_t n, double rho) {
  return static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
}

/// Drop the round(rho N) highest-score samples; ties go to the smaller id.
inline CurationResult curate(const Dataset& ds, const std::vector<InfluenceRecord>& recs, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("curate: rho must be in [0, 1)");
  if (recs.size() != ds.size()) throw std::invalid_argument("curate: one record per sample required");
  std::vector<const InfluenceRecord*> order;
  for (const auto& r : recs) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const InfluenceRecord* a, const InfluenceRecord* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->id < b->id;
  });
  CurationResult res;
  res.rho = rho;
  const std::size_t k = removal_count(ds.size(), rho);
  for (std::size_t i = 0; i < k; ++i) res.removed_ids.push_back(order[i]->id);
  std::sort(res.removed_ids.begin(), res.removed_ids.end());
  res.kept = without_ids(ds, res.removed_ids);
  return res;
}

// ---- leave-one-out validation -----------------------------------------------------

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& x) {
    std::vector<std::size_t> o(x.size());
    std::iota(o.begin(), o.end(), std::size_t{0});
    std::sort(o.begin(), o.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < o.size();) {
      std::size_t j = i;
      while (j + 1 < o.size() && x[o[j + 1]] == x[o[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[o[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double s = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    s += (ra[i] - ma) * (rb[i] - mb);
    sa += (ra[i] - ma) * (ra[i] - ma);
    sb += (rb[i] - mb) * (rb[i] - mb);
  }
  return (sa > 0.0 && sb > 0.0) ? s / std::sqrt(sa * sb) : 0.0;
}

/// Tiny single-member setup where retraining once per training sample is cheap.
/// Full-batch gradient descent on the summed loss: dropping z_i changes every
/// step by exactly +eta grad l(z_i), so tau_safety predicts the risk change
/// with sign +1.
struct LooConfig {
  std::vector<int> hidden{16};
  std::size_t n_train = 100;
  std::size_t n_test = 80;
  double unsafe_quantile = 0.75;  // 20 of 80 test points
  int epochs = 30;
  int checkpoints = 3;
  double lr = 5e-5;
  double var_floor = 1e-6;
  std::uint64_t seed = 42;
  GenerationConfig gen;
};

struct LooReport {
  std::vector<std::int64_t> ids;
  std::vector<double> predicted;  // tau_safety
  std::vector<double> actual;     // risk(without z_i) - risk(all)
  double base_risk = 0.0;
  std::size_t unsafe_count = 0;
  double spearman = 0.0;
  double mean_abs_residual = 0.0;
  double mean_abs_predicted = 0.0;
  // max_i |residual_i| / (sum_k eta_k^2 |grad l(z_i; w_k)|^2 / 2): the empirical
  // curvature constant of the second-order residual bound
  double residual_constant = 0.0;
};

inline LooReport loo_validate(const LooConfig& cfg, unsigned jobs = 1) {
  if (cfg.n_train < 2 || cfg.n_test < 1) throw std::invalid_argument("loo_validate: too few samples");
  const auto all = generate(cfg.n_train + cfg.n_test, cfg.seed, cfg.gen, jobs);
  Dataset train_set, test;
  train_set.config_hash = test.config_hash = all.config_hash;
  for (std::size_t i = 0; i < all.size(); ++i) (i < cfg.n_train ? train_set : test).samples.push_back(all.samples[i]);
  const auto unsafe = unsafe_subset(test, cfg.unsafe_quantile);
  // normalization stays fixed across retrains so only the removed sample differs
  const auto norm = Normalizer::fit(train_set);

  TrainConfig tc;
  tc.hidden = cfg.hidden;
  tc.members = 1;
  tc.epochs = cfg.epochs;
  tc.checkpoints = cfg.checkpoints;
  tc.batch_size = 0;
  tc.lr = cfg.lr;
  tc.optimizer = Optimizer::Sgd;
  tc.mean_reduction = false;
  tc.var_floor = cfg.var_floor;
  tc.validate();
  const auto ck_epochs = tc.checkpoint_epochs();
  const std::uint64_t init_seed = member_seed(cfg.seed, 0);

  auto run = [&](const Dataset& d, std::vector<Checkpoint>* cks) {
    Eigen::MatrixXd X, Y;
    design_matrices(d, norm, X, Y);
    MemberTrainer tr(tc, init_seed);
    std::size_t next = 0;
    int prev = 0;
    for (int e = 1; e <= tc.epochs; ++e) {
      tr.run_epoch(X, Y);
      if (next < ck_epochs.size() && ck_epochs[next] == e) {
        if (cks) cks->push_back({e, tc.lr, e - prev, {tr.weights()}});
        prev = e;
        ++next;
      }
    }
    return tr.weights();
  };
  Eigen::MatrixXd Xu, Yu;
  design_matrices(unsafe, norm, Xu, Yu);
  auto risk = [&](const MlpWeights& w) {
    double l = 0.0;
    loss_gradient(w, Xu, Yu, cfg.var_floor, LossHeads::PhiOnly, true, &l);
    return l;
  };

  LooReport rep;
  rep.unsafe_count = unsafe.size();
  std::vector<Checkpoint> cks;
  rep.base_risk = risk(run(train_set, &cks));
  const auto recs = influence_terms(train_set, unsafe, cks, norm, cfg.var_floor, false, jobs);

  const std::size_t N = train_set.size();
  rep.ids.resize(N);
  rep.predicted.resize(N);
  rep.actual.resize(N);
  std::vector<double> curvature(N, 0.0);
  auto work = [&](std::size_t i) {
    const auto& z = train_set.samples[i];
    rep.ids[i] = z.id;
    rep.predicted[i] = recs[i].tau_safety;
    rep.actual[i] = risk(run(without_ids(train_set, {z.id}), nullptr)) - rep.base_risk;
    for (const auto& c : cks) {
      const double eta = checkpoint_eta(c);
      curvature[i] += 0.5 * eta * eta * per_sample_gradient(c.weights[0], norm, z, cfg.var_floor).squaredNorm();
    }
  };
  jobs = std::max(1u, jobs);
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < jobs; ++j)
    pool.emplace_back([&, j] {
      for (std::size_t i = j; i < N; i += jobs) work(i);
    });
  for (auto& t : pool) t.join();

  for (std::size_t i = 0; i < N; ++i) {
    const double res = std::abs(rep.actual[i] - rep.predicted[i]);
    rep.mean_abs_residual += res / static_cast<double>(N);
    rep.mean_abs_predicted += std::abs(rep.predicted[i]) / static_cast<double>(N);
    if (curvature[i] > 0.0) rep.residual_constant = std::max(rep.residual_constant, res / curvature[i]);
  }
  rep.spearman = spearman(rep.predicted, rep.actual);
  return rep;
}

}  // namespace dacbf

#endif  // DACBF_TRACIN_HPP
