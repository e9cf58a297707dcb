#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "dacbf/adaptive_selector.hpp"
#include "dacbf/rng.hpp"

using namespace dacbf;

namespace {

std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

}  // namespace

TEST(Aggressiveness, SumAndCorner) {
  EXPECT_EQ(aggressiveness({0.5, 0.5}), 1.0);
  EXPECT_LT(aggressiveness({0.5, 1.0}), aggressiveness({0.6, 1.0}));
  EXPECT_LT(aggressiveness({1.0, 0.5}), aggressiveness({1.0, 0.6}));
  const auto grid = CandidateGrid::uniform(DomainBounds{});
  ASSERT_EQ(grid.candidates.size(), 49u);
  const auto best = *std::max_element(grid.candidates.begin(), grid.candidates.end(),
                                      [](auto a, auto b) { return aggressiveness(a) < aggressiveness(b); });
  EXPECT_EQ(best, (GammaPair{2.5, 2.5}));
}

TEST(Grid, Validation) {
  const DomainBounds b;
  EXPECT_THROW(CandidateGrid{}.validate(b), std::invalid_argument);
  CandidateGrid g{{{0.4, 1.0}}};
  EXPECT_THROW(g.validate(b), std::invalid_argument);
  EXPECT_NO_THROW(CandidateGrid::uniform(b).validate(b));
  EXPECT_THROW(CandidateGrid::uniform(b, 0), std::invalid_argument);
}

TEST(LipschitzConstant, AnalyticValue) {
  SelectorParams p;
  const DomainBounds b;
  EXPECT_NEAR(lipschitz_constant(p, b), 1.414, 0.01);
  EXPECT_DOUBLE_EQ(lipschitz_constant(p, b), 0.5 * std::sqrt(2.0) * 2.0);
  p.kappa = 0.0;
  EXPECT_EQ(lipschitz_constant(p, b), 0.0);
  p.kappa = 1.0;
  EXPECT_DOUBLE_EQ(lipschitz_constant(p, b), 2.0 * lipschitz_constant(SelectorParams{}, b));
}

TEST(Select, SingleCandidateAndUniformWeights) {
  const SelectorParams p;
  CandidateGrid one{{{1.3, 0.7}}};
  EXPECT_EQ(select_from_predictions(one, {5.0}, {0.0}, p).gamma, (GammaPair{1.3, 0.7}));

  // kappa = 0 and constant J: arithmetic mean of the candidates
  SelectorParams q = p;
  q.kappa = 0.0;
  CandidateGrid anti{{{0.5, 2.5}, {1.0, 2.0}, {2.5, 0.5}, {1.5, 1.5}}};
  const auto s = select_from_predictions(anti, {0.1, 3.0, -2.0, 7.0}, zeros(4), q);
  EXPECT_NEAR(s.gamma.g0, 5.5 / 4.0, 1e-15);
  EXPECT_NEAR(s.gamma.g1, 6.5 / 4.0, 1e-15);
  for (double w : s.weights) EXPECT_NEAR(w, 0.25, 1e-15);
}

TEST(Select, OutputStaysInBox) {
  const DomainBounds b;
  const auto grid = CandidateGrid::uniform(b);
  Rng rng(1);
  for (int t = 0; t < 10000; ++t) {
    SelectorParams p;
    p.tau_s = std::exp(rng.uniform(-8.0, 2.0));
    p.kappa = rng.uniform(0.0, 5.0);
    std::vector<double> phi(grid.candidates.size()), lg(grid.candidates.size());
    for (auto& v : phi) v = rng.uniform(-50.0, 50.0);
    for (auto& v : lg) v = rng.uniform(-30.0, 0.0);
    const auto g = select_from_predictions(grid, phi, lg, p).gamma;
    ASSERT_GE(g.g0, b.gamma_min);
    ASSERT_LE(g.g0, b.gamma_max);
    ASSERT_GE(g.g1, b.gamma_min);
    ASSERT_LE(g.g1, b.gamma_max);
  }
}

// Gates are held fixed: the bound concerns the response to the loss estimates.
TEST(Select, EmpiricalLipschitzWithinBound) {
  const DomainBounds b;
  const auto grid = CandidateGrid::uniform(b);
  const SelectorParams p;
  const double L = lipschitz_constant(p, b);
  Rng rng(2);
  int violations = 0;
  double worst = 0.0;
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> phi(grid.candidates.size()), lg(grid.candidates.size()), phi2;
    for (auto& v : phi) v = rng.uniform(-3.0, 3.0);
    for (auto& v : lg) v = rng.uniform(-2.0, 0.0);
    const double scale = std::exp(rng.uniform(std::log(1e-3), std::log(3.0)));
    phi2 = phi;
    for (auto& v : phi2) v += scale * rng.uniform(-1.0, 1.0);
    double dinf = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) dinf = std::max(dinf, std::abs(phi2[i] - phi[i]));
    const auto a = select_from_predictions(grid, phi, lg, p).gamma;
    const auto c = select_from_predictions(grid, phi2, lg, p).gamma;
    const double ratio = std::hypot(a.g0 - c.g0, a.g1 - c.g1) / dinf;
    worst = std::max(worst, ratio);
    violations += ratio > L;
  }
  EXPECT_EQ(violations, 0);
  EXPECT_GT(worst, 0.0);
}

TEST(Select, RaisingOneLossNeverRaisesItsWeight) {
  const auto grid = CandidateGrid::uniform(DomainBounds{}, 5);
  const SelectorParams p;
  Rng rng(3);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> phi(grid.candidates.size());
    for (auto& v : phi) v = rng.uniform(-2.0, 2.0);
    const auto i = static_cast<std::size_t>(rng.index(phi.size()));
    const double w0 = select_from_predictions(grid, phi, zeros(phi.size()), p).weights[i];
    phi[i] += rng.uniform(0.0, 2.0);
    const double w1 = select_from_predictions(grid, phi, zeros(phi.size()), p).weights[i];
    ASSERT_LE(w1, w0);
  }
}

TEST(Select, LowTemperaturePicksMostAggressive) {
  const auto grid = CandidateGrid::uniform(DomainBounds{});
  SelectorParams p;
  p.tau_s = 1e-4;
  std::vector<double> phi(grid.candidates.size(), 0.2);
  const auto g = select_from_predictions(grid, phi, zeros(phi.size()), p).gamma;
  const double spacing = 2.0 / 6.0;
  EXPECT_NEAR(g.g0, 2.5, spacing);
  EXPECT_NEAR(g.g1, 2.5, spacing);
  EXPECT_NEAR(g.g0, 2.5, 1e-9);
}

TEST(Select, Errors) {
  const SelectorParams p;
  EXPECT_THROW(select_from_predictions(CandidateGrid{}, {}, {}, p), std::invalid_argument);
  const auto grid = CandidateGrid::uniform(DomainBounds{}, 2);
  EXPECT_THROW(select_from_predictions(grid, {0.0}, zeros(4), p), std::invalid_argument);
}

TEST(FilterMask, InfiniteThresholdsPassEverything) {
  SelectorParams p;
  p.jrd_max = std::numeric_limits<double>::infinity();
  p.cvar_max = std::numeric_limits<double>::infinity();
  const auto f = filter_mask({0.0, 1e6, 3.0}, {1e9, -4.0, 2.0}, p);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(f.pass[i]);
    EXPECT_EQ(f.gate[i], 1.0);
    EXPECT_EQ(f.log_gate[i], 0.0);
  }
}

TEST(FilterMask, GateAtThresholdIsHalf) {
  SelectorParams p;
  p.cvar_max = std::numeric_limits<double>::infinity();
  const auto f = filter_mask({p.jrd_max}, {0.0}, p);
  EXPECT_DOUBLE_EQ(f.gate[0], 0.5);
  EXPECT_TRUE(f.pass[0]);
  SelectorParams q;
  const auto g = filter_mask({q.jrd_max}, {q.cvar_max}, q);
  EXPECT_DOUBLE_EQ(g.gate[0], 0.25);
}

TEST(FilterMask, HardMaskAgreesWithGateWhenMarginsShareSign) {
  const SelectorParams p;
  Rng rng(4);
  int checked = 0;
  for (int t = 0; t < 20000; ++t) {
    const double j = rng.uniform(0.0, 2.0 * p.jrd_max), c = rng.uniform(0.0, 2.0 * p.cvar_max);
    const bool same = (j <= p.jrd_max) == (c <= p.cvar_max);
    if (!same) continue;
    ++checked;
    const auto f = filter_mask({j}, {c}, p);
    EXPECT_EQ(f.pass[0], f.gate[0] >= 0.25);
  }
  EXPECT_GT(checked, 5000);
  EXPECT_THROW(filter_mask({0.0}, {}, p), std::invalid_argument);
}

TEST(Params, Validation) {
  SelectorParams p;
  EXPECT_NO_THROW(p.validate());
  p.tau_s = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = SelectorParams{};
  p.cvar_alpha = 1.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(SmoothSelect, UsesEnsembleAndStaysInGrid) {
  const auto ds = generate(60, 3, GenerationConfig{});
  TrainConfig c;
  c.hidden = {8};
  c.members = 3;
  c.epochs = 3;
  c.checkpoints = 1;
  const auto tr = train(ds, c, 2);
  const auto grid = CandidateGrid::uniform(DomainBounds{});
  const auto r = smooth_select(ds.samples[0].s, tr.model, grid, SelectorParams{});
  ASSERT_EQ(r.phi_hat.size(), grid.candidates.size());
  const auto p = predict(tr.model, ds.samples[0].s, grid.candidates[5]);
  EXPECT_DOUBLE_EQ(r.phi_hat[5], p.mean_phi);
  EXPECT_DOUBLE_EQ(r.jrd[5], jrd(p));
  EXPECT_GE(r.selection.gamma.g0, 0.5);
  EXPECT_LE(r.selection.gamma.g1, 2.5);
  double total = 0.0;
  for (double w : r.selection.weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-12);
}
