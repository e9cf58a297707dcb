#ifndef DACBF_RISK_HPP
#define DACBF_RISK_HPP

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dacbf/data_forge.hpp"
#include "dacbf/penn.hpp"

namespace dacbf {

struct RiskReport {
  double risk = 0.0;        // mean phi-head NLL over the unsafe subset
  double rmse = 0.0;        // pooled-mean RMSE over the unsafe subset
  double max_abs_err = 0.0; // max |mean - label| over the unsafe subset
  double threshold = 0.0;   // label quantile defining the subset
  std::size_t count = 0;
};

/// Safety-weighted risk: the loss is averaged over test samples whose phi label
/// exceeds the thr_quantile label quantile. The loss is the pooled-Gaussian NLL
/// of the phi head.
inline RiskReport safety_weighted_report(const EnsembleModel& e, const Dataset& test, double thr_quantile = 0.75) {
  const auto unsafe = unsafe_subset(test, thr_quantile);
  std::vector<std::array<double, kInputDim>> inputs;
  for (const auto& z : unsafe.samples) inputs.push_back(raw_input(z.s, z.gamma));
  const auto preds = predict_batch(e, inputs);

  RiskReport r;
  std::vector<double> labels;
  for (const auto& z : test.samples) labels.push_back(z.phi_label);
  r.threshold = thr_quantile <= 0.0 ? -INFINITY : empirical_quantile(labels, thr_quantile);
  r.count = unsafe.size();
  double se = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double y = unsafe.samples[i].phi_label;
    const double err = preds[i].mean_phi - y;
    r.risk += gaussian_nll(preds[i].mean_phi, preds[i].var_phi, y);
    se += err * err;
    r.max_abs_err = std::max(r.max_abs_err, std::abs(err));
  }
  r.risk /= static_cast<double>(r.count);
  r.rmse = std::sqrt(se / static_cast<double>(r.count));
  return r;
}

inline double safety_weighted_risk(const EnsembleModel& e, const Dataset& test, double thr_quantile = 0.75) {
  return safety_weighted_report(e, test, thr_quantile).risk;
}

inline double safety_weighted_rmse(const EnsembleModel& e, const Dataset& test, double thr_quantile = 0.75) {
  return safety_weighted_report(e, test, thr_quantile).rmse;
}

/// Pooled-mean RMSE over a whole dataset.
inline double rmse(const EnsembleModel& e, const Dataset& ds) {
  if (ds.empty()) throw std::invalid_argument("rmse: empty dataset");
  std::vector<std::array<double, kInputDim>> inputs;
  for (const auto& z : ds.samples) inputs.push_back(raw_input(z.s, z.gamma));
  const auto preds = predict_batch(e, inputs);
  double se = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double err = preds[i].mean_phi - ds.samples[i].phi_label;
    se += err * err;
  }
  return std::sqrt(se / static_cast<double>(ds.size()));
}

}  // namespace dacbf

#endif  // DACBF_RISK_HPP
