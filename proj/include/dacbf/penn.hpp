#ifndef DACBF_PENN_HPP
#define DACBF_PENN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>
#include <json.hpp>

#include "dacbf/data_forge.hpp"
#include "dacbf/rng.hpp"

namespace dacbf {

inline constexpr int kInputDim = 5;   // d, v, dtheta, gamma0, gamma1
inline constexpr int kOutputDim = 4;  // mu_phi, raw var_phi, mu_t, raw var_t

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Fully connected ReLU network; W[l] is (out x in).
struct MlpWeights {
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;

  static MlpWeights zeros(const std::vector<int>& sizes) {
    if (sizes.size() < 2 || sizes.front() != kInputDim || sizes.back() != kOutputDim)
      throw std::invalid_argument("MlpWeights: architecture must map 5 inputs to 4 outputs");
    MlpWeights m;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      m.W.push_back(Eigen::MatrixXd::Zero(sizes[l + 1], sizes[l]));
      m.b.push_back(Eigen::VectorXd::Zero(sizes[l + 1]));
    }
    return m;
  }

  std::vector<int> sizes() const {
    std::vector<int> s{static_cast<int>(W.front().cols())};
    for (const auto& w : W) s.push_back(static_cast<int>(w.rows()));
    return s;
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < W.size(); ++l) n += static_cast<std::size_t>(W[l].size() + b[l].size());
    return n;
  }

  /// Layer order; within a layer W row-major, then b.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(num_params()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < W.size(); ++l) {
      for (Eigen::Index i = 0; i < W[l].rows(); ++i)
        for (Eigen::Index j = 0; j < W[l].cols(); ++j) out[k++] = W[l](i, j);
      for (Eigen::Index i = 0; i < b[l].size(); ++i) out[k++] = b[l][i];
    }
    return out;
  }

  void unflatten(const Eigen::VectorXd& v) {
    if (static_cast<std::size_t>(v.size()) != num_params()) throw std::invalid_argument("unflatten: size mismatch");
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < W.size(); ++l) {
      for (Eigen::Index i = 0; i < W[l].rows(); ++i)
        for (Eigen::Index j = 0; j < W[l].cols(); ++j) W[l](i, j) = v[k++];
      for (Eigen::Index i = 0; i < b[l].size(); ++i) b[l][i] = v[k++];
    }
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < W.size(); ++l)
      if (!W[l].allFinite() || !b[l].allFinite()) return false;
    return true;
  }

  friend bool operator==(const MlpWeights& a, const MlpWeights& b) {
    if (a.W.size() != b.W.size()) return false;
    for (std::size_t l = 0; l < a.W.size(); ++l)
      if (a.W[l] != b.W[l] || a.b[l] != b.b[l]) return false;
    return true;
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline MlpWeights init_weights(const std::vector<int>& sizes, Rng& rng) {
  auto m = MlpWeights::zeros(sizes);
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.W[l].cols()));
    for (Eigen::Index i = 0; i < m.W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < m.W[l].cols(); ++j) m.W[l](i, j) = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < m.b[l].size(); ++i) m.b[l][i] = rng.uniform(-bound, bound);
  }
  return m;
}

struct ForwardCache {
  std::vector<Eigen::MatrixXd> z;  // pre-activations per layer
  std::vector<Eigen::MatrixXd> a;  // a[0] = input, a[l+1] = relu(z[l]) (last: linear)
};

/// Batched forward pass; columns of X are (normalized) inputs.
inline ForwardCache forward_cache(const MlpWeights& m, const Eigen::MatrixXd& X) {
  ForwardCache c;
  c.a.push_back(X);
  const std::size_t L = m.W.size();
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z = m.W[l] * c.a.back();
    z.colwise() += m.b[l];
    c.z.push_back(z);
    c.a.push_back(l + 1 < L ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z);
  }
  return c;
}

/// Raw network outputs (4 x batch).
inline Eigen::MatrixXd forward_raw(const MlpWeights& m, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd a = X;
  const std::size_t L = m.W.size();
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z = m.W[l] * a;
    z.colwise() += m.b[l];
    a = l + 1 < L ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
  }
  return a;
}

/// Gaussian heads of one member for one input.
struct HeadOutput {
  double mu_phi = 0.0;
  double var_phi = 1.0;
  double mu_t = 0.0;
  double var_t = 1.0;
};

inline HeadOutput heads_from_raw(const Eigen::Ref<const Eigen::VectorXd>& raw, double var_floor) {
  return {raw[0], softplus(raw[1]) + var_floor, raw[2], softplus(raw[3]) + var_floor};
}

inline HeadOutput forward(const MlpWeights& m, const std::array<double, kInputDim>& input, double var_floor = 1e-6) {
  Eigen::VectorXd x(kInputDim);
  for (int i = 0; i < kInputDim; ++i) x[i] = input[static_cast<std::size_t>(i)];
  const Eigen::MatrixXd out = forward_raw(m, x);
  return heads_from_raw(out.col(0), var_floor);
}

/// 0.5 [ln(2 pi var) + (y - mu)^2 / var] for one head.
inline double gaussian_nll(double mu, double var, double y) {
  const double r = y - mu;
  return 0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
}

/// Training loss: NLL summed over the safety-loss and time heads.
inline double nll_loss(const HeadOutput& pred, double phi_label, double td_label) {
  return gaussian_nll(pred.mu_phi, pred.var_phi, phi_label) + gaussian_nll(pred.mu_t, pred.var_t, td_label);
}

/// Which heads enter the loss. The safety-weighted risk uses only the phi head.
enum class LossHeads { Both, PhiOnly };

/// Per-sample loss values and dLoss/dRaw for a batch. Y is 2 x batch (phi, t).
inline Eigen::VectorXd nll_and_output_grad(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& Y, double var_floor,
                                           LossHeads heads, Eigen::MatrixXd* d_raw) {
  const Eigen::Index B = raw.cols();
  Eigen::VectorXd loss = Eigen::VectorXd::Zero(B);
  if (d_raw) d_raw->setZero(kOutputDim, B);
  const int n_heads = heads == LossHeads::Both ? 2 : 1;
  for (Eigen::Index j = 0; j < B; ++j) {
    for (int h = 0; h < n_heads; ++h) {
      const double mu = raw(2 * h, j);
      const double s = raw(2 * h + 1, j);
      const double var = softplus(s) + var_floor;
      const double r = Y(h, j) - mu;
      loss[j] += 0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
      if (d_raw) {
        (*d_raw)(2 * h, j) = -r / var;
        (*d_raw)(2 * h + 1, j) = 0.5 * (1.0 / var - r * r / (var * var)) * sigmoid(s);
      }
    }
  }
  return loss;
}

/// Backprop dLoss/dRaw (already scaled per column) into a weight-shaped gradient.
inline MlpWeights backward(const MlpWeights& m, const ForwardCache& c, const Eigen::MatrixXd& d_raw) {
  MlpWeights g;
  g.W.resize(m.W.size());
  g.b.resize(m.b.size());
  Eigen::MatrixXd dz = d_raw;
  for (std::size_t l = m.W.size(); l-- > 0;) {
    g.W[l] = dz * c.a[l].transpose();
    g.b[l] = dz.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd da = m.W[l].transpose() * dz;
      dz = da.cwiseProduct((c.z[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return g;
}

/// Gradient of the (sum or mean) batch loss with respect to every weight.
inline MlpWeights loss_gradient(const MlpWeights& m, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                double var_floor, LossHeads heads, bool mean_reduction, double* loss_out = nullptr) {
  const auto cache = forward_cache(m, X);
  Eigen::MatrixXd d_raw;
  const auto loss = nll_and_output_grad(cache.a.back(), Y, var_floor, heads, &d_raw);
  const double scale = mean_reduction ? 1.0 / static_cast<double>(X.cols()) : 1.0;
  if (loss_out) *loss_out = loss.sum() * scale;
  d_raw *= scale;
  return backward(m, cache, d_raw);
}

// ---- normalization -------------------------------------------------------------

/// Per-feature affine scaling of inputs and labels, fitted on the training split.
struct Normalizer {
  std::array<double, kInputDim> in_shift{0, 0, 0, 0, 0};
  std::array<double, kInputDim> in_scale{1, 1, 1, 1, 1};
  std::array<double, 2> out_shift{0, 0};
  std::array<double, 2> out_scale{1, 1};

  static Normalizer fit(const Dataset& ds) {
    if (ds.empty()) throw std::invalid_argument("Normalizer::fit: empty dataset");
    Normalizer n;
    const double N = static_cast<double>(ds.size());
    auto stats = [&](auto get, double& shift, double& scale) {
      double mean = 0.0;
      for (const auto& z : ds.samples) mean += get(z);
      mean /= N;
      double var = 0.0;
      for (const auto& z : ds.samples) var += (get(z) - mean) * (get(z) - mean);
      const double sd = std::sqrt(var / N);
      shift = mean;
      scale = sd > 1e-12 ? sd : 1.0;
    };
    stats([](const LabeledSample& z) { return z.s.d; }, n.in_shift[0], n.in_scale[0]);
    stats([](const LabeledSample& z) { return z.s.v; }, n.in_shift[1], n.in_scale[1]);
    stats([](const LabeledSample& z) { return z.s.delta_theta; }, n.in_shift[2], n.in_scale[2]);
    stats([](const LabeledSample& z) { return z.gamma.g0; }, n.in_shift[3], n.in_scale[3]);
    stats([](const LabeledSample& z) { return z.gamma.g1; }, n.in_shift[4], n.in_scale[4]);
    stats([](const LabeledSample& z) { return z.phi_label; }, n.out_shift[0], n.out_scale[0]);
    stats([](const LabeledSample& z) { return z.td_label; }, n.out_shift[1], n.out_scale[1]);
    return n;
  }

  std::array<double, kInputDim> normalize(const std::array<double, kInputDim>& x) const {
    std::array<double, kInputDim> out{};
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] - in_shift[i]) / in_scale[i];
    return out;
  }
  std::array<double, kInputDim> denormalize(const std::array<double, kInputDim>& x) const {
    std::array<double, kInputDim> out{};
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * in_scale[i] + in_shift[i];
    return out;
  }
  double normalize_label(int head, double y) const { return (y - out_shift[head]) / out_scale[head]; }
};

inline std::array<double, kInputDim> raw_input(const Features& s, const GammaPair& g) {
  return {s.d, s.v, s.delta_theta, g.g0, g.g1};
}

/// Normalized design matrix (5 x N) and label matrix (2 x N).
inline void design_matrices(const Dataset& ds, const Normalizer& n, Eigen::MatrixXd& X, Eigen::MatrixXd& Y) {
  const auto N = static_cast<Eigen::Index>(ds.size());
  X.resize(kInputDim, N);
  Y.resize(2, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    const auto& z = ds.samples[static_cast<std::size_t>(j)];
    const auto x = n.normalize(raw_input(z.s, z.gamma));
    for (int i = 0; i < kInputDim; ++i) X(i, j) = x[static_cast<std::size_t>(i)];
    Y(0, j) = n.normalize_label(0, z.phi_label);
    Y(1, j) = n.normalize_label(1, z.td_label);
  }
}

// ---- ensemble -----------------------------------------------------------------

enum class Optimizer { Adam, Sgd };

struct TrainConfig {
  std::vector<int> hidden{40, 80, 120, 40};
  int members = 3;
  int epochs = 200;
  int batch_size = 32;  // 0 = full batch
  double lr = 1e-4;
  int checkpoints = 10;
  Optimizer optimizer = Optimizer::Adam;
  bool mean_reduction = true;
  double var_floor = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::vector<int> sizes() const {
    std::vector<int> s{kInputDim};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(kOutputDim);
    return s;
  }

  void validate() const {
    if (members < 1) throw std::invalid_argument("TrainConfig: members must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (checkpoints < 1 || checkpoints > epochs) throw std::invalid_argument("TrainConfig: need 1 <= checkpoints <= epochs");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (batch_size < 0) throw std::invalid_argument("TrainConfig: negative batch size");
  }

  /// Epochs at which checkpoints are captured (end of each interval).
  std::vector<int> checkpoint_epochs() const {
    std::vector<int> out;
    for (int k = 1; k <= checkpoints; ++k)
      out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * epochs / checkpoints)));
    return out;
  }

  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "train/v1 hidden=";
    for (int h : hidden) os << h << ',';
    os << " K=" << members << " E=" << epochs << " B=" << batch_size << " lr=" << lr << " C=" << checkpoints
       << " opt=" << (optimizer == Optimizer::Adam ? "adam" : "sgd") << " mean=" << mean_reduction
       << " floor=" << var_floor << " adam=" << adam_beta1 << ',' << adam_beta2 << ',' << adam_eps;
    return os.str();
  }
  std::string hash() const { return fnv1a_hex(canonical()); }
};

struct Checkpoint {
  int epoch = 0;
  double lr = 0.0;
  int interval_epochs = 0;  // epochs this snapshot stands for
  std::vector<MlpWeights> weights;
};

struct EnsembleModel {
  std::vector<MlpWeights> members;
  Normalizer normalization;
  double var_floor = 1e-6;
  std::string dataset_hash;
  std::string train_hash;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& m : members) n += m.num_params();
    return n;
  }
};

/// Per-member and pooled predictive moments in label units.
struct Prediction {
  std::vector<HeadOutput> members;
  double mean_phi = 0.0;
  double var_phi = 0.0;
  double mean_t = 0.0;
  double var_t = 0.0;
};

inline HeadOutput denormalize_heads(const HeadOutput& h, const Normalizer& n) {
  const double s0 = n.out_scale[0], s1 = n.out_scale[1];
  return {h.mu_phi * s0 + n.out_shift[0], h.var_phi * s0 * s0, h.mu_t * s1 + n.out_shift[1], h.var_t * s1 * s1};
}

/// Gaussian-mixture moments of equally weighted members.
inline void pool_prediction(Prediction& p) {
  const double K = static_cast<double>(p.members.size());
  double m_phi = 0, s_phi = 0, m_t = 0, s_t = 0;
  for (const auto& h : p.members) {
    m_phi += h.mu_phi;
    s_phi += h.var_phi + h.mu_phi * h.mu_phi;
    m_t += h.mu_t;
    s_t += h.var_t + h.mu_t * h.mu_t;
  }
  p.mean_phi = m_phi / K;
  p.mean_t = m_t / K;
  // mixture variance, clamped against rounding below the mean member variance
  double mv_phi = 0, mv_t = 0;
  for (const auto& h : p.members) {
    mv_phi += h.var_phi;
    mv_t += h.var_t;
  }
  p.var_phi = std::max(s_phi / K - p.mean_phi * p.mean_phi, mv_phi / K);
  p.var_t = std::max(s_t / K - p.mean_t * p.mean_t, mv_t / K);
}

/// Batched prediction for a list of raw inputs.
inline std::vector<Prediction> predict_batch(const EnsembleModel& e,
                                             const std::vector<std::array<double, kInputDim>>& inputs) {
  const auto N = static_cast<Eigen::Index>(inputs.size());
  Eigen::MatrixXd X(kInputDim, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    const auto x = e.normalization.normalize(inputs[static_cast<std::size_t>(j)]);
    for (int i = 0; i < kInputDim; ++i) X(i, j) = x[static_cast<std::size_t>(i)];
  }
  std::vector<Prediction> out(inputs.size());
  for (const auto& m : e.members) {
    const Eigen::MatrixXd raw = forward_raw(m, X);
    for (Eigen::Index j = 0; j < N; ++j)
      out[static_cast<std::size_t>(j)].members.push_back(
          denormalize_heads(heads_from_raw(raw.col(j), e.var_floor), e.normalization));
  }
  for (auto& p : out) pool_prediction(p);
  return out;
}

inline Prediction predict(const EnsembleModel& e, const Features& s, const GammaPair& g) {
  return predict_batch(e, {raw_input(s, g)}).front();
}

/// Order-2 Jensen-Renyi divergence of the member Gaussians on the phi output:
/// H2(mixture) - mean H2(member), with H2(p) = -ln int p^2 in closed form.
inline double jrd(const Prediction& p) {
  const auto& m = p.members;
  // identical components: the mixture equals each member, divergence is 0 exactly
  if (std::all_of(m.begin(), m.end(), [&](const HeadOutput& a) {
        return a.mu_phi == m.front().mu_phi && a.var_phi == m.front().var_phi;
      }))
    return 0.0;
  const double K = static_cast<double>(m.size());
  double ip = 0.0;  // int mixture^2
  for (const auto& a : m)
    for (const auto& b : m) {
      const double s = a.var_phi + b.var_phi;
      const double d = a.mu_phi - b.mu_phi;
      ip += std::exp(-0.5 * d * d / s) / std::sqrt(2.0 * std::numbers::pi * s);
    }
  ip /= K * K;
  double mean_h = 0.0;
  for (const auto& a : m) mean_h += std::log(2.0 * std::sqrt(std::numbers::pi * a.var_phi));
  mean_h /= K;
  return -std::log(ip) - mean_h;
}

inline double standard_normal_quantile(double p) { return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p); }
inline double standard_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

/// Upper-tail CVaR of N(mean, var): mean + sd pdf(q_alpha) / (1 - alpha).
inline double gaussian_cvar(double mean, double var, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("cvar: alpha must be in (0, 1)");
  return mean + std::sqrt(var) * standard_normal_pdf(standard_normal_quantile(alpha)) / (1.0 - alpha);
}

inline double cvar(const Prediction& p, double alpha) { return gaussian_cvar(p.mean_phi, p.var_phi, alpha); }

// ---- training -----------------------------------------------------------------

/// One member's optimizer run. Owns weights, Adam moments, and its shuffle
/// stream; the whole state round-trips through save_state/load_state.
class MemberTrainer {
 public:
  MemberTrainer(const TrainConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    weights_ = init_weights(cfg.sizes(), rng_);
    m_ = zeros_like(weights_);
    v_ = zeros_like(weights_);
  }

  /// One pass over the data; returns the mean per-sample training loss.
  double run_epoch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    const auto N = static_cast<std::size_t>(X.cols());
    std::vector<Eigen::Index> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = static_cast<Eigen::Index>(i);
    rng_.shuffle(order);
    const std::size_t B = cfg_.batch_size == 0 ? N : static_cast<std::size_t>(cfg_.batch_size);
    double total = 0.0;
    Eigen::MatrixXd xb, yb;
    for (std::size_t start = 0; start < N; start += B) {
      const std::size_t n = std::min(B, N - start);
      xb.resize(kInputDim, static_cast<Eigen::Index>(n));
      yb.resize(2, static_cast<Eigen::Index>(n));
      for (std::size_t j = 0; j < n; ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = X.col(order[start + j]);
        yb.col(static_cast<Eigen::Index>(j)) = Y.col(order[start + j]);
      }
      double loss = 0.0;
      const auto g = loss_gradient(weights_, xb, yb, cfg_.var_floor, LossHeads::Both, cfg_.mean_reduction, &loss);
      total += cfg_.mean_reduction ? loss * static_cast<double>(n) : loss;
      apply(g);
    }
    ++epoch_;
    return total / static_cast<double>(N);
  }

  const MlpWeights& weights() const { return weights_; }
  int epoch() const { return epoch_; }

  std::string save_state() const {
    std::ostringstream os(std::ios::binary);
    auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    put(epoch_);
    put(step_);
    for (const MlpWeights* w : {&weights_, &m_, &v_}) {
      const auto flat = w->flatten();
      for (Eigen::Index i = 0; i < flat.size(); ++i) put(flat[i]);
    }
    const auto rs = rng_.state();
    put(rs.size());
    os.write(rs.data(), static_cast<std::streamsize>(rs.size()));
    return os.str();
  }

  void load_state(const std::string& blob) {
    std::istringstream is(blob, std::ios::binary);
    auto get = [&](auto& v) {
      if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) throw std::runtime_error("MemberTrainer: truncated state");
    };
    get(epoch_);
    get(step_);
    for (MlpWeights* w : {&weights_, &m_, &v_}) {
      Eigen::VectorXd flat(static_cast<Eigen::Index>(w->num_params()));
      for (Eigen::Index i = 0; i < flat.size(); ++i) get(flat[i]);
      w->unflatten(flat);
    }
    std::size_t n = 0;
    get(n);
    std::string rs(n, '\0');
    if (!is.read(rs.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("MemberTrainer: truncated state");
    rng_.set_state(rs);
  }

 private:
  static MlpWeights zeros_like(const MlpWeights& w) { return MlpWeights::zeros(w.sizes()); }

  void apply(const MlpWeights& g) {
    ++step_;
    if (cfg_.optimizer == Optimizer::Sgd) {
      for (std::size_t l = 0; l < weights_.W.size(); ++l) {
        weights_.W[l] -= cfg_.lr * g.W[l];
        weights_.b[l] -= cfg_.lr * g.b[l];
      }
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double lr_t = cfg_.lr * std::sqrt(c2) / c1;
    auto upd = [&](auto& w, auto& m, auto& v, const auto& gr) {
      m = b1 * m + (1.0 - b1) * gr;
      v = b2 * v + (1.0 - b2) * gr.cwiseProduct(gr);
      w.array() -= lr_t * m.array() / (v.array().sqrt() + cfg_.adam_eps * std::sqrt(c2));
    };
    for (std::size_t l = 0; l < weights_.W.size(); ++l) {
      upd(weights_.W[l], m_.W[l], v_.W[l], g.W[l]);
      upd(weights_.b[l], m_.b[l], v_.b[l], g.b[l]);
    }
  }

  TrainConfig cfg_;
  Rng rng_;
  MlpWeights weights_;
  MlpWeights m_;
  MlpWeights v_;
  std::int64_t epoch_ = 0;
  std::int64_t step_ = 0;
};

/// Training diverged (non-finite loss or weights).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  EnsembleModel model;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::vector<double>> loss_history;  // [member][epoch]
};

inline std::uint64_t member_seed(std::uint64_t seed, int member) {
  return derive_seed(seed, 0xA11CE000ULL + static_cast<std::uint64_t>(member));
}

/// Train K members from distinct seeded initializations and shuffle streams.
/// Members run on up to `jobs` threads; results do not depend on `jobs`.
inline TrainResult train(const Dataset& train_set, const TrainConfig& cfg, std::uint64_t seed, unsigned jobs = 1) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  TrainResult res;
  res.model.normalization = Normalizer::fit(train_set);
  res.model.var_floor = cfg.var_floor;
  res.model.dataset_hash = train_set.config_hash;
  res.model.train_hash = cfg.hash();

  Eigen::MatrixXd X, Y;
  design_matrices(train_set, res.model.normalization, X, Y);
  const auto ck_epochs = cfg.checkpoint_epochs();

  const auto K = static_cast<std::size_t>(cfg.members);
  std::vector<MlpWeights> finals(K);
  std::vector<std::vector<MlpWeights>> snaps(K);
  res.loss_history.assign(K, {});
  std::vector<std::string> errors(K);
  std::vector<char> diverged(K, 0);

  auto run_member = [&](std::size_t k) {
    try {
      MemberTrainer tr(cfg, member_seed(seed, static_cast<int>(k)));
      std::size_t next = 0;
      for (int e = 1; e <= cfg.epochs; ++e) {
        const double loss = tr.run_epoch(X, Y);
        if (!std::isfinite(loss) || !tr.weights().all_finite()) {
          errors[k] = "train: non-finite loss at epoch " + std::to_string(e) + " in member " + std::to_string(k);
          diverged[k] = 1;
          return;
        }
        res.loss_history[k].push_back(loss);
        if (next < ck_epochs.size() && ck_epochs[next] == e) {
          snaps[k].push_back(tr.weights());
          ++next;
        }
      }
      finals[k] = tr.weights();
    } catch (const std::exception& ex) {
      errors[k] = ex.what();
    }
  };

  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(K)));
  for (std::size_t first = 0; first < K; first += jobs) {
    std::vector<std::thread> pool;
    for (std::size_t k = first; k < std::min(K, first + jobs); ++k) {
      if (jobs == 1)
        run_member(k);
      else
        pool.emplace_back(run_member, k);
    }
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (diverged[k]) throw NumericalError(errors[k]);
    if (!errors[k].empty()) throw std::runtime_error(errors[k]);
  }

  res.model.members = std::move(finals);
  int prev = 0;
  for (std::size_t c = 0; c < ck_epochs.size(); ++c) {
    Checkpoint ck;
    ck.epoch = ck_epochs[c];
    ck.lr = cfg.lr;
    ck.interval_epochs = ck_epochs[c] - prev;
    prev = ck_epochs[c];
    for (std::size_t k = 0; k < K; ++k) ck.weights.push_back(snaps[k][c]);
    res.checkpoints.push_back(std::move(ck));
  }
  return res;
}

// ---- model container -------------------------------------------------------------
//
// Layout: "DACBFMDL" | u32 version | u64 header bytes | JSON header | f64 payload.
// The payload holds the final members, then every checkpoint's members, each as
// layers in order with W row-major followed by b, little-endian.

inline constexpr char kModelMagic[8] = {'D', 'A', 'C', 'B', 'F', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

inline void write_model(const std::string& path, const EnsembleModel& e, const std::vector<Checkpoint>& cks,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json h;
  h["architecture"] = e.members.front().sizes();
  h["activation"] = "relu";
  h["outputs"] = {"mu_phi", "raw_var_phi", "mu_t", "raw_var_t"};
  h["members"] = e.members.size();
  h["var_floor"] = e.var_floor;
  h["byte_order"] = "little";
  h["normalization"] = {{"in_shift", e.normalization.in_shift},
                        {"in_scale", e.normalization.in_scale},
                        {"out_shift", e.normalization.out_shift},
                        {"out_scale", e.normalization.out_scale}};
  h["dataset_hash"] = e.dataset_hash;
  h["train_hash"] = e.train_hash;
  std::vector<std::vector<int>> shapes;
  for (std::size_t l = 0; l < e.members.front().W.size(); ++l)
    shapes.push_back({static_cast<int>(e.members.front().W[l].rows()), static_cast<int>(e.members.front().W[l].cols())});
  h["layer_shapes"] = shapes;
  nlohmann::json ckj = nlohmann::json::array();
  for (const auto& c : cks) ckj.push_back({{"epoch", c.epoch}, {"lr", c.lr}, {"interval_epochs", c.interval_epochs}});
  h["checkpoints"] = ckj;
  h["extra"] = extra;
  const std::string hs = h.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kModelMagic, 8);
  const std::uint32_t ver = kModelVersion;
  os.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hl = hs.size();
  os.write(reinterpret_cast<const char*>(&hl), sizeof(hl));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto put_member = [&](const MlpWeights& m) {
    const auto flat = m.flatten();
    os.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  };
  for (const auto& m : e.members) put_member(m);
  for (const auto& c : cks)
    for (const auto& m : c.weights) put_member(m);
  if (!os) throw std::runtime_error("write failed for " + path);
}

struct LoadedModel {
  EnsembleModel model;
  std::vector<Checkpoint> checkpoints;
  nlohmann::json extra;
};

inline LoadedModel read_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[8];
  std::uint32_t ver = 0;
  std::uint64_t hl = 0;
  if (!is.read(magic, 8) || std::memcmp(magic, kModelMagic, 8) != 0) throw std::runtime_error(path + ": not a model file");
  if (!is.read(reinterpret_cast<char*>(&ver), sizeof(ver)) || ver != kModelVersion)
    throw std::runtime_error(path + ": unsupported model version");
  if (!is.read(reinterpret_cast<char*>(&hl), sizeof(hl))) throw std::runtime_error(path + ": truncated header");
  std::string hs(hl, '\0');
  if (!is.read(hs.data(), static_cast<std::streamsize>(hl))) throw std::runtime_error(path + ": truncated header");
  const auto h = nlohmann::json::parse(hs);

  LoadedModel out;
  const auto sizes = h.at("architecture").get<std::vector<int>>();
  const auto K = h.at("members").get<std::size_t>();
  auto& e = out.model;
  e.var_floor = h.at("var_floor").get<double>();
  const auto& n = h.at("normalization");
  e.normalization.in_shift = n.at("in_shift").get<std::array<double, kInputDim>>();
  e.normalization.in_scale = n.at("in_scale").get<std::array<double, kInputDim>>();
  e.normalization.out_shift = n.at("out_shift").get<std::array<double, 2>>();
  e.normalization.out_scale = n.at("out_scale").get<std::array<double, 2>>();
  e.dataset_hash = h.at("dataset_hash").get<std::string>();
  e.train_hash = h.at("train_hash").get<std::string>();
  out.extra = h.value("extra", nlohmann::json::object());

  auto get_member = [&]() {
    auto m = MlpWeights::zeros(sizes);
    Eigen::VectorXd flat(static_cast<Eigen::Index>(m.num_params()));
    if (!is.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double))))
      throw std::runtime_error(path + ": truncated weight payload");
    m.unflatten(flat);
    return m;
  };
  for (std::size_t k = 0; k < K; ++k) e.members.push_back(get_member());
  for (const auto& c : h.at("checkpoints")) {
    Checkpoint ck;
    ck.epoch = c.at("epoch").get<int>();
    ck.lr = c.at("lr").get<double>();
    ck.interval_epochs = c.at("interval_epochs").get<int>();
    for (std::size_t k = 0; k < K; ++k) ck.weights.push_back(get_member());
    out.checkpoints.push_back(std::move(ck));
  }
  return out;
}

}  // namespace dacbf

#endif  // DACBF_PENN_HPP
