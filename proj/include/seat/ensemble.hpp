#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "seat/data_io.hpp"
#include "seat/models.hpp"
#include "seat/params.hpp"

namespace seat {

enum class EnsembleMode { epoch, iteration };

struct EnsembleConfig {
  double alpha = 0.999;
  double safeguard_c = 10.0;
  EnsembleMode mode = EnsembleMode::iteration;

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw Error("ensemble alpha must lie in [0, 1)");
    if (!(safeguard_c >= 0.0)) throw Error("ensemble safeguard c must be non-negative");
  }

  friend bool operator==(const EnsembleConfig&, const EnsembleConfig&) = default;
};

/**
 * Exponential moving average of weights with the early-training safeguard
 * alpha' = min(alpha, t / (t + c)).
 *
 * theta_tilde starts at theta_0. The k-th update (k = 1, 2, ...) uses t = k.
 * With c = 0 the safeguard is off and alpha' = alpha for every update.
 */
class EnsembleState {
 public:
  EnsembleState(EnsembleConfig cfg, ParamVector theta0) : cfg_(cfg), theta_tilde_(std::move(theta0)) {
    cfg_.validate();
  }

  static double effective_alpha(const EnsembleConfig& cfg, std::uint64_t t) {
    if (cfg.safeguard_c == 0.0) return cfg.alpha;
    const double td = static_cast<double>(t);
    return std::min(cfg.alpha, td / (td + cfg.safeguard_c));
  }

  /// theta_tilde <- alpha' theta_tilde + (1 - alpha') theta_t; returns alpha'.
  double update(const ParamVector& theta_t) {
    theta_tilde_.require_compatible(theta_t);
    const double a = effective_alpha(cfg_, t_ + 1);
    theta_tilde_.blend(a, theta_t, 1.0 - a);
    ++t_;
    return a;
  }

  const ParamVector& theta_tilde() const noexcept { return theta_tilde_; }
  std::uint64_t t() const noexcept { return t_; }
  const EnsembleConfig& config() const noexcept { return cfg_; }

 private:
  EnsembleConfig cfg_;
  ParamVector theta_tilde_;
  std::uint64_t t_ = 0;
};

inline EnsembleState ema_update(EnsembleState state, const ParamVector& theta_t) {
  state.update(theta_t);
  return state;
}

/// beta_t = (1 - alpha)^(1 - [t == 1]) * alpha^(T - t), t = 1..T.
inline std::vector<double> ema_coefficients(std::size_t count, double alpha) {
  if (count == 0) throw Error("ema coefficients need T >= 1");
  std::vector<double> beta(count);
  for (std::size_t t = 1; t <= count; ++t)
    beta[t - 1] = (t == 1 ? 1.0 : 1.0 - alpha) * std::pow(alpha, static_cast<double>(count - t));
  return beta;
}

inline ParamVector weighted_sum(std::span<const ParamVector> thetas, std::span<const double> beta) {
  if (thetas.empty()) throw Error("weighted sum of an empty list");
  if (thetas.size() != beta.size()) throw Error("weight count does not match member count");
  ParamVector out(thetas.front().layout());
  for (std::size_t t = 0; t < thetas.size(); ++t) out.blend(1.0, thetas[t], beta[t]);
  return out;
}

/// Closed form of the safeguard-free EMA over theta_1..theta_T.
inline ParamVector ema_closed_form(std::span<const ParamVector> thetas, double alpha) {
  if (thetas.empty()) throw Error("ema_closed_form needs at least one state");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw Error("ema alpha must lie in [0, 1)");
  const auto beta = ema_coefficients(thetas.size(), alpha);
  return weighted_sum(thetas, beta);
}

// ---- prediction-oriented ensemble -------------------------------------------

inline void check_betas(std::span<const double> betas) {
  if (betas.empty()) throw Error("ensemble needs at least one member");
  double s = 0.0;
  for (double b : betas) {
    if (!(b > 0.0)) throw Error("ensemble weights must be positive");
    s += b;
  }
  if (std::abs(s - 1.0) > 1e-9) throw Error("ensemble weights must sum to 1 (got " + fmt_double(s) + ")");
}

/// sum_i beta_i probs_i for per-member probability tables of equal shape.
inline Tensor poe_average(std::span<const Tensor> probs, std::span<const double> betas) {
  check_betas(betas);
  if (probs.size() != betas.size()) throw Error("weight count does not match member count");
  Tensor out(probs.front().shape());
  for (std::size_t m = 0; m < probs.size(); ++m) {
    if (probs[m].shape() != out.shape()) throw Error("ensemble members disagree on class count");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += betas[m] * probs[m][i];
  }
  return out;
}

struct PoeMember {
  ModelSpec spec;
  ParamVector params;
};

/// Weighted average of member softmax outputs.
inline Tensor poe_predict(std::span<const PoeMember> members, std::span<const double> betas, const Tensor& x) {
  check_betas(betas);
  if (members.size() != betas.size()) throw Error("weight count does not match member count");
  for (const auto& m : members)
    if (m.spec.num_classes != members.front().spec.num_classes)
      throw Error("ensemble members disagree on class count");
  std::vector<Tensor> probs;
  for (const auto& m : members) probs.push_back(Classifier(m.spec).probabilities(m.params, x));
  return poe_average(probs, betas);
}

// ---- homogenization -----------------------------------------------------------

struct HomogenizationRecord {
  int epoch = 0;
  int window_m = 0;
  double delta = 0.0;
};

/// Softmax probability of the true class for each sample.
inline std::vector<double> true_class_probs(Classifier& model, const ParamVector& params, const Dataset& data,
                                            std::size_t batch = 500) {
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    const Tensor p = model.probabilities(params, data.inputs.slice_rows(begin, end));
    for (std::size_t i = 0; i < end - begin; ++i) out.push_back(p.at(i, data.labels[begin + i]));
  }
  return out;
}

/**
 * Delta_e = mean over points of min_{i in [1, m]} |f_e(x, y) - f_{e-i}(x, y)|,
 * where outputs[k] holds the true-class probabilities of the epoch-k model.
 */
inline HomogenizationRecord homogenization_from_outputs(std::span<const std::vector<double>> outputs, int e, int m) {
  if (m < 1 || e <= m) throw Error("homogenization needs e > m >= 1");
  if (static_cast<std::size_t>(e) >= outputs.size())
    throw Error("homogenization needs snapshots for epochs " + std::to_string(e - m) + ".." + std::to_string(e));
  const auto& cur = outputs[e];
  if (cur.empty()) throw Error("homogenization over an empty evaluation set");
  double total = 0.0;
  for (std::size_t j = 0; j < cur.size(); ++j) {
    double best = std::abs(cur[j] - outputs[e - 1].at(j));
    for (int i = 2; i <= m; ++i) best = std::min(best, std::abs(cur[j] - outputs[e - i].at(j)));
    total += best;
  }
  return {e, m, total / static_cast<double>(cur.size())};
}

/// snapshots[k] is the individual model after epoch k (k = 0 is the init).
inline HomogenizationRecord homogenization(Classifier& model, std::span<const ParamVector> snapshots, int e, int m,
                                           const Dataset& eval) {
  if (m < 1 || e <= m) throw Error("homogenization needs e > m >= 1");
  if (static_cast<std::size_t>(e) >= snapshots.size())
    throw Error("homogenization needs snapshots for epochs " + std::to_string(e - m) + ".." + std::to_string(e));
  std::vector<std::vector<double>> outputs(static_cast<std::size_t>(e) + 1);
  for (int k = e - m; k <= e; ++k) outputs[k] = true_class_probs(model, snapshots[k], eval);
  return homogenization_from_outputs(outputs, e, m);
}

/// Delta_e for every epoch e in (m, snapshots.size()).
inline std::vector<HomogenizationRecord> homogenization_series(Classifier& model, std::span<const ParamVector> snapshots,
                                                               int m, const Dataset& eval) {
  std::vector<std::vector<double>> outputs;
  for (const auto& s : snapshots) outputs.push_back(true_class_probs(model, s, eval));
  std::vector<HomogenizationRecord> out;
  for (int e = m + 1; e < static_cast<int>(outputs.size()); ++e) out.push_back(homogenization_from_outputs(outputs, e, m));
  return out;
}

}  // namespace seat
