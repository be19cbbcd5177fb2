#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "seat/attacks.hpp"
#include "seat/data_io.hpp"
#include "seat/ensemble.hpp"
#include "seat/params.hpp"
#include "seat/random.hpp"
#include "seat/training.hpp"

namespace seat {

// ---- small statistics ---------------------------------------------------------

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("log-log fit needs >= 2 paired points");
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(x.size()), ly(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

/// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation; NaN when either side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman needs >= 2 paired values");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

// ---- gap probe ----------------------------------------------------------------

struct GapProbeResult {
  std::vector<double> scales;
  std::vector<double> gaps;
  double fitted_slope = std::numeric_limits<double>::quiet_NaN();

  CsvTable to_csv() const {
    CsvTable t({"scale", "gap"});
    for (std::size_t i = 0; i < scales.size(); ++i) t.add_row({fmt_double(scales[i]), fmt_double(gaps[i])});
    return t;
  }
};

inline constexpr std::size_t kGapFitPoints = 4;

/// 1e-1 down to 1e-4 in steps of 10^-0.5.
inline std::vector<double> default_gap_scales() {
  std::vector<double> s;
  for (int k = 2; k <= 8; ++k) s.push_back(std::pow(10.0, -0.5 * k));
  return s;
}

inline void check_gap_scales(std::span<const double> scales) {
  if (scales.size() < kGapFitPoints) throw Error("gap probe needs at least 4 scales");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0.0) || !std::isfinite(scales[i])) throw Error("gap probe scales must be positive and finite");
    if (i && !(scales[i] < scales[i - 1])) throw Error("gap probe scales must be strictly decreasing");
  }
}

/// Slope over the 4 smallest scales; NaN if any of those gaps is zero.
inline double fit_gap_slope(std::span<const double> scales, std::span<const double> gaps) {
  const std::size_t from = scales.size() - kGapFitPoints;
  const auto s = scales.subspan(from);
  const auto g = gaps.subspan(from);
  for (double v : g)
    if (!(v > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return loglog_slope(s, g);
}

/**
 * Gap between the prediction ensemble sum_t beta_t f(center + s d_t) and the
 * single prediction f(center), averaged over the probe outputs of `f`.
 *
 * `f` maps a parameter vector to one scalar per probe point. The gap is
 * O(s) when sum_t beta_t d_t != 0 and O(s^2) when it vanishes, e.g. with
 * d_t = theta_t - theta_tilde and beta the EMA coefficients.
 */
template <class F>
  requires std::invocable<F&, const ParamVector&>
GapProbeResult gap_probe(F&& f, const ParamVector& center, std::span<const ParamVector> directions,
                         std::span<const double> betas, std::span<const double> scales) {
  check_betas(betas);
  if (directions.size() != betas.size()) throw Error("direction count does not match weight count");
  check_gap_scales(scales);
  for (const auto& d : directions) center.require_compatible(d);

  const std::vector<double> base = f(center);
  if (base.empty()) throw Error("gap probe needs at least one probe point");
  GapProbeResult res;
  res.scales.assign(scales.begin(), scales.end());
  for (double s : scales) {
    std::vector<double> avg(base.size(), 0.0);
    for (std::size_t t = 0; t < directions.size(); ++t) {
      ParamVector member = center;
      member.blend(1.0, directions[t], s);
      const std::vector<double> out = f(member);
      if (out.size() != base.size()) throw Error("probe output size changed between members");
      for (std::size_t j = 0; j < out.size(); ++j) avg[j] += betas[t] * out[j];
    }
    double gap = 0.0;
    for (std::size_t j = 0; j < avg.size(); ++j) gap += std::abs(avg[j] - base[j]);
    res.gaps.push_back(gap / static_cast<double>(avg.size()));
  }
  res.fitted_slope = fit_gap_slope(res.scales, res.gaps);
  return res;
}

/// gap_probe on true-class softmax probabilities of a network over `probe`.
inline GapProbeResult gap_probe(Classifier& model, const ParamVector& center, std::span<const ParamVector> directions,
                                std::span<const double> betas, std::span<const double> scales, const Dataset& probe) {
  return gap_probe([&](const ParamVector& p) { return true_class_probs(model, p, probe); }, center, directions, betas,
                   scales);
}

/// d_t = theta_t - reference.
inline std::vector<ParamVector> deviations(std::span<const ParamVector> thetas, const ParamVector& reference) {
  std::vector<ParamVector> out;
  out.reserve(thetas.size());
  for (const auto& th : thetas) {
    ParamVector d = th;
    d.blend(1.0, reference, -1.0);
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<double> uniform_betas(std::size_t count) {
  if (count == 0) throw Error("uniform weights need at least one member");
  return std::vector<double>(count, 1.0 / static_cast<double>(count));
}

/// max_i |sum_t beta_t (theta_t - reference)_i|.
inline double weighted_residual(std::span<const ParamVector> thetas, std::span<const double> betas,
                                const ParamVector& reference) {
  const ParamVector sum = weighted_sum(thetas, betas);
  double worst = 0.0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    double r = sum[i];
    for (std::size_t t = 0; t < thetas.size(); ++t) r -= betas[t] * reference[i];
    worst = std::max(worst, std::abs(r));
  }
  return worst;
}

// ---- EMA identity check ---------------------------------------------------------

struct Theorem1Report {
  int T = 0;
  double alpha = 0.0;
  int trials = 0;
  double max_ema_residual = 0.0;
  double max_beta_sum_error = 0.0;
  /// Smallest residual seen with uniform weights (0 only when they equal the EMA weights).
  double min_uniform_residual = std::numeric_limits<double>::infinity();
  double slope_ema = std::numeric_limits<double>::quiet_NaN();
  double slope_uniform = std::numeric_limits<double>::quiet_NaN();
  bool uniform_equals_ema = false;

  bool pass(double tol = 1e-10) const { return max_ema_residual <= tol && max_beta_sum_error <= 1e-12; }

  CsvTable to_csv() const {
    CsvTable t({"T", "alpha", "trials", "max_ema_residual", "max_beta_sum_error", "min_uniform_residual", "slope_ema",
                "slope_uniform"});
    t.add_row({std::to_string(T), fmt_double(alpha), std::to_string(trials), fmt_double(max_ema_residual),
               fmt_double(max_beta_sum_error), fmt_double(min_uniform_residual), fmt_double(slope_ema),
               fmt_double(slope_uniform)});
    return t;
  }
};

/**
 * For `trials` random snapshot sets theta_1..theta_T, iterate the EMA
 * (no safeguard, theta_tilde starting at theta_1) and measure
 * sum_t beta_t (theta_t - theta_tilde) for the EMA coefficients and for
 * uniform weights. The last trial also runs the gap probe on a smooth test
 * function to report both slopes.
 */
inline Theorem1Report theorem1_check(int T, double alpha, int trials, std::uint64_t seed = 0, std::size_t dim = 8) {
  if (T < 2) throw Error("theorem1 check needs T >= 2");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("theorem1 check needs 0 < alpha < 1");
  if (trials < 1) throw Error("theorem1 check needs at least one trial");
  const ParamLayout layout = make_layout({{"theta", {dim}}});
  const auto beta = ema_coefficients(static_cast<std::size_t>(T), alpha);
  const auto uni = uniform_betas(static_cast<std::size_t>(T));

  Theorem1Report rep;
  rep.T = T;
  rep.alpha = alpha;
  rep.trials = trials;
  rep.max_beta_sum_error = std::abs(std::accumulate(beta.begin(), beta.end(), 0.0) - 1.0);
  rep.uniform_equals_ema = beta == uni;

  std::vector<ParamVector> thetas;
  ParamVector tilde;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed({seed, 0x7E01ULL, static_cast<std::uint64_t>(trial)}));
    thetas.clear();
    for (int t = 0; t < T; ++t) {
      ParamVector th(layout);
      for (double& v : th.data()) v = rng.normal();
      thetas.push_back(std::move(th));
    }
    EnsembleState ema(EnsembleConfig{alpha, 0.0, EnsembleMode::iteration}, thetas.front());
    for (int t = 1; t < T; ++t) ema.update(thetas[t]);
    tilde = ema.theta_tilde();
    rep.max_ema_residual = std::max(rep.max_ema_residual, weighted_residual(thetas, beta, tilde));
    rep.min_uniform_residual = std::min(rep.min_uniform_residual, weighted_residual(thetas, uni, tilde));
  }

  // smooth probe: f_k(theta) = tanh(w_k . theta + b_k)
  Rng rng(derive_seed({seed, 0x7E02ULL}));
  std::vector<std::vector<double>> w(16, std::vector<double>(dim));
  std::vector<double> b(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    for (double& v : w[k]) v = rng.normal() / std::sqrt(static_cast<double>(dim));
    b[k] = rng.normal();
  }
  auto f = [&](const ParamVector& p) {
    std::vector<double> out(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
      double z = b[k];
      for (std::size_t i = 0; i < dim; ++i) z += w[k][i] * p[i];
      out[k] = std::tanh(z);
    }
    return out;
  };
  const auto dirs = deviations(thetas, tilde);
  const auto scales = default_gap_scales();
  rep.slope_ema = gap_probe(f, tilde, dirs, beta, scales).fitted_slope;
  rep.slope_uniform = gap_probe(f, tilde, dirs, uni, scales).fitted_slope;
  return rep;
}

// ---- learning-rate dependence -------------------------------------------------------

struct LrProbeRun {
  std::string schedule;
  TrainResult result;
  double individual_acc = 0.0;
  double seat_acc = 0.0;
};

struct LrProbeReport {
  LrProbeRun a;
  LrProbeRun b;

  /// Per-epoch SEAT minus individual robust accuracy for both runs.
  CsvTable to_csv() const {
    CsvTable t({"schedule", "epoch", "lr", "robust_acc_individual", "robust_acc_seat", "seat_minus_individual"});
    for (const LrProbeRun* run : {&a, &b})
      for (const auto& r : run->result.log.records)
        t.add_row({run->schedule, std::to_string(r.epoch), fmt_double(r.lr), fmt_double(r.robust_acc_individual),
                   fmt_double(r.robust_acc_seat), fmt_double(r.robust_acc_seat - r.robust_acc_individual)});
    return t;
  }

  CsvTable summary_csv() const {
    CsvTable t({"schedule", "individual_acc", "seat_acc"});
    for (const LrProbeRun* run : {&a, &b})
      t.add_row({run->schedule, fmt_double(run->individual_acc), fmt_double(run->seat_acc)});
    return t;
  }
};

/// Trains both configs (which must differ only in schedule) and scores the
/// final individual and SEAT weights under `attack` on `eval`.
inline LrProbeReport lr_dependence_probe(const TrainConfig& cfg_a, const TrainConfig& cfg_b, const Dataset& train_set,
                                         const Dataset& eval, const AttackSpec& attack, std::string name_a = "a",
                                         std::string name_b = "b", std::uint64_t eval_seed = 0) {
  TrainConfig probe = cfg_a;
  probe.schedule = cfg_b.schedule;
  if (!(probe == cfg_b)) throw Error("lr dependence probe: configs differ in more than the schedule");
  Classifier model(cfg_a.model);
  auto run = [&](const TrainConfig& cfg, std::string name) {
    LrProbeRun r;
    r.schedule = std::move(name);
    r.result = train(cfg, train_set, &eval);
    r.individual_acc = robust_accuracy(model, r.result.final_params, eval, attack, eval_seed);
    r.seat_acc = robust_accuracy(model, r.result.seat_params, eval, attack, eval_seed);
    return r;
  };
  LrProbeReport rep;
  rep.a = run(cfg_a, std::move(name_a));
  rep.b = run(cfg_b, std::move(name_b));
  return rep;
}

}  // namespace seat
