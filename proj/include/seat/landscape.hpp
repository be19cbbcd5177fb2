#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seat/attacks.hpp"
#include "seat/data_io.hpp"
#include "seat/models.hpp"
#include "seat/params.hpp"
#include "seat/random.hpp"

namespace seat {

struct DirectionPair {
  ParamVector v1;
  ParamVector v2;
};

/// Standard-normal directions with the layout of theta; v1 and v2 come from
/// substreams 1 and 2 of the seed.
inline DirectionPair sample_directions(const ParamVector& theta, std::uint64_t seed) {
  if (!(theta.norm() > 0.0)) throw Error("landscape directions need a non-zero theta");
  auto draw = [&](std::uint64_t stream) {
    Rng rng(derive_seed({seed, 0x1A4D5CA9EULL, stream}));
    ParamVector v(theta.layout());
    for (double& x : v.data()) x = rng.normal();
    return v;
  };
  return {draw(1), draw(2)};
}

/// Pairwise (cascade) sum, so the result barely depends on element order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t h = v.size() / 2;
  return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}

/// Per-sample cross-entropy from logits (log-sum-exp with max shift).
inline std::vector<double> per_sample_ce(const Tensor& logits, std::span<const int> labels) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw Error("label count does not match logits");
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(logits.at(r, c) - mx);
    out[r] = mx + std::log(s) - logits.at(r, static_cast<std::size_t>(labels[r]));
  }
  return out;
}

/// Mean CE of `params` over `data`.
inline double mean_loss(Classifier& model, const ParamVector& params, const Dataset& data, std::size_t batch = 500) {
  if (data.size() == 0) throw Error("loss over an empty dataset");
  std::vector<double> all;
  all.reserve(data.size());
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    const auto l = per_sample_ce(model.logits(params, data.inputs.slice_rows(begin, end)),
                                 std::span<const int>(data.labels.data() + begin, end - begin));
    all.insert(all.end(), l.begin(), l.end());
  }
  return pairwise_sum(all) / static_cast<double>(all.size());
}

/// Copy of `data` with inputs replaced by attacks against `params`.
inline Dataset adversarial_copy(Classifier& model, const ParamVector& params, const Dataset& data,
                                const AttackSpec& attack, std::uint64_t seed = 0, std::size_t batch = 250) {
  Dataset out = data;
  const std::size_t per = data.inputs.size() / std::max<std::size_t>(data.size(), 1);
  std::vector<std::size_t> ids;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    ids.resize(end - begin);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = begin + i;
    const Tensor xa = run_attack(model, params, data.inputs.slice_rows(begin, end),
                                 std::span<const int>(data.labels.data() + begin, end - begin), attack,
                                 AttackSeeding{seed, 0, ids});
    for (std::size_t i = 0; i < xa.size(); ++i) out.inputs[begin * per + i] = xa[i];
  }
  return out;
}

struct LandscapeGrid {
  ParamVector v1, v2;
  double m = 0.0, n = 0.0;
  int grid_res = 0;
  double half_width = 0.0;
  /// Shared axis for a and b.
  std::vector<double> coords;
  /// Row-major, losses[i * grid_res + j] at (a = coords[i], b = coords[j]).
  std::vector<double> losses;
  std::uint64_t seed = 0;

  double loss(int i, int j) const { return losses.at(static_cast<std::size_t>(i * grid_res + j)); }
  double center_loss() const { return loss(grid_res / 2, grid_res / 2); }

  CsvTable to_csv() const {
    CsvTable t({"a", "b", "loss"});
    for (int i = 0; i < grid_res; ++i)
      for (int j = 0; j < grid_res; ++j) t.add_row({fmt_double(coords[i]), fmt_double(coords[j]), fmt_double(loss(i, j))});
    return t;
  }

  nlohmann::json metadata() const {
    return {{"seed", seed}, {"grid_res", grid_res}, {"half_width", half_width}, {"m", m}, {"n", n}};
  }
};

inline std::vector<double> grid_coords(int grid_res, double half_width) {
  std::vector<double> c(static_cast<std::size_t>(grid_res));
  const double last = static_cast<double>(grid_res - 1);
  for (int i = 0; i < grid_res; ++i) c[i] = half_width * (2.0 * static_cast<double>(i) / last - 1.0);
  return c;
}

/**
 * Loss surface L(a, b) = mean CE at theta + a m v1 + b n v2 with
 * m = |theta| / |v1| and n = |theta| / |v2| (global Frobenius norms), over an
 * odd grid_res x grid_res grid spanning [-half_width, half_width]^2. Cells are
 * independent; `threads` > 1 splits rows across workers with identical results.
 */
inline LandscapeGrid surface(Classifier& model, const ParamVector& theta, const ParamVector& v1, const ParamVector& v2,
                             int grid_res, double half_width, const Dataset& eval, std::uint64_t seed = 0,
                             unsigned threads = 1) {
  if (grid_res < 3 || grid_res % 2 == 0) throw Error("landscape grid resolution must be odd and >= 3");
  if (!(half_width > 0.0) || !std::isfinite(half_width)) throw Error("landscape half-width must be positive");
  theta.require_compatible(v1);
  theta.require_compatible(v2);
  const double tn = theta.norm();
  if (!(tn > 0.0)) throw Error("landscape needs a non-zero theta");
  if (!(v1.norm() > 0.0)) throw Error("landscape direction v1 is zero");
  if (!(v2.norm() > 0.0)) throw Error("landscape direction v2 is zero");

  LandscapeGrid g;
  g.v1 = v1;
  g.v2 = v2;
  g.m = tn / v1.norm();
  g.n = tn / v2.norm();
  g.grid_res = grid_res;
  g.half_width = half_width;
  g.coords = grid_coords(grid_res, half_width);
  g.losses.assign(static_cast<std::size_t>(grid_res * grid_res), 0.0);
  g.seed = seed;

  auto row = [&](Classifier& mdl, int i) {
    for (int j = 0; j < grid_res; ++j) {
      ParamVector p = theta;
      p.blend(1.0, v1, g.coords[i] * g.m);
      p.blend(1.0, v2, g.coords[j] * g.n);
      g.losses[static_cast<std::size_t>(i * grid_res + j)] = mean_loss(mdl, p, eval);
    }
  };
  if (threads <= 1) {
    for (int i = 0; i < grid_res; ++i) row(model, i);
    return g;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      Classifier local(model.spec());
      for (int i = static_cast<int>(w); i < grid_res; i += static_cast<int>(threads)) row(local, i);
    });
  for (auto& t : pool) t.join();
  return g;
}

struct Sharpness {
  double range = 0.0;
  double mean_grad_mag = 0.0;
};

/// max - min of the losses, and the mean central-difference gradient norm
/// over interior cells (in loss per unit of a, b).
inline Sharpness sharpness_summary(const LandscapeGrid& g) {
  if (g.grid_res < 3 || g.losses.size() != static_cast<std::size_t>(g.grid_res * g.grid_res))
    throw Error("sharpness needs a valid grid");
  const auto [lo, hi] = std::minmax_element(g.losses.begin(), g.losses.end());
  Sharpness s;
  s.range = *hi - *lo;
  const double h = g.coords[1] - g.coords[0];
  double total = 0.0;
  int count = 0;
  for (int i = 1; i + 1 < g.grid_res; ++i)
    for (int j = 1; j + 1 < g.grid_res; ++j) {
      const double ga = (g.loss(i + 1, j) - g.loss(i - 1, j)) / (2.0 * h);
      const double gb = (g.loss(i, j + 1) - g.loss(i, j - 1)) / (2.0 * h);
      total += std::sqrt(ga * ga + gb * gb);
      ++count;
    }
  s.mean_grad_mag = total / count;
  return s;
}

}  // namespace seat
