#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seat/data_io.hpp"
#include "seat/models.hpp"
#include "seat/random.hpp"

namespace seat {

enum class AttackInit { zero, uniform };

/// An L-infinity attack: radius, step size, step count, start and objective.
struct AttackSpec {
  std::string name = "custom";
  double epsilon = 0.0;
  double kappa = 0.0;
  int steps = 0;
  AttackInit init = AttackInit::uniform;
  AttackLoss loss = AttackLoss::ce;
  /// 0 gives plain PGD; > 0 accumulates L1-normalised gradients (MIM).
  double momentum = 0.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw Error("attack epsilon must be non-negative");
    if (!(kappa >= 0.0)) throw Error("attack step size must be non-negative");
    if (steps < 0) throw Error("attack step count must be non-negative");
    if (!(momentum >= 0.0)) throw Error("attack momentum must be non-negative");
  }

  /// Same attack with a different budget, e.g. pixel-scale presets moved to
  /// another input range.
  AttackSpec with_budget(double eps, double step) const {
    AttackSpec s = *this;
    s.epsilon = eps;
    s.kappa = step;
    return s;
  }

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

inline AttackSpec natural_attack() { return AttackSpec{"nat", 0.0, 0.0, 0, AttackInit::zero, AttackLoss::ce, 0.0}; }

inline const std::vector<std::string>& attack_preset_names() {
  static const std::vector<std::string> names{"nat", "paper-pgd10", "paper-pgd20", "paper-pgd100", "mim", "cw"};
  return names;
}

/// Named attacks at the CIFAR budget eps = 8/255, step 2/255.
inline AttackSpec attack_preset(std::string_view name) {
  constexpr double eps = 8.0 / 255.0;
  constexpr double step = 2.0 / 255.0;
  if (name == "nat") return natural_attack();
  if (name == "paper-pgd10") return {"paper-pgd10", eps, step, 10, AttackInit::uniform, AttackLoss::ce, 0.0};
  if (name == "paper-pgd20") return {"paper-pgd20", eps, step, 20, AttackInit::uniform, AttackLoss::ce, 0.0};
  if (name == "paper-pgd100") return {"paper-pgd100", eps, step, 100, AttackInit::uniform, AttackLoss::ce, 0.0};
  if (name == "mim") return {"mim", eps, step, 20, AttackInit::zero, AttackLoss::ce, 1.0};
  if (name == "cw") return {"cw", eps, step, 30, AttackInit::uniform, AttackLoss::margin, 0.0};
  std::string valid;
  for (const auto& n : attack_preset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw Error("unknown attack preset '" + std::string(name) + "' (valid: " + valid + ")");
}

/**
 * Projection onto the eps-ball around x intersected with [0,1]^n: clamp to
 * the ball first, then to the unit box. Both sets are axis-aligned boxes,
 * so the composition lands in their intersection.
 */
inline Tensor project(const Tensor& x_adv, const Tensor& x, double epsilon) {
  if (!(epsilon >= 0.0)) throw Error("projection radius must be non-negative");
  if (x_adv.shape() != x.shape())
    throw Error("projection shape mismatch " + shape_str(x_adv.shape()) + " vs " + shape_str(x.shape()));
  Tensor r(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    r[i] = std::clamp(std::clamp(x_adv[i], x[i] - epsilon, x[i] + epsilon), 0.0, 1.0);
  return r;
}

/// Identifies a batch for random starts: sample i of the batch draws from
/// the stream (seed, sample_ids[i], epoch). Empty ids mean row indices.
struct AttackSeeding {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::span<const std::size_t> sample_ids = {};
};

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Tensor attack_start(const Tensor& x, const AttackSpec& spec, const AttackSeeding& seeding) {
  if (spec.init == AttackInit::zero || spec.epsilon == 0.0) return x;
  const std::size_t rows = x.dim(0);
  const std::size_t per = x.size() / rows;
  if (!seeding.sample_ids.empty() && seeding.sample_ids.size() != rows)
    throw Error("attack seeding ids do not match batch size");
  Tensor start(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint64_t id = seeding.sample_ids.empty() ? r : seeding.sample_ids[r];
    Rng rng(derive_seed({seeding.seed, id, seeding.epoch}));
    for (std::size_t j = 0; j < per; ++j)
      start[r * per + j] = x[r * per + j] + rng.uniform(-spec.epsilon, spec.epsilon);
  }
  return project(start, x, spec.epsilon);
}

inline Tensor iterate(Classifier& model, const ParamVector& params, const Tensor& x, std::span<const int> labels,
                      const AttackSpec& spec, const AttackSeeding& seeding, bool use_momentum) {
  spec.validate();
  Tensor x_adv = attack_start(x, spec, seeding);
  const std::size_t rows = x.dim(0);
  const std::size_t per = x.size() / rows;
  Tensor accum(x.shape());
  for (int k = 0; k < spec.steps; ++k) {
    const Tensor g = model.input_gradient(params, x_adv, labels, spec.loss);
    const Tensor* dir = &g;
    if (use_momentum) {
      for (std::size_t r = 0; r < rows; ++r) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < per; ++j) l1 += std::abs(g[r * per + j]);
        for (std::size_t j = 0; j < per; ++j) {
          double& a = accum[r * per + j];
          a = spec.momentum * a + (l1 > 0.0 ? g[r * per + j] / l1 : 0.0);
        }
      }
      dir = &accum;
    }
    for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += spec.kappa * sign((*dir)[i]);
    x_adv = project(x_adv, x, spec.epsilon);
  }
  return x_adv;
}

}  // namespace detail

/// Random-start PGD on cross-entropy: x <- P(x + kappa * sign(grad)).
inline Tensor pgd(Classifier& model, const ParamVector& params, const Tensor& x, std::span<const int> labels,
                  const AttackSpec& spec, const AttackSeeding& seeding = {}) {
  if (spec.loss != AttackLoss::ce || spec.momentum != 0.0) throw Error("pgd needs a CE objective and zero momentum");
  return detail::iterate(model, params, x, labels, spec, seeding, false);
}

/// Momentum iterative method: g <- mu g + grad/|grad|_1, x <- P(x + kappa sign(g)).
inline Tensor mim(Classifier& model, const ParamVector& params, const Tensor& x, std::span<const int> labels,
                  const AttackSpec& spec, const AttackSeeding& seeding = {}) {
  if (spec.loss != AttackLoss::ce) throw Error("mim needs a CE objective");
  return detail::iterate(model, params, x, labels, spec, seeding, true);
}

/// L-infinity PGD on the logit margin max_{k != y} z_k - z_y (confidence 0).
inline Tensor cw_margin(Classifier& model, const ParamVector& params, const Tensor& x, std::span<const int> labels,
                        const AttackSpec& spec, const AttackSeeding& seeding = {}) {
  if (spec.loss != AttackLoss::margin) throw Error("cw_margin needs the margin objective");
  return detail::iterate(model, params, x, labels, spec, seeding, spec.momentum > 0.0);
}

inline Tensor run_attack(Classifier& model, const ParamVector& params, const Tensor& x, std::span<const int> labels,
                         const AttackSpec& spec, const AttackSeeding& seeding = {}) {
  if (spec.loss == AttackLoss::margin) return cw_margin(model, params, x, labels, spec, seeding);
  if (spec.momentum > 0.0) return mim(model, params, x, labels, spec, seeding);
  return pgd(model, params, x, labels, spec, seeding);
}

/**
 * Fraction of samples still classified correctly after the attack. Samples
 * are seeded by their dataset index, so the result does not depend on the
 * batch size. Prediction ties go to the lowest class index.
 */
inline double robust_accuracy(Classifier& model, const ParamVector& params, const Dataset& data,
                              const AttackSpec& spec, std::uint64_t seed = 0, std::size_t batch = 250) {
  if (data.size() == 0) throw Error("robust_accuracy on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> ids;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    const Tensor x = data.inputs.slice_rows(begin, end);
    const std::span<const int> y(data.labels.data() + begin, end - begin);
    ids.resize(end - begin);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = begin + i;
    const Tensor xa = spec.steps == 0 && spec.init == AttackInit::zero
                          ? x
                          : run_attack(model, params, x, y, spec, AttackSeeding{seed, 0, ids});
    const auto pred = argmax_rows(model.logits(params, xa));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace seat
