#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "seat/error.hpp"

namespace seat {

enum class ScheduleKind { staircase, piecewise_linear, cosine, cyclic, warmup };

struct Anchor {
  double position = 0.0;  // fractional epoch
  double value = 0.0;

  friend bool operator==(const Anchor&, const Anchor&) = default;
};

inline std::string_view schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::staircase: return "staircase";
    case ScheduleKind::piecewise_linear: return "piecewise-linear";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::cyclic: return "cyclic";
    case ScheduleKind::warmup: return "warmup";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  for (auto k : {ScheduleKind::staircase, ScheduleKind::piecewise_linear, ScheduleKind::cosine, ScheduleKind::cyclic,
                 ScheduleKind::warmup})
    if (schedule_kind_name(k) == s) return k;
  throw Error("unknown schedule kind '" + std::string(s) + "'");
}

/**
 * Learning rate as a function of fractional epoch (iteration / iters_per_epoch).
 *
 * staircase and piecewise-linear are defined by their anchors (the first at
 * position 0). cosine decays from base_lr to min_lr. cyclic is a triangular
 * wave between base_lr and base_lr / cyclic_ratio with `cycles` periods over
 * the run. warmup ramps linearly from 0 to base_lr over warmup_fraction of
 * the run and then follows the staircase anchors.
 */
struct Schedule {
  ScheduleKind kind = ScheduleKind::staircase;
  std::vector<Anchor> anchors;
  int total_epochs = 1;
  double base_lr = 0.01;
  double min_lr = 0.0;
  double cyclic_ratio = 25.0;
  double cycles = 3.0;
  double warmup_fraction = 0.1;

  void validate() const {
    if (total_epochs < 1) throw Error("schedule needs total_epochs >= 1");
    if (!(base_lr >= 0.0)) throw Error("schedule base_lr must be non-negative");
    if (!(min_lr >= 0.0)) throw Error("schedule min_lr must be non-negative");
    const bool anchored =
        kind == ScheduleKind::staircase || kind == ScheduleKind::piecewise_linear || kind == ScheduleKind::warmup;
    if (anchored) {
      if (anchors.empty()) throw Error("schedule needs at least one anchor");
      if (anchors.front().position != 0.0) throw Error("first schedule anchor must be at epoch 0");
      for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (!(anchors[i].value >= 0.0)) throw Error("schedule anchor values must be non-negative");
        if (i && !(anchors[i].position > anchors[i - 1].position))
          throw Error("schedule anchors must be strictly increasing");
      }
    }
    if (kind == ScheduleKind::cyclic && (!(cyclic_ratio >= 1.0) || !(cycles > 0.0)))
      throw Error("cyclic schedule needs ratio >= 1 and cycles > 0");
    if (kind == ScheduleKind::warmup && !(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw Error("warmup fraction must lie in (0, 1)");
  }

  double lr_at(double epoch) const {
    if (!(epoch >= 0.0 && epoch <= static_cast<double>(total_epochs)))
      throw Error("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + "]");
    const double total = static_cast<double>(total_epochs);
    switch (kind) {
      case ScheduleKind::staircase: return step_value(epoch);
      case ScheduleKind::piecewise_linear: {
        auto it = std::upper_bound(anchors.begin(), anchors.end(), epoch,
                                   [](double e, const Anchor& a) { return e < a.position; });
        if (it == anchors.end()) return anchors.back().value;
        const Anchor& hi = *it;
        const Anchor& lo = *(it - 1);
        const double w = (epoch - lo.position) / (hi.position - lo.position);
        return lo.value + w * (hi.value - lo.value);
      }
      case ScheduleKind::cosine:
        return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * epoch / total));
      case ScheduleKind::cyclic: {
        const double period = total / cycles;
        const double phase = std::fmod(epoch, period) / period;
        const double low = base_lr / cyclic_ratio;
        return low + (base_lr - low) * std::abs(2.0 * phase - 1.0);
      }
      case ScheduleKind::warmup: {
        const double ramp = warmup_fraction * total;
        if (epoch < ramp) return base_lr * epoch / ramp;
        return step_value(epoch);
      }
    }
    return 0.0;
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;

 private:
  double step_value(double epoch) const {
    auto it = std::upper_bound(anchors.begin(), anchors.end(), epoch,
                               [](double e, const Anchor& a) { return e < a.position; });
    return (it - 1)->value;
  }
};

inline Schedule constant_schedule(double lr, int total_epochs) {
  Schedule s{ScheduleKind::staircase, {{0.0, lr}}, total_epochs, lr};
  s.validate();
  return s;
}

/// Hold base_lr to 1/3 of the run, fall linearly to base_lr/10 at 1/2 and to
/// base_lr/100 at the end (the 120-epoch plan 0-40-60-120, rescaled).
inline Schedule paper_linear(int total_epochs, double base_lr = 0.01) {
  const double k = static_cast<double>(total_epochs) / 120.0;
  Schedule s{ScheduleKind::piecewise_linear,
             {{0.0, base_lr}, {40.0 * k, base_lr}, {60.0 * k, base_lr / 10.0}, {120.0 * k, base_lr / 100.0}},
             total_epochs,
             base_lr};
  s.validate();
  return s;
}

/// Divide by 10 at epochs 75, 90 and 100 of 120, rescaled.
inline Schedule paper_staircase(int total_epochs, double base_lr = 0.01) {
  const double k = static_cast<double>(total_epochs) / 120.0;
  Schedule s{ScheduleKind::staircase,
             {{0.0, base_lr}, {75.0 * k, base_lr / 10.0}, {90.0 * k, base_lr / 100.0}, {100.0 * k, base_lr / 1000.0}},
             total_epochs,
             base_lr};
  s.validate();
  return s;
}

inline Schedule cosine_schedule(int total_epochs, double base_lr, double min_lr = 0.0) {
  Schedule s;
  s.kind = ScheduleKind::cosine;
  s.total_epochs = total_epochs;
  s.base_lr = base_lr;
  s.min_lr = min_lr;
  s.validate();
  return s;
}

inline Schedule cyclic_schedule(int total_epochs, double base_lr) {
  Schedule s;
  s.kind = ScheduleKind::cyclic;
  s.total_epochs = total_epochs;
  s.base_lr = base_lr;
  s.validate();
  return s;
}

/// Linear warmup over the first 10%, then the rescaled staircase.
inline Schedule warmup_schedule(int total_epochs, double base_lr) {
  Schedule s = paper_staircase(total_epochs, base_lr);
  s.kind = ScheduleKind::warmup;
  s.validate();
  return s;
}

inline Schedule schedule_preset(std::string_view name, int total_epochs, double base_lr) {
  if (name == "paper-linear") return paper_linear(total_epochs, base_lr);
  if (name == "paper-staircase") return paper_staircase(total_epochs, base_lr);
  if (name == "cosine") return cosine_schedule(total_epochs, base_lr);
  if (name == "cyclic") return cyclic_schedule(total_epochs, base_lr);
  if (name == "warmup") return warmup_schedule(total_epochs, base_lr);
  if (name == "constant") return constant_schedule(base_lr, total_epochs);
  throw Error("unknown schedule preset '" + std::string(name) +
              "' (valid: paper-linear, paper-staircase, cosine, cyclic, warmup, constant)");
}

}  // namespace seat
