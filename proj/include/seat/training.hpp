#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "seat/attacks.hpp"
#include "seat/data_io.hpp"
#include "seat/ensemble.hpp"
#include "seat/models.hpp"
#include "seat/schedules.hpp"

namespace seat {

struct SnapshotPolicy {
  enum class Kind { none, epoch, iteration, every_n };
  Kind kind = Kind::epoch;
  std::uint64_t n = 1;

  friend bool operator==(const SnapshotPolicy&, const SnapshotPolicy&) = default;
};

struct TrainConfig {
  ModelSpec model = ModelSpec::mlp({2, 64, 64, 2});
  TrainLoss loss = TrainLoss::ce;
  double eta = 6.0;
  AttackSpec attack;
  Schedule schedule = paper_linear(30, 0.01);
  int epochs = 30;
  std::size_t batch_size = 64;
  double sgd_momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  EnsembleConfig ensemble;
  SnapshotPolicy snapshot_every;
  /// Per-epoch log metrics are measured on this many evaluation samples.
  std::size_t log_eval_samples = 256;
  int homogenization_window = 5;

  void validate() const {
    model.validate();
    attack.validate();
    schedule.validate();
    ensemble.validate();
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (!(weight_decay >= 0.0)) throw Error("weight_decay must be non-negative");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw Error("sgd_momentum must lie in [0, 1)");
    if (!(eta >= 0.0)) throw Error("eta must be non-negative");
    if (schedule.total_epochs != epochs) throw Error("schedule length must equal epochs");
    if (homogenization_window < 1) throw Error("homogenization window must be >= 1");
    if (snapshot_every.kind == SnapshotPolicy::Kind::every_n && snapshot_every.n == 0)
      throw Error("snapshot interval must be positive");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double nat_acc = 0.0;
  double robust_acc_individual = 0.0;
  double robust_acc_seat = 0.0;
  double delta_homogenization = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<EpochRecord> records;

  CsvTable to_csv() const {
    CsvTable t({"epoch", "lr", "train_loss", "nat_acc", "robust_acc_individual", "robust_acc_seat",
                "delta_homogenization"});
    for (const auto& r : records)
      t.add_row({std::to_string(r.epoch), fmt_double(r.lr), fmt_double(r.train_loss), fmt_double(r.nat_acc),
                 fmt_double(r.robust_acc_individual), fmt_double(r.robust_acc_seat),
                 fmt_double(r.delta_homogenization)});
    return t;
  }
};

struct Snapshot {
  int epoch = 0;
  std::uint64_t iteration = 0;
  ParamVector params;
};

struct TrainResult {
  ParamVector initial_params;
  ParamVector final_params;
  ParamVector seat_params;
  TrainLog log;
  std::vector<Snapshot> snapshots;
  /// Individual weights at the end of each epoch; index 0 is the init.
  std::vector<ParamVector> epoch_params;
};

class TrainingAborted : public Error {
 public:
  TrainingAborted(int epoch, std::uint64_t iteration, const std::string& what)
      : Error("training aborted at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(iteration) +
              ": " + what),
        epoch_(epoch),
        iteration_(iteration) {}
  int epoch() const noexcept { return epoch_; }
  std::uint64_t iteration() const noexcept { return iteration_; }

 private:
  int epoch_;
  std::uint64_t iteration_;
};

inline std::uint64_t attack_stream_seed(std::uint64_t seed) { return derive_seed({seed, 0xA77ACCULL}); }

/// theta <- theta - lr * v with v <- momentum * v + (g + wd * theta).
inline void sgd_step(ParamVector& theta, ParamVector& velocity, const ParamVector& grad, double lr, double momentum,
                     double weight_decay) {
  theta.require_compatible(grad);
  theta.require_compatible(velocity);
  auto th = theta.data();
  auto v = velocity.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < th.size(); ++i) {
    v[i] = momentum * v[i] + (g[i] + weight_decay * th[i]);
    th[i] -= lr * v[i];
  }
}

/**
 * Adversarial training with a weight self-ensemble.
 *
 * Each minibatch: craft x' against the live weights, take an SGD-momentum
 * step on the configured loss, then fold the new weights into the EMA
 * (every iteration, or once per epoch in epoch mode). Batches are shuffled
 * per epoch from the seed; everything is reproducible from cfg.seed.
 * Per-epoch metrics are measured on an evenly strided subset of `eval` when
 * given, else of the training set.
 */
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const Dataset* eval = nullptr,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw Error("training set is empty");
  Classifier model(cfg.model);
  if (shape_size(data.sample_shape()) != shape_size(cfg.model.sample_shape()))
    throw Error("dataset sample shape " + shape_str(data.sample_shape()) + " does not match model input " +
                shape_str(cfg.model.sample_shape()));
  if (data.num_classes != cfg.model.num_classes) throw Error("dataset class count does not match model");

  const Dataset log_set = (eval ? *eval : data).strided(cfg.log_eval_samples);
  const std::uint64_t attack_seed = attack_stream_seed(cfg.seed);

  TrainResult res;
  res.initial_params = init_params(cfg.model, cfg.seed);
  ParamVector theta = res.initial_params;
  ParamVector velocity(theta.layout());
  ParamVector grad(theta.layout());
  EnsembleState ensemble(cfg.ensemble, theta);
  res.epoch_params.push_back(theta);
  std::vector<std::vector<double>> log_outputs{true_class_probs(model, theta, log_set)};

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t iters_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::uint64_t iteration = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffler(derive_seed({cfg.seed, 0x5407F1EULL, static_cast<std::uint64_t>(epoch)}));
    shuffler.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < iters_per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(data.size(), begin + cfg.batch_size);
      const std::span<const std::size_t> ids(order.data() + begin, end - begin);
      const Tensor x = data.inputs.gather_rows(ids);
      std::vector<int> y(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) y[i] = data.labels[ids[i]];

      const Tensor x_adv = run_attack(model, theta, x, y, cfg.attack,
                                      AttackSeeding{attack_seed, static_cast<std::uint64_t>(epoch), ids});
      const double loss = model.loss(theta, cfg.loss, cfg.eta, x, x_adv, y, &grad);
      if (!std::isfinite(loss)) throw TrainingAborted(epoch, iteration + 1, "non-finite loss");
      loss_sum += loss;

      const double frac = static_cast<double>(epoch - 1) + static_cast<double>(b) / static_cast<double>(iters_per_epoch);
      lr = cfg.schedule.lr_at(frac);
      sgd_step(theta, velocity, grad, lr, cfg.sgd_momentum, cfg.weight_decay);
      ++iteration;
      if (cfg.ensemble.mode == EnsembleMode::iteration) ensemble.update(theta);

      const auto& snap = cfg.snapshot_every;
      if (snap.kind == SnapshotPolicy::Kind::iteration ||
          (snap.kind == SnapshotPolicy::Kind::every_n && iteration % snap.n == 0))
        res.snapshots.push_back({epoch, iteration, theta});
    }
    if (cfg.ensemble.mode == EnsembleMode::epoch) ensemble.update(theta);
    if (cfg.snapshot_every.kind == SnapshotPolicy::Kind::epoch) res.snapshots.push_back({epoch, iteration, theta});
    res.epoch_params.push_back(theta);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(iters_per_epoch);
    rec.nat_acc = robust_accuracy(model, theta, log_set, natural_attack());
    rec.robust_acc_individual = robust_accuracy(model, theta, log_set, cfg.attack, attack_seed);
    rec.robust_acc_seat = robust_accuracy(model, ensemble.theta_tilde(), log_set, cfg.attack, attack_seed);
    log_outputs.push_back(true_class_probs(model, theta, log_set));
    if (epoch > cfg.homogenization_window)
      rec.delta_homogenization = homogenization_from_outputs(log_outputs, epoch, cfg.homogenization_window).delta;
    res.log.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  res.final_params = std::move(theta);
  res.seat_params = ensemble.theta_tilde();
  return res;
}

struct EvalRow {
  std::string attack;
  double accuracy = 0.0;
};

/// NAT row first, then one row per non-natural attack.
inline std::vector<EvalRow> evaluate(Classifier& model, const ParamVector& params, const Dataset& data,
                                     std::span<const AttackSpec> attacks, std::uint64_t seed = 0) {
  if (data.size() == 0) throw Error("evaluate on an empty dataset");
  std::vector<EvalRow> rows{{"NAT", robust_accuracy(model, params, data, natural_attack())}};
  for (const auto& a : attacks) {
    if (a.name == "nat") continue;
    rows.push_back({a.name, robust_accuracy(model, params, data, a, seed)});
  }
  return rows;
}

inline CsvTable eval_table(std::span<const EvalRow> rows) {
  CsvTable t({"attack", "accuracy"});
  for (const auto& r : rows) t.add_row({r.attack, fmt_double(r.accuracy)});
  return t;
}

}  // namespace seat
