#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seat/attacks.hpp"
#include "seat/data_io.hpp"
#include "seat/ensemble.hpp"
#include "seat/models.hpp"
#include "seat/schedules.hpp"
#include "seat/training.hpp"

#ifndef SEAT_VERSION
#define SEAT_VERSION "0.0.0"
#endif
#ifndef SEAT_DATA_DIR
#define SEAT_DATA_DIR "data"
#endif

namespace seat {

inline constexpr const char* kToolVersion = SEAT_VERSION;

/// Invalid or unreadable run configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

struct DatasetConfig {
  /// "two-moons" or an MNIST preset (mnist-1k, mnist-4k).
  std::string name = "two-moons";
  std::size_t n_train = 512;
  std::size_t n_test = 256;
  double noise = 0.1;
  /// MNIST evaluation preset.
  std::string eval = "mnist-test-1k";
  std::string data_dir = SEAT_DATA_DIR;
  std::string images = "mnist5k-images-idx3-ubyte.gz";
  std::string labels = "mnist5k-labels-idx1-ubyte.gz";
};

/// Everything a `train` run needs; parsed from JSON, unknown keys rejected.
struct RunConfig {
  TrainConfig train;
  DatasetConfig dataset;
  std::string output_dir = "runs/default";
  std::string schedule_preset = "paper-linear";
  std::string attack_preset = "paper-pgd10";
  std::vector<std::string> eval_attacks{"nat", "paper-pgd20"};
  nlohmann::json resolved;

  /// FNV-1a of the resolved config without its file-system locations
  /// (output_dir, dataset.data_dir).
  std::string hash() const {
    nlohmann::json j = resolved;
    j.erase("output_dir");
    if (j.contains("dataset")) j["dataset"].erase("data_dir");
    return hex64(fnv1a64(j.dump()));
  }
};

namespace detail {

inline std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

/// Reads keys from one JSON object and reports the first unknown one.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: key '" + where(key) + "' has the wrong type");
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where(k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json model_spec_to_json(const ModelSpec& s) {
  if (s.kind == ModelKind::mlp) return {{"kind", "mlp"}, {"layer_sizes", s.layer_sizes}};
  return {{"kind", "cnn"},
          {"input_shape", s.input_shape},
          {"conv_channels", s.conv_channels},
          {"kernel", s.kernel},
          {"padding", s.padding == Padding::same ? "same" : "valid"},
          {"num_classes", s.num_classes}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") return ModelSpec::mlp(j.at("layer_sizes").get<std::vector<std::size_t>>());
    if (kind == "cnn") {
      ModelSpec s = ModelSpec::cnn(j.at("input_shape").get<Shape>(), j.at("conv_channels").get<std::vector<std::size_t>>(),
                                   j.at("num_classes").get<std::size_t>(),
                                   j.at("padding").get<std::string>() == "valid" ? Padding::valid : Padding::same);
      s.kernel = j.at("kernel").get<std::size_t>();
      s.validate();
      return s;
    }
    throw Error("unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("malformed model description: ") + ex.what());
  }
}

inline bool is_mnist_preset(const std::string& name) {
  return name == "mnist-1k" || name == "mnist-4k" || name == "mnist-test-1k";
}

/// Parses and validates a run configuration document.
inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& ex) {
    const auto [line, col] = detail::line_col(text, ex.byte == 0 ? 0 : ex.byte - 1);
    throw ConfigError("config: JSON syntax error at line " + std::to_string(line) + ", column " + std::to_string(col));
  }
  RunConfig rc;
  TrainConfig& tc = rc.train;
  detail::ObjectReader top(root, "");
  top.get("seed", tc.seed);
  top.get("output_dir", rc.output_dir);
  top.get("epochs", tc.epochs);
  top.get("batch_size", tc.batch_size);
  top.get("momentum", tc.sgd_momentum);
  top.get("weight_decay", tc.weight_decay);
  top.get("eta", tc.eta);
  top.get("log_eval_samples", tc.log_eval_samples);
  top.get("homogenization_window", tc.homogenization_window);
  top.get("eval_attacks", rc.eval_attacks);
  std::string loss = "ce";
  top.get("loss", loss);
  if (loss == "ce") tc.loss = TrainLoss::ce;
  else if (loss == "trades") tc.loss = TrainLoss::trades;
  else if (loss == "mart") tc.loss = TrainLoss::mart;
  else throw ConfigError("config: key 'loss' must be one of ce, trades, mart");

  if (const auto* d = top.child("dataset")) {
    detail::ObjectReader r(*d, "dataset");
    r.get("name", rc.dataset.name);
    r.get("n_train", rc.dataset.n_train);
    r.get("n_test", rc.dataset.n_test);
    r.get("noise", rc.dataset.noise);
    r.get("eval", rc.dataset.eval);
    r.get("data_dir", rc.dataset.data_dir);
    r.get("images", rc.dataset.images);
    r.get("labels", rc.dataset.labels);
    r.finish();
  }
  const bool mnist = rc.dataset.name != "two-moons";
  if (mnist && !is_mnist_preset(rc.dataset.name))
    throw ConfigError("config: key 'dataset.name' must be two-moons, mnist-1k or mnist-4k");
  if (mnist && !is_mnist_preset(rc.dataset.eval)) throw ConfigError("config: key 'dataset.eval' is not an MNIST preset");

  std::string kind = "mlp";
  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> channels{8, 8};
  std::string padding = "same";
  if (const auto* m = top.child("model")) {
    detail::ObjectReader r(*m, "model");
    r.get("kind", kind);
    r.get("hidden", hidden);
    r.get("channels", channels);
    r.get("padding", padding);
    r.finish();
  }
  const std::size_t classes = mnist ? 10 : 2;
  try {
    if (kind == "mlp") {
      std::vector<std::size_t> sizes{mnist ? std::size_t{784} : std::size_t{2}};
      sizes.insert(sizes.end(), hidden.begin(), hidden.end());
      sizes.push_back(classes);
      tc.model = ModelSpec::mlp(sizes);
    } else if (kind == "cnn") {
      if (!mnist) throw ConfigError("config: key 'model.kind' cnn needs an image dataset");
      tc.model = ModelSpec::cnn({1, 28, 28}, channels, classes, padding == "valid" ? Padding::valid : Padding::same);
    } else {
      throw ConfigError("config: key 'model.kind' must be mlp or cnn");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& ex) {
    throw ConfigError(std::string("config: key 'model': ") + ex.what());
  }

  double base_lr = 0.01;
  if (const auto* s = top.child("schedule")) {
    detail::ObjectReader r(*s, "schedule");
    r.get("preset", rc.schedule_preset);
    r.get("base_lr", base_lr);
    r.finish();
  }

  double eps = -1.0, step = -1.0;
  if (const auto* a = top.child("attack")) {
    detail::ObjectReader r(*a, "attack");
    r.get("preset", rc.attack_preset);
    r.get("epsilon", eps);
    r.get("step", step);
    r.finish();
  }

  if (const auto* e = top.child("ensemble")) {
    detail::ObjectReader r(*e, "ensemble");
    r.get("alpha", tc.ensemble.alpha);
    r.get("c", tc.ensemble.safeguard_c);
    std::string mode = "iteration";
    r.get("mode", mode);
    if (mode == "iteration") tc.ensemble.mode = EnsembleMode::iteration;
    else if (mode == "epoch") tc.ensemble.mode = EnsembleMode::epoch;
    else throw ConfigError("config: key 'ensemble.mode' must be iteration or epoch");
    r.finish();
  }

  std::string snapshots = "epoch";
  top.get("snapshots", snapshots);
  std::uint64_t snapshot_n = 1;
  top.get("snapshot_every", snapshot_n);
  if (snapshots == "none") tc.snapshot_every = {SnapshotPolicy::Kind::none, 1};
  else if (snapshots == "epoch") tc.snapshot_every = {SnapshotPolicy::Kind::epoch, 1};
  else if (snapshots == "iteration") tc.snapshot_every = {SnapshotPolicy::Kind::iteration, 1};
  else if (snapshots == "every_n") tc.snapshot_every = {SnapshotPolicy::Kind::every_n, snapshot_n};
  else throw ConfigError("config: key 'snapshots' must be none, epoch, iteration or every_n");
  top.finish();

  try {
    tc.schedule = schedule_preset(rc.schedule_preset, tc.epochs, base_lr);
    tc.attack = attack_preset(rc.attack_preset);
    if (eps >= 0.0 || step >= 0.0)
      tc.attack = tc.attack.with_budget(eps >= 0.0 ? eps : tc.attack.epsilon, step >= 0.0 ? step : tc.attack.kappa);
    for (const auto& n : rc.eval_attacks) (void)attack_preset(n);
    tc.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }

  rc.resolved = {
      {"seed", tc.seed},
      {"output_dir", rc.output_dir},
      {"epochs", tc.epochs},
      {"batch_size", tc.batch_size},
      {"momentum", tc.sgd_momentum},
      {"weight_decay", tc.weight_decay},
      {"eta", tc.eta},
      {"loss", loss},
      {"log_eval_samples", tc.log_eval_samples},
      {"homogenization_window", tc.homogenization_window},
      {"eval_attacks", rc.eval_attacks},
      {"dataset",
       {{"name", rc.dataset.name},
        {"n_train", rc.dataset.n_train},
        {"n_test", rc.dataset.n_test},
        {"noise", rc.dataset.noise},
        {"eval", rc.dataset.eval},
        {"data_dir", rc.dataset.data_dir},
        {"images", rc.dataset.images},
        {"labels", rc.dataset.labels}}},
      {"model", {{"kind", kind}, {"hidden", hidden}, {"channels", channels}, {"padding", padding}}},
      {"schedule", {{"preset", rc.schedule_preset}, {"base_lr", base_lr}}},
      {"attack", {{"preset", rc.attack_preset}, {"epsilon", tc.attack.epsilon}, {"step", tc.attack.kappa}}},
      {"ensemble",
       {{"alpha", tc.ensemble.alpha},
        {"c", tc.ensemble.safeguard_c},
        {"mode", tc.ensemble.mode == EnsembleMode::iteration ? "iteration" : "epoch"}}},
      {"snapshots", snapshots},
      {"snapshot_every", snapshot_n},
  };
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

/// Train and evaluation sets for a run.
inline std::pair<Dataset, Dataset> load_datasets(const RunConfig& rc) {
  const DatasetConfig& d = rc.dataset;
  if (d.name == "two-moons") return two_moons_split(d.n_train, d.n_test, d.noise, rc.train.seed);
  const std::filesystem::path dir(d.data_dir);
  const Dataset full = load_mnist_idx((dir / d.images).string(), (dir / d.labels).string());
  Dataset tr = full.subset(mnist_subset_indices(full, d.name), d.name);
  Dataset te = full.subset(mnist_subset_indices(full, d.eval), d.eval);
  te.split = Split::test;
  return {std::move(tr), std::move(te)};
}

}  // namespace seat
