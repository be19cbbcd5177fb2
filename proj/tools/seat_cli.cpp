// seat: command-line front end (train, eval, probe, landscape).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seat/attacks.hpp"
#include "seat/data_io.hpp"
#include "seat/ensemble.hpp"
#include "seat/landscape.hpp"
#include "seat/run_config.hpp"
#include "seat/theory_probe.hpp"
#include "seat/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seat;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

fs::path output_root(const std::string& configured) {
  if (const char* env = std::getenv("SEAT_OUTPUT_DIR"); env && *env) return fs::path(env);
  return fs::path(configured);
}

json provenance(const std::string& config_hash, std::uint64_t seed) {
  return {{"config_hash", config_hash}, {"seed", seed}, {"tool_version", kToolVersion}};
}

/// CSV plus `<path>.meta.json` carrying provenance.
void write_artifact(const CsvTable& table, const fs::path& path, const json& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  table.write(path);
  write_json(path.string() + ".meta.json", meta);
}

std::string args_hash(const json& args) { return hex64(fnv1a64(args.dump())); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct LoadedCheckpoint {
  ParamVector params;
  json meta;
  ModelSpec spec;
  RunConfig run;
};

LoadedCheckpoint open_checkpoint(const fs::path& path) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const CheckpointError& ex) {
    throw ConfigError(ex.what());
  }
  LoadedCheckpoint lc;
  lc.params = std::move(ck.params);
  lc.meta = json::parse(ck.metadata);
  if (!lc.meta.contains("model") || !lc.meta.contains("config"))
    throw ConfigError("checkpoint '" + path.string() + "' lacks model/config metadata");
  lc.spec = model_spec_from_json(lc.meta.at("model"));
  try {
    require_same_layout(model_layout(lc.spec), lc.params.layout());
  } catch (const LayoutError& ex) {
    throw ConfigError("checkpoint does not match its model description: " + std::string(ex.what()));
  }
  lc.run = parse_run_config(lc.meta.at("config").dump());
  return lc;
}

Dataset pick_dataset(const RunConfig& rc, const std::string& which, std::size_t samples) {
  Dataset d;
  if (which == "train" || which == "test") {
    auto [tr, te] = load_datasets(rc);
    d = which == "train" ? std::move(tr) : std::move(te);
  } else if (is_mnist_preset(which)) {
    if (rc.dataset.name == "two-moons") throw ConfigError("dataset '" + which + "' does not match a two-moons model");
    const fs::path dir(rc.dataset.data_dir);
    const Dataset full =
        load_mnist_idx((dir / rc.dataset.images).string(), (dir / rc.dataset.labels).string());
    d = full.subset(mnist_subset_indices(full, which), which);
  } else {
    throw ConfigError("unknown dataset '" + which + "' (valid: train, test, mnist-1k, mnist-4k, mnist-test-1k)");
  }
  return samples ? d.strided(samples) : d;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(const std::string& config_path) {
  if (!fs::exists(config_path)) throw ConfigError("config file '" + config_path + "' not found");
  const RunConfig rc = load_run_config(config_path);
  const std::string hash = rc.hash();
  const auto [train_set, eval_set] = load_datasets(rc);
  const fs::path out = output_root(rc.output_dir);
  fs::create_directories(out);
  write_json(out / "config.json", rc.resolved);

  const TrainConfig& tc = rc.train;
  const TrainResult res = train(tc, train_set, &eval_set, [](const EpochRecord& r) {
    std::printf("epoch %3d  lr %.5g  loss %.4f  nat %.3f  rob %.3f  seat %.3f\n", r.epoch, r.lr, r.train_loss,
                r.nat_acc, r.robust_acc_individual, r.robust_acc_seat);
    std::fflush(stdout);
  });

  const std::uint64_t iters = (train_set.size() + tc.batch_size - 1) / tc.batch_size;
  auto meta = [&](const std::string& role, int epoch, std::uint64_t iteration) {
    json m = provenance(hash, tc.seed);
    m["role"] = role;
    m["epoch"] = epoch;
    m["iteration"] = iteration;
    m["model"] = model_spec_to_json(tc.model);
    m["config"] = rc.resolved;
    return m;
  };
  const std::uint64_t total_iters = iters * static_cast<std::uint64_t>(tc.epochs);
  save_checkpoint(res.final_params, meta("final", tc.epochs, total_iters), out / "final.ckpt");
  save_checkpoint(res.seat_params, meta("seat", tc.epochs, total_iters), out / "seat.ckpt");

  const auto kind = tc.snapshot_every.kind;
  if (kind != SnapshotPolicy::Kind::none) {
    const fs::path snaps = out / "snapshots";
    fs::create_directories(snaps);
    char name[64];
    if (kind == SnapshotPolicy::Kind::epoch) {
      for (std::size_t e = 0; e < res.epoch_params.size(); ++e) {
        std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", e);
        save_checkpoint(res.epoch_params[e], meta("snapshot", static_cast<int>(e), e * iters), snaps / name);
      }
    } else {
      for (const auto& s : res.snapshots) {
        std::snprintf(name, sizeof name, "iter_%08llu.ckpt", static_cast<unsigned long long>(s.iteration));
        save_checkpoint(s.params, meta("snapshot", s.epoch, s.iteration), snaps / name);
      }
    }
  }
  write_artifact(res.log.to_csv(), out / "train_log.csv", provenance(hash, tc.seed));

  Classifier model(tc.model);
  std::vector<AttackSpec> attacks;
  for (const auto& n : rc.eval_attacks) {
    AttackSpec a = attack_preset(n);
    if (n != "nat") a = a.with_budget(tc.attack.epsilon, tc.attack.kappa);
    attacks.push_back(a);
  }
  for (const auto& [role, params] : {std::pair<std::string, const ParamVector*>{"final", &res.final_params},
                                     {"seat", &res.seat_params}}) {
    const auto rows = evaluate(model, *params, eval_set, attacks, tc.seed);
    for (const auto& r : rows) std::printf("%-6s %-14s %.4f\n", role.c_str(), r.attack.c_str(), r.accuracy);
    write_artifact(eval_table(rows), out / ("eval_" + role + ".csv"), provenance(hash, tc.seed));
  }
  std::printf("wrote %s\n", out.string().c_str());
  return kExitOk;
}

// ---- eval ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string dataset = "test";
  std::string attacks = "nat,paper-pgd20";
  double epsilon = -1.0;
  double step = -1.0;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const LoadedCheckpoint ck = open_checkpoint(a.checkpoint);
  const Dataset data = pick_dataset(ck.run, a.dataset, a.samples);
  if (shape_size(data.sample_shape()) != shape_size(ck.spec.sample_shape()) || data.num_classes != ck.spec.num_classes)
    throw ConfigError("checkpoint model does not fit dataset '" + a.dataset + "'");
  const AttackSpec train_attack = ck.run.train.attack;
  std::vector<AttackSpec> attacks;
  for (const auto& n : split_list(a.attacks)) {
    AttackSpec s;
    try {
      s = attack_preset(n);
    } catch (const Error& ex) {
      throw ConfigError(ex.what());
    }
    if (n != "nat") {
      // presets default to the run's training budget unless overridden
      s = s.with_budget(a.epsilon >= 0.0 ? a.epsilon : train_attack.epsilon, a.step >= 0.0 ? a.step : train_attack.kappa);
    }
    attacks.push_back(s);
  }
  Classifier model(ck.spec);
  const auto rows = evaluate(model, ck.params, data, attacks, a.seed);
  const CsvTable table = eval_table(rows);
  std::cout << table.str();
  const fs::path out = a.out.empty() ? output_root(fs::path(a.checkpoint).parent_path().string()) /
                                           ("eval_" + fs::path(a.checkpoint).stem().string() + "_" + a.dataset + ".csv")
                                     : fs::path(a.out);
  json meta = provenance(ck.meta.value("config_hash", std::string()), a.seed);
  meta["checkpoint"] = fs::path(a.checkpoint).filename().string();
  meta["dataset"] = a.dataset;
  write_artifact(table, out, meta);
  return kExitOk;
}

// ---- probes ---------------------------------------------------------------------------

std::vector<ParamVector> load_epoch_snapshots(const fs::path& run, json* meta_out) {
  const fs::path dir = run / "snapshots";
  if (!fs::is_directory(dir)) throw ConfigError("no snapshot directory under '" + run.string() + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind("epoch_", 0) == 0) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no epoch snapshots in '" + dir.string() + "'");
  std::vector<ParamVector> out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    Checkpoint ck = load_checkpoint(files[i]);
    const json m = json::parse(ck.metadata);
    if (m.value("epoch", -1) != static_cast<int>(i))
      throw ConfigError("snapshot epochs are not contiguous at '" + files[i].filename().string() + "'");
    if (i == 0 && meta_out) *meta_out = m;
    out.push_back(std::move(ck.params));
  }
  return out;
}

int report(bool pass, const std::string& line) {
  std::printf("%s %s\n", pass ? "PASS" : "FAIL", line.c_str());
  return kExitOk;
}

int probe_theorem1(int T, double alpha, int trials, std::uint64_t seed, const fs::path& out) {
  const Theorem1Report rep = theorem1_check(T, alpha, trials, seed);
  const json args{{"probe", "theorem1"}, {"T", T}, {"alpha", alpha}, {"trials", trials}, {"seed", seed}};
  write_artifact(rep.to_csv(), out / "theorem1.csv", provenance(args_hash(args), seed));
  char buf[256];
  std::snprintf(buf, sizeof buf, "theorem1 T=%d alpha=%g max_residual=%.3e beta_sum_err=%.3e slope_ema=%.3f slope_uniform=%.3f",
                T, alpha, rep.max_ema_residual, rep.max_beta_sum_error, rep.slope_ema, rep.slope_uniform);
  return report(rep.pass(), buf);
}

int probe_gap(const fs::path& run, const std::string& beta_kind, double alpha, int last, std::size_t samples,
              const fs::path& out) {
  json meta;
  const auto snaps = load_epoch_snapshots(run, &meta);
  if (last < 2 || static_cast<std::size_t>(last) >= snaps.size())
    throw ConfigError("--last must lie in [2, number of trained epochs]");
  const RunConfig rc = parse_run_config(meta.at("config").dump());
  const std::vector<ParamVector> members(snaps.end() - last, snaps.end());
  const auto ema = ema_coefficients(members.size(), alpha);
  const ParamVector center = weighted_sum(members, ema);
  const auto dirs = deviations(members, center);
  std::vector<double> betas;
  if (beta_kind == "ema") betas = ema;
  else if (beta_kind == "uniform") betas = uniform_betas(members.size());
  else throw ConfigError("--beta must be ema or uniform");
  const Dataset probe = pick_dataset(rc, "test", samples);
  Classifier model(model_spec_from_json(meta.at("model")));
  const auto scales = default_gap_scales();
  const GapProbeResult res = gap_probe(model, center, dirs, betas, scales, probe);
  const json args{{"probe", "gap"}, {"beta", beta_kind}, {"alpha", alpha}, {"last", last}, {"samples", samples},
                  {"run_config_hash", meta.value("config_hash", std::string())}};
  json prov = provenance(args_hash(args), rc.train.seed);
  prov["fitted_slope"] = res.fitted_slope;
  write_artifact(res.to_csv(), out / ("gap_" + beta_kind + ".csv"), prov);
  const bool pass = beta_kind == "ema" ? (res.fitted_slope >= 1.8 && res.fitted_slope <= 2.2)
                                       : (res.fitted_slope >= 0.8 && res.fitted_slope <= 1.2);
  char buf[128];
  std::snprintf(buf, sizeof buf, "gap beta=%s fitted_slope=%.4f", beta_kind.c_str(), res.fitted_slope);
  return report(pass, buf);
}

int probe_homogenization(const fs::path& run, int m, std::size_t samples, const fs::path& out) {
  json meta;
  const auto snaps = load_epoch_snapshots(run, &meta);
  const RunConfig rc = parse_run_config(meta.at("config").dump());
  const Dataset eval = pick_dataset(rc, "test", samples);
  Classifier model(model_spec_from_json(meta.at("model")));
  const auto series = homogenization_series(model, snaps, m, eval);
  if (series.empty()) throw ConfigError("homogenization needs more than m trained epochs");
  CsvTable t({"epoch", "delta"});
  for (const auto& r : series) t.add_row({std::to_string(r.epoch), fmt_double(r.delta)});
  const json args{{"probe", "homogenization"}, {"m", m}, {"samples", samples},
                  {"run_config_hash", meta.value("config_hash", std::string())}};
  write_artifact(t, out / "homogenization.csv", provenance(args_hash(args), rc.train.seed));

  const int epochs = static_cast<int>(snaps.size()) - 1;
  std::vector<double> e, d;
  for (const auto& r : series)
    if (3 * r.epoch > epochs) {
      e.push_back(r.epoch);
      d.push_back(r.delta);
    }
  const double rho = e.size() >= 2 ? spearman(e, d) : std::nan("");
  char buf[128];
  std::snprintf(buf, sizeof buf, "homogenization m=%d spearman_last_two_thirds=%.4f", m, rho);
  return report(rho < -0.3, buf);
}

int probe_lr(const std::string& config_a, const std::string& config_b, const std::string& schedule_b,
             const fs::path& out_override) {
  if (!fs::exists(config_a)) throw ConfigError("config file '" + config_a + "' not found");
  const RunConfig a = load_run_config(config_a);
  RunConfig b = a;
  if (!config_b.empty()) {
    if (!fs::exists(config_b)) throw ConfigError("config file '" + config_b + "' not found");
    b = load_run_config(config_b);
  } else if (!schedule_b.empty()) {
    try {
      b.train.schedule = schedule_preset(schedule_b, a.train.epochs, a.train.schedule.base_lr);
    } catch (const Error& ex) {
      throw ConfigError(ex.what());
    }
    b.schedule_preset = schedule_b;
    b.resolved["schedule"]["preset"] = schedule_b;
  } else {
    throw ConfigError("probe lr needs --config-b or --schedule-b");
  }
  const auto [tr, te] = load_datasets(a);
  AttackSpec attack = attack_preset("paper-pgd20").with_budget(a.train.attack.epsilon, a.train.attack.kappa);
  LrProbeReport rep;
  try {
    rep = lr_dependence_probe(a.train, b.train, tr, te, attack, a.schedule_preset, b.schedule_preset, a.train.seed);
  } catch (const Error& ex) {
    if (std::string(ex.what()).find("differ") != std::string::npos) throw ConfigError(ex.what());
    throw;
  }
  const fs::path out = out_override.empty() ? output_root(a.output_dir) : out_override;
  const json prov = provenance(a.hash() + "+" + b.hash(), a.train.seed);
  write_artifact(rep.to_csv(), out / "lr_probe.csv", prov);
  write_artifact(rep.summary_csv(), out / "lr_probe_summary.csv", prov);
  char buf[192];
  std::snprintf(buf, sizeof buf, "lr %s seat=%.4f vs %s seat=%.4f", rep.a.schedule.c_str(), rep.a.seat_acc,
                rep.b.schedule.c_str(), rep.b.seat_acc);
  return report(rep.a.seat_acc - rep.b.seat_acc >= 0.01, buf);
}

// ---- landscape -------------------------------------------------------------------------

struct LandscapeArgs {
  std::string checkpoint;
  std::string dataset = "test";
  int grid = 21;
  double half_width = 1.0;
  std::uint64_t seed = 0;
  bool adversarial = false;
  std::size_t samples = 256;
  std::string out;
};

int cmd_landscape(const LandscapeArgs& a, unsigned threads) {
  if (a.grid < 3 || a.grid % 2 == 0) throw ConfigError("--grid must be odd and >= 3");
  if (!(a.half_width > 0.0)) throw ConfigError("--half-width must be positive");
  const LoadedCheckpoint ck = open_checkpoint(a.checkpoint);
  Dataset eval = pick_dataset(ck.run, a.dataset, a.samples);
  Classifier model(ck.spec);
  if (a.adversarial) {
    const AttackSpec atk = attack_preset("paper-pgd20").with_budget(ck.run.train.attack.epsilon, ck.run.train.attack.kappa);
    eval = adversarial_copy(model, ck.params, eval, atk, a.seed);
  }
  const DirectionPair dirs = sample_directions(ck.params, a.seed);
  const LandscapeGrid grid = surface(model, ck.params, dirs.v1, dirs.v2, a.grid, a.half_width, eval, a.seed, threads);
  const Sharpness sh = sharpness_summary(grid);
  const fs::path out = a.out.empty() ? output_root(fs::path(a.checkpoint).parent_path().string()) /
                                           ("landscape_" + fs::path(a.checkpoint).stem().string() + ".csv")
                                     : fs::path(a.out);
  json meta = provenance(ck.meta.value("config_hash", std::string()), a.seed);
  meta.update(grid.metadata());
  meta["checkpoint"] = fs::path(a.checkpoint).filename().string();
  meta["dataset"] = a.dataset;
  meta["samples"] = eval.size();
  meta["adversarial"] = a.adversarial;
  meta["range"] = sh.range;
  meta["mean_grad_mag"] = sh.mean_grad_mag;
  write_artifact(grid.to_csv(), out, meta);
  std::printf("landscape %s range=%.6f mean_grad_mag=%.6f\n", out.string().c_str(), sh.range, sh.mean_grad_mag);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-ensemble adversarial training toolkit"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  unsigned threads = 1;
  app.add_option("--threads", threads, "Worker threads for parallel sections")->check(CLI::Range(1u, 256u));

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "Adversarial training with a weight self-ensemble");
  train_cmd->add_option("--config", config_path, "Run configuration (JSON)")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Attack x accuracy table for a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--dataset", ev.dataset, "train, test or an MNIST preset");
  eval_cmd->add_option("--attacks", ev.attacks, "Comma-separated presets");
  eval_cmd->add_option("--epsilon", ev.epsilon, "Override attack radius");
  eval_cmd->add_option("--step", ev.step, "Override attack step size");
  eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--samples", ev.samples, "Evaluate on an evenly strided subset");
  eval_cmd->add_option("--out", ev.out);

  auto* probe_cmd = app.add_subcommand("probe", "Theory probes");
  probe_cmd->require_subcommand(1);
  std::string out_dir;
  probe_cmd->add_option("--out", out_dir, "Output directory");

  int T = 16, trials = 100;
  double alpha = 0.9;
  std::uint64_t probe_seed = 0;
  auto* p_t1 = probe_cmd->add_subcommand("theorem1", "EMA coefficient identity");
  p_t1->add_option("--T", T)->check(CLI::Range(2, 100000));
  p_t1->add_option("--alpha", alpha);
  p_t1->add_option("--trials", trials)->check(CLI::PositiveNumber);
  p_t1->add_option("--seed", probe_seed);

  std::string run_dir, beta_kind = "ema";
  int last = 8, window = 5;
  std::size_t samples = 128;
  auto* p_gap = probe_cmd->add_subcommand("gap", "Prediction vs weight ensemble gap order");
  p_gap->add_option("--run", run_dir, "Training output directory")->required();
  p_gap->add_option("--beta", beta_kind, "ema or uniform");
  p_gap->add_option("--alpha", alpha);
  p_gap->add_option("--last", last, "Number of trailing epoch snapshots");
  p_gap->add_option("--samples", samples);

  auto* p_h = probe_cmd->add_subcommand("homogenization", "Delta_e series over epoch snapshots");
  p_h->add_option("--run", run_dir)->required();
  p_h->add_option("--m", window)->check(CLI::PositiveNumber);
  p_h->add_option("--samples", samples);

  std::string config_b, schedule_b;
  auto* p_lr = probe_cmd->add_subcommand("lr", "Same run under two schedules");
  p_lr->add_option("--config", config_path)->required();
  p_lr->add_option("--config-b", config_b);
  p_lr->add_option("--schedule-b", schedule_b);

  LandscapeArgs la;
  auto* land_cmd = app.add_subcommand("landscape", "Normalized loss surface around a checkpoint");
  land_cmd->add_option("--checkpoint", la.checkpoint)->required();
  land_cmd->add_option("--dataset", la.dataset);
  land_cmd->add_option("--grid", la.grid);
  land_cmd->add_option("--half-width", la.half_width);
  land_cmd->add_option("--seed", la.seed);
  land_cmd->add_flag("--adversarial", la.adversarial, "Use PGD-20 examples against the checkpoint");
  land_cmd->add_option("--samples", la.samples);
  land_cmd->add_option("--out", la.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(config_path);
    if (*eval_cmd) return cmd_eval(ev);
    if (*land_cmd) return cmd_landscape(la, threads);
    const fs::path pout = out_dir.empty() ? output_root(".") : fs::path(out_dir);
    if (*p_t1) return probe_theorem1(T, alpha, trials, probe_seed, pout);
    if (*p_gap) return probe_gap(run_dir, beta_kind, alpha, last, samples, out_dir.empty() ? output_root(run_dir) : pout);
    if (*p_h) return probe_homogenization(run_dir, window, samples, out_dir.empty() ? output_root(run_dir) : pout);
    if (*p_lr) return probe_lr(config_path, config_b, schedule_b, out_dir.empty() ? fs::path() : pout);
  } catch (const ConfigError& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitUsage;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
