// Acceptance runner: one PASS/FAIL line per criterion A1..A9, exit 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "seat/autodiff.hpp"
#include "seat/landscape.hpp"
#include "seat/run_config.hpp"
#include "seat/theory_probe.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace seat;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::string join(const std::vector<double>& v, const char* f = "%.4f") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(f, v[i]);
  return s;
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

unsigned worker_threads() { return std::max(1u, std::min(8u, std::thread::hardware_concurrency())); }

const fs::path kConfigDir = fs::path(SEAT_SOURCE_DIR) / "configs";
constexpr int kSeeds = 3;

// ---- A1 ----------------------------------------------------------------------------

Verdict a1_ema_identity() {
  Rng rng(20240101);
  double worst = 0.0, worst_sum = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t T = 1 + rng.below(32);
    const double alpha = rng.uniform(0.01, 0.99);
    const ParamLayout l = make_layout({{"w", {6}}});
    std::vector<ParamVector> th;
    for (std::size_t t = 0; t < T; ++t) {
      ParamVector p(l);
      for (double& v : p.data()) v = rng.normal();
      th.push_back(std::move(p));
    }
    EnsembleState s(EnsembleConfig{alpha, 0.0}, th[0]);
    for (std::size_t t = 1; t < T; ++t) s.update(th[t]);
    const ParamVector closed = ema_closed_form(th, alpha);
    for (std::size_t i = 0; i < closed.size(); ++i) worst = std::max(worst, std::abs(closed[i] - s.theta_tilde()[i]));
    const auto beta = ema_coefficients(T, alpha);
    worst_sum = std::max(worst_sum, std::abs(std::accumulate(beta.begin(), beta.end(), 0.0) - 1.0));
  }
  return {worst <= 1e-10 && worst_sum <= 1e-12,
          fmt("1000 draws: max |iterated - closed| = %.2e (<= 1e-10), max |sum beta - 1| = %.2e (<= 1e-12)", worst,
              worst_sum)};
}

// ---- A2 ----------------------------------------------------------------------------

double quadratic_oracle_error() {
  const ParamLayout l = make_layout({{"w", {10}}});
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 2 + rng.below(10);
    const auto beta = ema_coefficients(T, rng.uniform(0.5, 0.99));
    std::vector<ParamVector> dirs;
    ParamVector acc(l);
    for (std::size_t t = 0; t + 1 < T; ++t) {
      ParamVector d(l);
      for (double& v : d.data()) v = rng.normal();
      acc.blend(1.0, d, beta[t]);
      dirs.push_back(std::move(d));
    }
    ParamVector last(l);
    last.blend(0.0, acc, -1.0 / beta.back());
    dirs.push_back(std::move(last));
    ParamVector center(l);
    for (double& v : center.data()) v = rng.normal();
    auto sq = [](const ParamVector& p) {
      double s = 0.0;
      for (double v : p.data()) s += v * v;
      return s;
    };
    double unit = 0.0;
    for (std::size_t t = 0; t < T; ++t) unit += beta[t] * sq(dirs[t]);
    const auto r = gap_probe([&](const ParamVector& p) { return std::vector<double>{sq(p)}; }, center, dirs, beta,
                             default_gap_scales());
    for (std::size_t i = 0; i < r.scales.size(); ++i)
      worst = std::max(worst, std::abs(r.gaps[i] - r.scales[i] * r.scales[i] * unit));
  }
  return worst;
}

Verdict a2_order_of_smallness() {
  const double oracle = quadratic_oracle_error();
  if (!(oracle <= 1e-10)) return {false, fmt("quadratic oracle gap error %.2e > 1e-10", oracle)};
  std::vector<double> s_ema, s_uni;
  bool ok = true;
  for (int seed = 0; seed < kSeeds; ++seed) {
    RunConfig rc = load_run_config(kConfigDir / "two_moons.json");
    rc.train.seed = static_cast<std::uint64_t>(seed);
    const auto [tr, te] = load_datasets(rc);
    progress(fmt("A2 two-moons seed %d", seed));
    const TrainResult res = train(rc.train, tr, &te);
    const std::vector<ParamVector> members(res.epoch_params.end() - 8, res.epoch_params.end());
    const auto beta = ema_coefficients(members.size(), 0.9);
    const ParamVector center = weighted_sum(members, beta);
    const auto dirs = deviations(members, center);
    const auto uni = uniform_betas(members.size());
    const Dataset probe = te.strided(128);
    Classifier model(rc.train.model);
    s_ema.push_back(gap_probe(model, center, dirs, beta, default_gap_scales(), probe).fitted_slope);
    s_uni.push_back(gap_probe(model, center, dirs, uni, default_gap_scales(), probe).fitted_slope);
    const double resid = weighted_residual(members, uni, center);
    ok = ok && s_ema.back() >= 1.8 && s_ema.back() <= 2.2 && s_uni.back() >= 0.8 && s_uni.back() <= 1.2 && resid > 0.0;
  }
  return {ok, fmt("quadratic oracle err %.1e; slopes EMA %s in [1.8,2.2], uniform %s in [0.8,1.2]", oracle,
                  join(s_ema).c_str(), join(s_uni).c_str())};
}

// ---- A3..A6 (shared MNIST-1k runs) -------------------------------------------------------

struct MnistRuns {
  std::vector<TrainResult> linear, staircase;
  std::vector<double> ind_rob, seat_rob, ind_nat, seat_nat, stair_seat_rob;
  Dataset eval;
  ModelSpec spec;
  double seconds = 0.0;
};

MnistRuns run_mnist() {
  const auto t0 = std::chrono::steady_clock::now();
  MnistRuns m;
  const RunConfig lin = load_run_config(kConfigDir / "mnist1k_linear.json");
  const RunConfig stair = load_run_config(kConfigDir / "mnist1k_staircase.json");
  const auto [tr, te] = load_datasets(lin);
  m.eval = te;
  m.spec = lin.train.model;
  Classifier model(m.spec);
  const AttackSpec pgd20 = attack_preset("paper-pgd20").with_budget(lin.train.attack.epsilon, lin.train.attack.kappa);
  for (int seed = 0; seed < kSeeds; ++seed) {
    TrainConfig a = lin.train, b = stair.train;
    a.seed = b.seed = static_cast<std::uint64_t>(seed);
    progress(fmt("A3/A4 MNIST-1k seed %d (linear + staircase)", seed));
    LrProbeReport rep = lr_dependence_probe(a, b, tr, te, pgd20, "paper-linear", "paper-staircase", a.seed);
    m.ind_rob.push_back(rep.a.individual_acc);
    m.seat_rob.push_back(rep.a.seat_acc);
    m.stair_seat_rob.push_back(rep.b.seat_acc);
    m.ind_nat.push_back(robust_accuracy(model, rep.a.result.final_params, te, natural_attack()));
    m.seat_nat.push_back(robust_accuracy(model, rep.a.result.seat_params, te, natural_attack()));
    m.linear.push_back(std::move(rep.a.result));
    m.staircase.push_back(std::move(rep.b.result));
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

Verdict a3_seat_helps(const MnistRuns& m) {
  std::vector<double> gain, nat_gap;
  for (int s = 0; s < kSeeds; ++s) {
    gain.push_back(m.seat_rob[s] - m.ind_rob[s]);
    nat_gap.push_back(std::abs(m.seat_nat[s] - m.ind_nat[s]));
  }
  const bool pass = mean(gain) >= 0.01 && mean(nat_gap) <= 0.02;
  return {pass, fmt("PGD-20 SEAT %s vs individual %s: mean gain %+.4f (need >= +0.0100); nat gap %.4f (<= 0.02)",
                    join(m.seat_rob).c_str(), join(m.ind_rob).c_str(), mean(gain), mean(nat_gap))};
}

Verdict a4_schedule(const MnistRuns& m) {
  std::vector<double> diff;
  for (int s = 0; s < kSeeds; ++s) diff.push_back(m.seat_rob[s] - m.stair_seat_rob[s]);
  return {mean(diff) >= 0.01, fmt("SEAT PGD-20 linear %s vs staircase %s: mean diff %+.4f (need >= +0.0100)",
                                  join(m.seat_rob).c_str(), join(m.stair_seat_rob).c_str(), mean(diff))};
}

Verdict a5_homogenization(const MnistRuns& m) {
  Classifier model(m.spec);
  std::vector<double> rho;
  for (const auto& run : m.linear) {
    const auto series = homogenization_series(model, run.epoch_params, 5, m.eval);
    const int epochs = static_cast<int>(run.epoch_params.size()) - 1;
    std::vector<double> e, d;
    for (const auto& r : series)
      if (3 * r.epoch > epochs) {
        e.push_back(r.epoch);
        d.push_back(r.delta);
      }
    rho.push_back(spearman(e, d));
  }
  return {mean(rho) < -0.3, fmt("Spearman(Delta_e, epoch) over final two-thirds %s: mean %.4f (need < -0.3)",
                                join(rho).c_str(), mean(rho))};
}

Verdict a6_landscape(const MnistRuns& m) {
  Classifier model(m.spec);
  const Dataset eval = m.eval.strided(256);
  std::vector<double> r_lin, r_st, g_lin, g_st;
  for (int s = 0; s < kSeeds; ++s) {
    progress(fmt("A6 landscapes seed %d", s));
    for (const auto* run : {&m.linear[s], &m.staircase[s]}) {
      const auto d = sample_directions(run->seat_params, static_cast<std::uint64_t>(s));
      const auto g = surface(model, run->seat_params, d.v1, d.v2, 21, 1.0, eval, static_cast<std::uint64_t>(s),
                             worker_threads());
      const Sharpness sh = sharpness_summary(g);
      (run == &m.linear[s] ? r_lin : r_st).push_back(sh.range);
      (run == &m.linear[s] ? g_lin : g_st).push_back(sh.mean_grad_mag);
    }
  }
  const bool pass = mean(r_lin) < mean(r_st) && mean(g_lin) < mean(g_st);
  return {pass, fmt("range linear %.4f vs staircase %.4f; mean |grad| linear %.4f vs staircase %.4f (linear must be "
                    "strictly smaller)",
                    mean(r_lin), mean(r_st), mean(g_lin), mean(g_st))};
}

// ---- A7 ------------------------------------------------------------------------------------

Verdict a7_soundness() {
  std::size_t checked = 0, violations = 0, idem_fail = 0;
  Rng rng(77);
  for (int t = 0; t < 1000; ++t) {
    Tensor x({4, 7}), xa({4, 7});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform();
      xa[i] = x[i] + rng.uniform(-1.0, 1.0);
    }
    const double eps = rng.uniform(0.0, 0.5);
    const Tensor p = project(xa, x, eps);
    if (!(project(p, x, eps) == p)) ++idem_fail;
  }
  struct Case {
    ModelSpec spec;
    Shape sample;
  };
  const std::vector<Case> cases{{ModelSpec::mlp({2, 16, 2}), {2}},
                                {ModelSpec::mlp({784, 32, 10}), {784}},
                                {ModelSpec::cnn({1, 28, 28}, {4, 8}, 10), {1, 28, 28}}};
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Classifier model(cases[c].spec);
    const ParamVector params = init_params(cases[c].spec, c);
    Shape shape{16};
    shape.insert(shape.end(), cases[c].sample.begin(), cases[c].sample.end());
    Tensor x(shape);
    // include exact 0 and 1 pixels so the box clamp is exercised
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = i % 5 == 0 ? 0.0 : (i % 5 == 1 ? 1.0 : rng.uniform());
    std::vector<int> y(16);
    for (auto& v : y) v = static_cast<int>(rng.below(cases[c].spec.num_classes));
    for (const auto& name : attack_preset_names())
      for (double eps : {0.0, 0.03, 0.1, 0.3}) {
        const AttackSpec s = attack_preset(name).with_budget(eps, eps / 4.0);
        const Tensor xa = run_attack(model, params, x, y, s, AttackSeeding{c, 1});
        for (std::size_t i = 0; i < x.size(); ++i) {
          ++checked;
          if (!(std::abs(xa[i] - x[i]) <= s.epsilon + 1e-12 && xa[i] >= 0.0 && xa[i] <= 1.0)) ++violations;
        }
      }
  }
  return {violations == 0 && idem_fail == 0,
          fmt("%zu attacked coordinates, %zu outside the eps-ball or [0,1]; projection idempotence failures %zu/1000",
              checked, violations, idem_fail)};
}

// ---- A8 ------------------------------------------------------------------------------------

Tensor signed_away_from_zero(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = rng.uniform(0.05, 1.5);
    t[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return t;
}

Verdict a8_gradients() {
  struct Prim {
    const char* name;
    std::function<NodeId(Graph&, NodeId, NodeId)> build;
    Shape a, b;
    bool positive = false;
    std::function<bool(const Tensor&)> valid = nullptr;
  };
  const std::vector<Prim> prims{
      {"matmul", [](Graph& g, NodeId a, NodeId b) { return g.matmul(a, b); }, {3, 4}, {4, 2}},
      {"add", [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, {3, 4}, {4}},
      {"sub", [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, {3, 4}, {3, 4}},
      {"mul", [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, {3, 4}, {3, 4}},
      {"affine", [](Graph& g, NodeId a, NodeId) { return g.affine(a, -2.5, 0.3); }, {3, 4}, {1}},
      {"relu", [](Graph& g, NodeId a, NodeId) { return g.relu(a); }, {3, 4}, {1}},
      {"softmax", [](Graph& g, NodeId a, NodeId) { return g.softmax(a); }, {3, 4}, {1}},
      {"log_softmax", [](Graph& g, NodeId a, NodeId) { return g.log_softmax(a); }, {3, 4}, {1}},
      {"log", [](Graph& g, NodeId a, NodeId) { return g.log(a); }, {3, 4}, {1}, true},
      {"clamp", [](Graph& g, NodeId a, NodeId) { return g.clamp(a, -0.5, 0.6); }, {3, 4}, {1}, false,
       [](const Tensor& t) { return seat::testing::clear_of(t, {-0.5, 0.6}); }},
      {"sum_rows", [](Graph& g, NodeId a, NodeId) { return g.sum_rows(a); }, {3, 4}, {1}},
      {"mean", [](Graph& g, NodeId a, NodeId) { return g.mean(a); }, {3, 4}, {1}},
      {"row_max", [](Graph& g, NodeId a, NodeId) { return g.row_max(a); }, {3, 4}, {1}, false,
       [](const Tensor& t) { return seat::testing::rows_distinct(t); }},
      {"flatten", [](Graph& g, NodeId a, NodeId) { return g.flatten(a); }, {2, 2, 3}, {1}},
      {"conv2d_same", [](Graph& g, NodeId a, NodeId b) { return g.conv2d(a, b, Padding::same); }, {1, 2, 4, 4},
       {3, 2, 3, 3}},
      {"conv2d_valid", [](Graph& g, NodeId a, NodeId b) { return g.conv2d(a, b, Padding::valid); }, {2, 2, 5, 5},
       {3, 2, 3, 3}}};
  double worst_prim = 0.0;
  std::string worst_name = "-";
  for (const auto& p : prims)
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
      Rng rng(derive_seed({0xA8, trial}));
      Tensor ta = signed_away_from_zero(p.a, rng);
      while (p.valid && !p.valid(ta)) ta = signed_away_from_zero(p.a, rng);
      if (p.positive)
        for (std::size_t i = 0; i < ta.size(); ++i) ta[i] = rng.uniform(0.2, 2.0);
      const Tensor tb = signed_away_from_zero(p.b, rng);
      Graph probe;
      probe.mark_output("y", p.build(probe, probe.input("a"), probe.input("b")));
      const Shape out = probe.forward({{"a", ta}, {"b", tb}}).at("y").shape();
      Tensor tc(out);
      for (std::size_t i = 0; i < tc.size(); ++i) tc[i] = rng.normal();
      Graph g;
      const NodeId a = g.input("a", true), b = g.input("b", true);
      g.mark_output("f", g.sum(g.mul(p.build(g, a, b), g.input("c"))));
      const double e = grad_check(g, {{"a", ta}, {"b", tb}, {"c", tc}}, "f");
      if (e > worst_prim) {
        worst_prim = e;
        worst_name = p.name;
      }
    }

  double worst_loss = 0.0;
  const ModelSpec spec = ModelSpec::mlp({5, 7, 4});
  Classifier model(spec);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    Rng rng(derive_seed({0xA81, trial}));
    const ParamVector p = init_params(spec, trial);
    // keep relu pre-activations and the MART max term clear of kinks by more than the stencil reach
    Tensor x, xa;
    std::vector<int> y(6);
    do {
      x = seat::testing::random_tensor({6, 5}, rng);
      xa = seat::testing::random_tensor({6, 5}, rng);
      for (auto& v : y) v = static_cast<int>(rng.below(4));
    } while (std::min(seat::testing::min_abs_preactivation(p, x), seat::testing::min_abs_preactivation(p, xa)) < 0.05 ||
             seat::testing::min_wrong_class_gap(model.logits(p, xa), y) < 0.01);
    for (TrainLoss kind : {TrainLoss::ce, TrainLoss::trades, TrainLoss::mart}) {
      ParamVector grad;
      model.loss(p, kind, 6.0, x, xa, y, &grad);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double fd = fd_derivative([&](double off) {
          ParamVector q = p;
          q[i] += off;
          return model.loss(q, kind, 6.0, x, xa, y);
        });
        worst_loss = std::max(worst_loss, relative_error(grad[i], fd));
      }
    }
  }
  return {worst_prim <= 1e-6 && worst_loss <= 1e-6,
          fmt("max relative error: primitives %.2e (worst %s), CE/TRADES/MART %.2e (<= 1e-6)", worst_prim,
              worst_name.c_str(), worst_loss)};
}

// ---- A9 ------------------------------------------------------------------------------------

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SEAT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict a9_determinism() {
  const fs::path root = fs::temp_directory_path() / "seat_acceptance_a9";
  fs::remove_all(root);
  std::vector<std::string> failures;
  std::size_t compared = 0;
  for (const char* rep : {"r1", "r2"}) {
    const fs::path dir = root / rep;
    fs::create_directories(dir);
    std::string text = slurp(kConfigDir / "two_moons.json");
    nlohmann::json j = nlohmann::json::parse(text);
    j["output_dir"] = (dir / "run").string();
    j["epochs"] = 10;
    std::ofstream(dir / "cfg.json") << j.dump(2);
    const fs::path run = dir / "run", out = dir / "out";
    const std::vector<std::string> cmds{
        "train --config " + (dir / "cfg.json").string(),
        "eval --checkpoint " + (run / "seat.ckpt").string() + " --attacks nat,paper-pgd20,mim,cw --out " +
            (out / "eval.csv").string(),
        "probe --out " + out.string() + " theorem1 --T 16 --alpha 0.9 --trials 10",
        "probe --out " + out.string() + " gap --run " + run.string() + " --beta ema --last 6",
        "probe --out " + out.string() + " gap --run " + run.string() + " --beta uniform --last 6",
        "probe --out " + out.string() + " homogenization --run " + run.string() + " --m 3",
        "--threads 3 landscape --checkpoint " + (run / "seat.ckpt").string() + " --grid 11 --samples 64 --out " +
            (out / "landscape.csv").string(),
        "landscape --checkpoint " + (run / "final.ckpt").string() + " --grid 7 --adversarial --samples 32 --out " +
            (out / "landscape_adv.csv").string()};
    for (std::size_t i = 0; i < cmds.size(); ++i)
      if (cli(cmds[i], dir / ("log" + std::to_string(i))) != 0) failures.push_back(std::string(rep) + ": " + cmds[i]);
  }
  for (const auto& e : fs::recursive_directory_iterator(root / "r1")) {
    const std::string ext = e.path().extension().string();
    if (ext != ".csv" && e.path().string().find(".meta.json") == std::string::npos) continue;
    const fs::path twin = root / "r2" / fs::relative(e.path(), root / "r1");
    ++compared;
    std::string a = slurp(e.path()), b = slurp(twin);
    if (a != b) failures.push_back(fs::relative(e.path(), root / "r1").string());
  }
  const bool pass = failures.empty() && compared >= 16;
  std::string detail = fmt("%zu CSV/sidecar files compared across two full reruns", compared);
  if (!failures.empty()) detail += "; differing or failed: " + failures.front();
  return {pass, detail};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](const char* id, const char* title, const std::function<Verdict()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& ex) {
      v = {false, std::string("error: ") + ex.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s %s: %s [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", title, v.detail.c_str(), s);
    std::fflush(stdout);
    failed += !v.pass;
  };

  report("A1", "EMA identity", a1_ema_identity);
  report("A2", "order of smallness", a2_order_of_smallness);

  MnistRuns runs;
  bool runs_ok = true;
  std::string runs_error;
  try {
    runs = run_mnist();
  } catch (const std::exception& ex) {
    runs_ok = false;
    runs_error = ex.what();
  }
  auto need_runs = [&](const std::function<Verdict()>& fn) {
    return [&, fn]() -> Verdict {
      if (!runs_ok) return {false, "MNIST-1k runs failed: " + runs_error};
      return fn();
    };
  };
  std::fprintf(stderr, "  .. MNIST-1k runs took %.1f s\n", runs.seconds);
  report("A3", "SEAT helps", need_runs([&] { return a3_seat_helps(runs); }));
  report("A4", "schedule deterioration", need_runs([&] { return a4_schedule(runs); }));
  report("A5", "homogenization trend", need_runs([&] { return a5_homogenization(runs); }));
  report("A6", "landscape smoothing", need_runs([&] { return a6_landscape(runs); }));
  report("A7", "attack soundness", a7_soundness);
  report("A8", "gradient correctness", a8_gradients);
  report("A9", "determinism", a9_determinism);

  std::printf("acceptance: %d of 9 criteria failed\n", failed);
  return failed ? 1 : 0;
}
