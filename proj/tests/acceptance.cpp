// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fedade/analysis.hpp"
#include "fedade/experiment.hpp"
#include "test_support.hpp"

using namespace fedade;

namespace {

// Tolerances and budgets.
constexpr double kSimplexTol = 1e-9;
constexpr double kShiftTol = 1e-12;
constexpr double kGradRelTol = 1e-4;
constexpr int kCosinePairs = 100000;
constexpr int kGradInstances = 100;
constexpr double kBbseL1 = 0.1;
constexpr double kBbsePassRate = 0.9;
constexpr int kBbseTrials = 50;
constexpr int kMcBatches = 200;
constexpr double kZ99 = 2.5758293035489;
constexpr double kAdaptMaxGap = 0.01;
constexpr double kAdaptMinGain = 0.02;
constexpr double kStationaryMaxS = 0.1;
constexpr double kStationaryEtaFactor = 2.0;
constexpr double kSpikeRatio = 3.0;
constexpr double kMaxSlope = 0.9;
constexpr double kPrefixPassRate = 0.99;
constexpr double kConvergenceBand = 1.05;

// Rate bounds scaled for the synthetic MLP.
const RateBounds kScaledBounds{5e-3, 1e-1};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ProbVector random_simplex(std::size_t k, Rng& rng) {
  std::exponential_distribution<double> ex(1.0);
  Vec v(k);
  for (auto& x : v) x = ex(rng);
  return ProbVector::normalized(v);
}

// ---- 1 ---------------------------------------------------------------------

Outcome numeric_invariants() {
  Rng rng = make_rng(1, 9001);
  std::size_t bad_softmax = 0, bad_clamp = 0, bad_cos_l1 = 0, bad_proj = 0;
  std::uniform_real_distribution<double> big(-1e3, 1e3);
  for (int i = 0; i < 20000; ++i) {
    Vec x(1 + i % 9);
    for (auto& v : x) v = big(rng);
    const auto p = softmax(x);
    double s = 0.0;
    for (double v : p) {
      s += v;
      bad_softmax += v < 0.0;
    }
    bad_softmax += std::abs(s - 1.0) > kSimplexTol;
    const double c = big(rng);
    Vec y = x;
    for (auto& v : y) v += c;
    const auto q = softmax(y);
    for (std::size_t j = 0; j < x.size(); ++j) bad_softmax += std::abs(p[j] - q[j]) > kShiftTol;

    Vec a(x.size()), b(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      a[j] = std_normal(rng);
      b[j] = (i % 3 == 0 ? -7.0 : 3.0) * a[j];
    }
    const double cs = cosine(a, b);
    bad_clamp += cs < -1.0 || cs > 1.0;

    const auto pr = simplex_project(x);
    const auto pp = simplex_project(pr);
    for (std::size_t j = 0; j < x.size(); ++j) bad_proj += std::abs(pr[j] - pp[j]) > 1e-12;
  }
  for (int i = 0; i < kCosinePairs; ++i) {
    const std::size_t k = 2 + i % 9;
    const auto p = random_simplex(k, rng), q = random_simplex(k, rng);
    bad_cos_l1 += 1.0 - cosine(p, q) > l1_distance(p, q);
  }

  double worst = 0.0;
  for (int trial = 0; trial < kGradInstances; ++trial) {
    const std::size_t d = 1 + rng() % 5, h = 1 + rng() % 6, k = 2 + rng() % 4, n = k + rng() % 12;
    for (auto scope : {UpdateScope::Joint, UpdateScope::HeadOnly}) {
      SplitParams p;
      LabeledBatch a;
      bool kink = true;
      while (kink) {
        p = init_params(d, h, k, rng);
        for (auto& b : p.shared_b) b = 0.3 * std_normal(rng);
        Mat f(n, d);
        for (auto& v : f.values()) v = std_normal(rng);
        std::vector<std::size_t> labels(n);
        for (std::size_t s = 0; s < n; ++s) labels[s] = s < k ? s : rng() % k;
        a = LabeledBatch(std::move(f), std::move(labels));
        kink = false;
        for (std::size_t s = 0; s < n && !kink; ++s)
          for (double z : forward_full(p, a.features.row(s)).pre) kink = kink || std::abs(z) < 1e-3;
      }
      Vec wv(k);
      for (auto& v : wv) v = uniform01(rng) + 0.01;
      const auto w = ProbVector::normalized(wv);
      auto g = grad_weighted_risk(p, a, w, scope);
      auto fd = fedade::testing::finite_difference(p, [&](const SplitParams& q) { return weighted_risk(q, a, w); });
      if (scope == UpdateScope::HeadOnly)
        std::fill(fd.begin(), fd.begin() + static_cast<std::ptrdiff_t>(fedade::testing::shared_scalar_count(p)), 0.0);
      std::vector<double> flat;
      for (double* x : fedade::testing::scalars(g)) flat.push_back(*x);
      worst = std::max(worst, fedade::testing::max_relative_error(flat, fd));
    }
  }
  const bool pass = bad_softmax == 0 && bad_clamp == 0 && bad_cos_l1 == 0 && bad_proj == 0 && worst <= kGradRelTol;
  return {pass, fmt("softmax=%zu clamp=%zu cos>l1=%zu/%d projection=%zu grad_max_rel=%.2e", bad_softmax, bad_clamp,
                    bad_cos_l1, kCosinePairs, bad_proj, worst)};
}

// ---- 2 ---------------------------------------------------------------------

Outcome bbse_recovery() {
  std::size_t good = 0;
  double worst = 0.0;
  for (int trial = 0; trial < kBbseTrials; ++trial) {
    RunConfig cfg;  // 5 classes, d = 10, mean_scale 2, noise 1, 1e4 pretraining samples
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto setup = prepare(cfg);
    Rng rng = make_rng(cfg.seed, 9002);
    Vec v(sample_dirichlet_priors(1.0, 1, 5, rng).front().values());
    for (auto& x : v) x = 0.05 + 0.75 * x;  // min entry >= 0.05
    const ProbVector prior(v);
    const auto batch = sample_batch(setup.task, prior, 10000, rng);
    const auto est = bbse_estimate(setup.confusion,
                                   prediction_histogram(setup.global_params, UnlabeledBatch::from(batch)),
                                   cfg.bbse_ridge);
    const double l1 = l1_distance(est, prior);
    worst = std::max(worst, l1);
    good += l1 <= kBbseL1;
  }
  const double rate = static_cast<double>(good) / kBbseTrials;
  return {rate >= kBbsePassRate, fmt("%zu/%d trials with L1 <= %.2f (worst %.4f)", good, kBbseTrials, kBbseL1, worst)};
}

// ---- 3 ---------------------------------------------------------------------

Outcome unbiasedness() {
  // Models of decreasing quality: one per task separation.
  const double scales[3] = {2.0, 1.0, 0.5};
  const ProbVector priors[3] = {ProbVector({0.4, 0.3, 0.1, 0.1, 0.1}), ProbVector({0.05, 0.05, 0.1, 0.3, 0.5}),
                                ProbVector::uniform(5)};
  std::size_t inside = 0;
  double worst_z = 0.0;
  for (int m = 0; m < 3; ++m) {
    RunConfig cfg;
    cfg.scenario.mean_scale = scales[m];
    const auto setup = prepare(cfg);
    const auto& theta = setup.global_params;
    Rng rng = make_rng(static_cast<std::uint64_t>(scales[m] * 10), 500);
    const auto anchor = sample_anchor(setup.task, setup.pretrain_prior, 50000, true, rng);

    // Class risks on the anchor and their sampling variance.
    Vec mean(5, 0.0), sq(5, 0.0), cnt(5, 0.0);
    for (std::size_t s = 0; s < anchor.size(); ++s) {
      const auto y = anchor.labels[s];
      const double ce = cross_entropy(forward(theta, anchor.features.row(s)).probs, y);
      mean[y] += ce;
      sq[y] += ce * ce;
      cnt[y] += 1.0;
    }
    Vec var(5);
    for (int i = 0; i < 5; ++i) {
      mean[i] /= cnt[i];
      var[i] = sq[i] / cnt[i] - mean[i] * mean[i];
    }

    for (const auto& prior : priors) {
      const auto oracle = sample_batch(setup.task, prior, 100000, rng);
      double truth = 0.0, truth_sq = 0.0;
      for (std::size_t s = 0; s < oracle.size(); ++s) {
        const double ce = cross_entropy(forward(theta, oracle.features.row(s)).probs, oracle.labels[s]);
        truth += ce;
        truth_sq += ce * ce;
      }
      const double n_or = static_cast<double>(oracle.size());
      truth /= n_or;
      const double var_oracle = truth_sq / n_or - truth * truth;

      double est = 0.0, est_sq = 0.0;
      Vec wbar(5, 0.0);
      for (int b = 0; b < kMcBatches; ++b) {
        const auto batch = sample_batch(setup.task, prior, 1000, rng);
        const auto w = bbse_estimate(setup.confusion, prediction_histogram(theta, UnlabeledBatch::from(batch)),
                                     cfg.bbse_ridge);
        const double e = dot(w.values(), mean);
        est += e;
        est_sq += e * e;
        for (int i = 0; i < 5; ++i) wbar[i] += w[i] / kMcBatches;
      }
      est /= kMcBatches;
      const double var_est = (est_sq / kMcBatches - est * est) * kMcBatches / (kMcBatches - 1);
      double var_anchor = 0.0;
      for (int i = 0; i < 5; ++i) var_anchor += wbar[i] * wbar[i] * var[i] / cnt[i];
      const double se = std::sqrt(var_est / kMcBatches + var_oracle / n_or + var_anchor);
      const double z = std::abs(est - truth) / se;
      worst_z = std::max(worst_z, z);
      inside += z <= kZ99;
    }
  }
  return {inside == 9, fmt("%zu/9 (model, prior) cells inside the 99%% CI (max |z| = %.2f)", inside, worst_z)};
}

// ---- 4 ---------------------------------------------------------------------

RunConfig adaptivity_base() {
  RunConfig cfg;  // 100 clients, T = 100, rate 0.1, 4 local epochs, batch 32
  cfg.comm_interval = 1;
  cfg.bounds = kScaledBounds;
  cfg.scenario.mean_scale = 0.5;
  return cfg;
}

double mean_accuracy(const RunResult& r) {
  double a = 0.0;
  for (const auto& round : r.rounds) a += round.mean_accuracy;
  return a / static_cast<double>(r.rounds.size());
}

Outcome adaptivity() {
  const auto modes = default_modes(kScaledBounds);
  std::vector<double> acc(modes.size(), 0.0);
  double adaptive_eta = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = adaptivity_base();
    cfg.seed = seed;
    const auto setup = prepare(cfg);
    for (std::size_t m = 0; m < modes.size(); ++m) {
      cfg.rate_mode = modes[m];
      const auto r = run(cfg, setup);
      acc[m] += mean_accuracy(r) / 5.0;
      if (m == 0)
        for (const auto& round : r.rounds) adaptive_eta += round.mean_eta / (5.0 * static_cast<double>(r.rounds.size()));
    }
  }
  const double best = *std::max_element(acc.begin() + 1, acc.end());
  const double worst = *std::min_element(acc.begin() + 1, acc.end());
  const bool pass = acc[0] >= best - kAdaptMaxGap && acc[0] >= worst + kAdaptMinGain;
  return {pass, fmt("adaptive %.4f (mean eta %.4f) | low %.4f mid %.4f high %.4f (need >= %.4f and >= %.4f)", acc[0],
                    adaptive_eta, acc[1], acc[2], acc[3], best - kAdaptMaxGap, worst + kAdaptMinGain)};
}

// ---- 5 ---------------------------------------------------------------------

RunConfig signal_base(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.num_clients = 20;
  cfg.participant_rate = 1.0;
  cfg.batch_size = 128;
  cfg.bounds = kScaledBounds;
  return cfg;
}

double mean_signal(const RoundRecord& r) {
  double s = 0.0;
  for (const auto& c : r.clients) s += c.signals.s;
  return s / static_cast<double>(r.clients.size());
}

Outcome signal_sanity() {
  double stat_s = 0.0, stat_eta = 0.0;
  int stat_n = 0;
  double near = 0.0, between = 0.0;
  int near_n = 0, between_n = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = signal_base(seed);
    cfg.scenario.stationary = true;
    for (const auto& round : run(cfg).rounds)
      if (round.t >= 5) {
        stat_s += mean_signal(round);
        stat_eta += round.mean_eta;
        ++stat_n;
      }

    cfg = signal_base(seed);
    cfg.scenario.schedule = ScheduleKind::Square;
    const int block = ShiftSchedule(ScheduleKind::Square, cfg.scenario.T).square_block();
    for (const auto& round : run(cfg).rounds) {
      // Flips happen at multiples of the block length; a window covers the flip step and the next.
      if (round.t < block) continue;
      if (round.t % block < 2) {
        near += mean_signal(round);
        ++near_n;
      } else {
        between += mean_signal(round);
        ++between_n;
      }
    }
  }
  stat_s /= stat_n;
  stat_eta /= stat_n;
  near /= near_n;
  between /= between_n;
  const bool pass = stat_s <= kStationaryMaxS && stat_eta <= kStationaryEtaFactor * kScaledBounds.eta_min &&
                    near >= kSpikeRatio * between;
  return {pass, fmt("stationary S %.4f, eta/eta_min %.3f; square near-flip S %.4f vs between %.4f (ratio %.2f)", stat_s,
                    stat_eta / kScaledBounds.eta_min, near, between, near / between)};
}

// ---- 6 ---------------------------------------------------------------------

Outcome regret_shape() {
  RunConfig cfg;
  cfg.scenario.mean_scale = 0.5;
  const auto setup = prepare(cfg);
  std::map<int, double> reg;
  std::size_t unconverged = 0;
  for (int T : {100, 400, 1600}) {
    FrozenStreamConfig fc;
    fc.T = T;
    fc.bounds = kScaledBounds;
    const auto r = run_frozen_stream(setup, fc);
    reg[T] = r.regret;
    unconverged += r.unconverged_oracles;
  }
  const auto rep = regret_rate_check(reg, kMaxSlope);
  return {rep.pass, fmt("Reg/T = %.4f, %.4f, %.4f; slope %.3f (max %.1f); unconverged oracles %zu",
                        rep.regret_per_step[0], rep.regret_per_step[1], rep.regret_per_step[2], rep.slope, kMaxSlope,
                        unconverged)};
}

// ---- 7 ---------------------------------------------------------------------

Outcome surrogate_bound() {
  std::size_t steps = 0, hold = 0, step_violations = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.num_clients = 10;
    cfg.participant_rate = 1.0;
    cfg.batch_size = 128;
    cfg.bounds = kScaledBounds;
    cfg.record_oracle = true;
    const auto setup = prepare(cfg);
    const auto result = run(cfg, setup);
    const auto clients = init_clients(cfg, setup.global_params, setup.task, setup.pretrain_prior);
    for (std::size_t c = 0; c < cfg.num_clients; ++c) {
      const auto rep = surrogate_gap_report(trace_from_run(result, c, setup.pretrain_prior, clients[c].prev_summary));
      for (bool h : rep.prefix_holds) {
        ++steps;
        hold += h;
      }
      step_violations += rep.violations();
    }
  }
  const double rate = static_cast<double>(hold) / static_cast<double>(steps);
  return {rate >= kPrefixPassRate,
          fmt("bound holds at %zu/%zu steps (%.4f); per-step gap violations %zu", hold, steps, rate, step_violations)};
}

// ---- 8 ---------------------------------------------------------------------

Outcome convergence() {
  auto cfg = adaptivity_base();
  cfg.scenario.stationary = true;
  cfg.rate_mode = RateMode::fixed(2.0 * kScaledBounds.eta_min, "fixlr_mid");
  const auto r = run(cfg);
  const double first = r.rounds.front().mean_loss, last = r.rounds.back().mean_loss;
  double running_min = INFINITY;
  std::size_t violations = 0;
  for (const auto& round : r.rounds) {
    if (round.t > 10 && round.mean_loss > kConvergenceBand * running_min) ++violations;
    running_min = std::min(running_min, round.mean_loss);
  }
  return {last <= first && violations == 0,
          fmt("loss t=1 %.5f, t=T %.5f; steps above %.2fx running min after t=10: %zu", first, last,
              kConvergenceBand, violations)};
}

// ---- 9 ---------------------------------------------------------------------

Outcome determinism() {
  namespace fs = std::filesystem;
  auto cfg = validate_config(R"({"T": 30, "seeds": [0, 1], "eta_min": 0.005, "eta_max": 0.1,
                                 "scenario": {"mean_scale": 0.5}})");
  auto run_into = [&](const std::string& name, std::size_t workers) {
    cfg.output_dir = (fs::temp_directory_path() / ("fedade_acceptance_" + name)).string();
    fs::remove_all(cfg.output_dir);
    return run_experiment(cfg, workers);
  };
  const auto a = run_into("w1a", 1), b = run_into("w1b", 1), c = run_into("w4", 4);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  std::size_t csvs = 0, identical = 0;
  for (std::size_t i = 0; i < a.files.size(); ++i) {
    if (a.files[i].extension() != ".csv") continue;
    ++csvs;
    const auto x = slurp(a.files[i]);
    identical += x == slurp(b.files[i]) && x == slurp(c.files[i]);
  }
  // Client-level parallelism inside one run.
  RunConfig rc = cfg.run;
  rc.rate_mode = cfg.modes.front();
  std::ostringstream s1, s4;
  write_metrics_csv(s1, run(rc), "adaptive", rc.seed);
  rc.workers = 4;
  write_metrics_csv(s4, run(rc), "adaptive", rc.seed);
  const bool inner = s1.str() == s4.str();
  return {csvs > 0 && identical == csvs && inner,
          fmt("%zu/%zu CSVs byte-identical across runs and job workers {1,4}; client workers {1,4}: %s", identical, csvs,
              inner ? "identical" : "DIFFERENT")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "numeric invariants", 60, numeric_invariants},
      {2, "BBSE recovery", 120, bbse_recovery},
      {3, "risk estimator unbiasedness", 120, unbiasedness},
      {4, "adaptive vs fixed rates", 600, adaptivity},
      {5, "signal sanity", 300, signal_sanity},
      {6, "regret rate shape", 600, regret_shape},
      {7, "surrogate bound direction", 180, surrogate_bound},
      {8, "convergence sanity", 300, convergence},
      {9, "determinism", 300, determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = secs <= c.budget_s;
    const bool ok = o.pass && in_time;
    failed += !ok;
    std::printf("%s criterion %d (%s): %s [%.1fs / %.0fs budget]\n", ok ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
