#include <gtest/gtest.h>

#include <cmath>

#include "fedade/analysis.hpp"

using namespace fedade;

namespace {

StreamTrace trace_with_signals(const std::vector<std::pair<double, double>>& sig) {
  StreamTrace tr;
  for (auto [u, r] : sig) {
    TraceStep st{ProbVector::uniform(2), ProbVector::uniform(2), {}, {}, 0.0, 0.0, 0.0};
    st.signals.s_unc = u;
    st.signals.s_rep = r;
    tr.steps.push_back(st);
  }
  return tr;
}

// Trace whose summaries are the true priors plus a fixed perturbation.
StreamTrace calibrated_trace(const std::vector<ProbVector>& priors, const Vec& offset) {
  auto shift = [&](const ProbVector& p) {
    Vec v(p.values());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += offset[i];
    return ProbVector(v);
  };
  StreamTrace tr;
  tr.initial_prior = priors[0];
  tr.initial_q = shift(priors[0]);
  ProbVector prev_q = tr.initial_q;
  for (std::size_t t = 1; t < priors.size(); ++t) {
    const auto q = shift(priors[t]);
    TraceStep st{priors[t], q, {}, {}, 0.0, 0.0, 0.0};
    st.signals.s_unc = s_unc(prev_q, q);
    tr.steps.push_back(st);
    prev_q = q;
  }
  return tr;
}

std::vector<ProbVector> linear_path(const ProbVector& a, const ProbVector& b, int steps) {
  std::vector<ProbVector> out;
  for (int t = 0; t <= steps; ++t) out.push_back(interpolate_prior(a, b, static_cast<double>(t) / steps));
  return out;
}

Setup small_setup(double mean_scale, double noise_std) {
  RunConfig cfg;
  cfg.scenario.mean_scale = mean_scale;
  cfg.scenario.noise_std = noise_std;
  cfg.pretrain.n_samples = 2000;
  cfg.pretrain.epochs = 10;
  return prepare(cfg);
}

}  // namespace

TEST(CumulativeSurrogates, Examples) {
  const auto z = cumulative_surrogates(trace_with_signals(std::vector<std::pair<double, double>>(5, {0.0, 0.0})));
  EXPECT_EQ(z.s_unc_sum, 0.0);
  EXPECT_EQ(z.s_combined, 0.0);
  const auto one = cumulative_surrogates(trace_with_signals(std::vector<std::pair<double, double>>(10, {1.0, 1.0})));
  EXPECT_EQ(one.s_unc_sum, 10.0);
  EXPECT_EQ(one.s_rep_sum, 10.0);
  EXPECT_EQ(one.s_combined, 10.0);
  const auto f = cumulative_surrogates(trace_with_signals({{0.1, 0.3}, {0.25, 0.05}, {0.0, 0.5}}));
  EXPECT_NEAR(f.s_unc_sum, 0.35, 1e-15);
  EXPECT_NEAR(f.s_rep_sum, 0.85, 1e-15);
  EXPECT_NEAR(f.s_combined, 0.6, 1e-15);
  EXPECT_THROW(cumulative_surrogates(StreamTrace{}), ArgumentError);
}

TEST(CumulativeSurrogates, PrefixMonotone) {
  Rng rng = make_rng(1, 40);
  std::vector<std::pair<double, double>> sig;
  double prev = 0.0;
  for (int t = 0; t < 200; ++t) {
    sig.emplace_back(uniform01(rng), uniform01(rng));
    const auto s = cumulative_surrogates(trace_with_signals(sig));
    EXPECT_GE(s.s_combined, prev);
    EXPECT_LE(s.s_combined, static_cast<double>(sig.size()));
    prev = s.s_combined;
  }
}

TEST(TrueL1Path, Examples) {
  const auto a = ProbVector::one_hot(2, 0), b = ProbVector::one_hot(2, 1);
  const std::vector<ProbVector> constant(4, a);
  EXPECT_EQ(true_l1_path(constant), 0.0);
  const std::vector<ProbVector> flips{a, b, a};
  EXPECT_EQ(true_l1_path(flips), 4.0);
  EXPECT_NEAR(true_l1_path(linear_path(a, b, 10)), 2.0, 1e-9);
  const std::vector<ProbVector> single{a};
  EXPECT_THROW(true_l1_path(single), ArgumentError);
}

TEST(TrueL1Path, LinearScheduleTelescopes) {
  Rng rng = make_rng(2, 40);
  for (int trial = 0; trial < 100; ++trial) {
    const auto ps = sample_dirichlet_priors(0.5, 2, 6, rng);
    EXPECT_NEAR(true_l1_path(linear_path(ps[0], ps[1], 1 + trial)), l1_distance(ps[0], ps[1]), 1e-9);
  }
}

TEST(SurrogateGap, PerfectlyCalibratedTrace) {
  const auto path = linear_path(ProbVector({0.7, 0.2, 0.1}), ProbVector({0.1, 0.3, 0.6}), 20);
  const auto r = surrogate_gap_report(calibrated_trace(path, Vec(3, 0.0)));
  EXPECT_NEAR(r.gap, 0.0, 1e-12);
  EXPECT_EQ(r.bound, 0.0);
  EXPECT_LE(r.surrogate_sum, r.true_l1_path + r.bound);
}

TEST(SurrogateGap, InjectedPerturbationWithinBound) {
  // Fixed-direction offset with norm 0.01.
  const double e = 0.01 / std::sqrt(2.0);
  const Vec offset{e, -e, 0.0};
  Rng rng = make_rng(3, 40);
  for (int trial = 0; trial < 50; ++trial) {
    auto ends = sample_dirichlet_priors(2.0, 2, 3, rng);
    Vec a(ends[0].values()), b(ends[1].values());
    for (auto* v : {&a, &b}) {
      for (auto& x : *v) x = 0.05 + 0.85 * x;
    }
    const auto path = linear_path(ProbVector::normalized(a), ProbVector::normalized(b), 25);
    const auto r = surrogate_gap_report(calibrated_trace(path, offset));
    for (double eps : r.eps) EXPECT_NEAR(eps, 0.01, 1e-12);
    EXPECT_LE(r.gap, 2.0 * (25 * 0.02));
    EXPECT_NEAR(r.bound, 2.0 * 25 * 0.02, 1e-12);
    EXPECT_LE(r.surrogate_sum, r.true_l1_path + r.bound);
    EXPECT_EQ(r.violations(), 0u);
    EXPECT_EQ(r.prefix_pass_rate(), 1.0);
  }
}

TEST(SurrogateGap, MissingOracleData) {
  EXPECT_THROW(surrogate_gap_report(trace_with_signals({{0.1, 0.1}})), ArgumentError);
}

TEST(DynamicRegret, Examples) {
  const std::vector<double> l{0.5, 0.7, 0.2};
  EXPECT_EQ(dynamic_regret(l, l), 0.0);
  const std::vector<double> a(100, 0.6), b(100, 0.5);
  EXPECT_NEAR(dynamic_regret(a, b), 10.0, 1e-9);
  const std::vector<double> x{1.0, 0.9, 0.75, 0.6}, y{0.5, 0.55, 0.7, 0.6 + 5e-7};
  EXPECT_NEAR(dynamic_regret(x, y), 0.5 + 0.35 + 0.05, 1e-12);  // last term clipped to 0
  const std::vector<double> shorter{1.0};
  EXPECT_THROW(dynamic_regret(x, shorter), ArgumentError);
  const std::vector<double> above{0.5, 0.5, 0.5, 0.7};
  EXPECT_THROW(dynamic_regret(x, above), ArgumentError);
}

TEST(PerStepOracle, SeparableTaskNearZero) {
  const auto setup = small_setup(2.0, 0.05);
  Rng rng = make_rng(4, 40);
  const auto o = per_step_oracle_loss(setup.task, ProbVector::uniform(5), setup.global_params, rng);
  EXPECT_LE(o.loss, 0.05);
}

TEST(PerStepOracle, UninformativeFeaturesGiveLogK) {
  const auto setup = small_setup(0.0, 1.0);
  Rng rng = make_rng(5, 40);
  const auto o = per_step_oracle_loss(setup.task, ProbVector::uniform(5), setup.global_params, rng);
  EXPECT_TRUE(o.converged);
  EXPECT_NEAR(o.loss, std::log(5.0), 0.05);
}

TEST(PerStepOracle, OptimumIndependentOfInitialization) {
  const auto setup = small_setup(0.5, 1.0);
  Rng rng = make_rng(6, 40);
  const auto batch = sample_batch(setup.task, ProbVector({0.4, 0.3, 0.1, 0.1, 0.1}), kOracleBatch, rng);
  const auto feats = frozen_features(setup.global_params, batch.features);
  const auto a = fit_head(feats, batch.labels, zero_head(5, setup.global_params.hidden_dim()));
  Head init = zero_head(5, setup.global_params.hidden_dim());
  for (auto& w : init.W.values()) w = 2.0 * std_normal(rng);
  for (auto& b : init.b) b = std_normal(rng);
  const auto b = fit_head(feats, batch.labels, init);
  EXPECT_TRUE(a.converged);
  EXPECT_TRUE(b.converged);
  EXPECT_NEAR(a.loss, b.loss, 1e-3);
}

TEST(RegretRate, ExactPowerLaw) {
  std::map<int, double> reg;
  for (int T : {100, 400, 1600}) reg[T] = 3.0 * std::pow(T, 2.0 / 3.0);
  const auto r = regret_rate_check(reg);
  EXPECT_NEAR(r.slope, 2.0 / 3.0, 1e-6);
  EXPECT_TRUE(r.per_step_decreasing);
  EXPECT_TRUE(r.pass);
}

TEST(RegretRate, LinearRegretRejected) {
  std::map<int, double> reg;
  for (int T : {100, 400, 1600}) reg[T] = 0.2 * T;
  const auto r = regret_rate_check(reg);
  EXPECT_NEAR(r.slope, 1.0, 1e-9);
  EXPECT_FALSE(r.pass);
  std::map<int, double> two{{100, 1.0}, {400, 2.0}};
  EXPECT_THROW(regret_rate_check(two), ArgumentError);
}

TEST(FrozenStream, ShortStreamIsWellFormed) {
  const auto setup = small_setup(0.5, 1.0);
  FrozenStreamConfig fc;
  fc.T = 10;
  const auto r = run_frozen_stream(setup, fc);
  ASSERT_EQ(r.trace.steps.size(), 10u);
  for (const auto& st : r.trace.steps) {
    EXPECT_LE(st.oracle_loss, st.loss);
    EXPECT_GE(st.signals.eta, fc.bounds.eta_min);
    EXPECT_LE(st.signals.eta, fc.bounds.eta_max);
  }
  EXPECT_GE(r.regret, 0.0);
  const auto again = run_frozen_stream(setup, fc);
  EXPECT_EQ(again.regret, r.regret);
}

TEST(TraceFromRun, RequiresOracleRecords) {
  RunConfig cfg;
  cfg.num_clients = 4;
  cfg.participant_rate = 1.0;
  cfg.T = cfg.scenario.T = 5;
  cfg.pretrain.n_samples = 1000;
  cfg.pretrain.epochs = 3;
  const auto setup = prepare(cfg);
  const auto clients = init_clients(cfg, setup.global_params, setup.task, setup.pretrain_prior);
  EXPECT_THROW(trace_from_run(run(cfg, setup), 0, setup.pretrain_prior, clients[0].prev_summary), ArgumentError);
  cfg.record_oracle = true;
  const auto tr = trace_from_run(run(cfg, setup), 1, setup.pretrain_prior, clients[1].prev_summary);
  ASSERT_EQ(tr.steps.size(), 5u);
  const auto rep = surrogate_gap_report(tr);
  EXPECT_EQ(rep.eps.size(), 6u);
  const auto j = analysis_report_json({cumulative_surrogates(tr)}, {rep}, std::nullopt);
  EXPECT_TRUE(j.contains("comparator"));
  EXPECT_EQ(j["gaps"].size(), 1u);
}
