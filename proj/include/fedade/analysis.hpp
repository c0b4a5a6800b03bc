#pragma once
// Diagnostics for the drift signals and the adaptation loop: cumulative
// surrogates against oracle path lengths, the cosine-Lipschitz surrogate
// bound, dynamic regret against a per-step optimal head, and log-log rate
// fits of regret growth.
//
// The regret comparator optimizes the head only, with features frozen at the
// pretrained extractor. It is a strict subset of the unconstrained per-step
// minimum, so reported regret is relative to that restricted class.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/errors.hpp"
#include "fedade/estimation.hpp"
#include "fedade/federation.hpp"
#include "fedade/model.hpp"
#include "fedade/numerics.hpp"
#include "fedade/shift.hpp"

namespace fedade {

inline constexpr double kCosineLipschitz = 2.0;
inline constexpr const char* kComparatorNote =
    "regret comparator: per-step optimal head on frozen pretrained features (restricted class)";

struct TraceStep {
  ProbVector true_prior;  // oracle
  ProbVector q;
  Vec z;
  Signals signals;
  double loss = 0.0;
  double oracle_loss = 0.0;
  double accuracy = 0.0;
};

/// Per-timestep history of one client. `initial_*` hold the t = 0 state the
/// first signals are measured against.
struct StreamTrace {
  ProbVector initial_prior;
  ProbVector initial_q;
  Vec initial_z;
  std::vector<TraceStep> steps;
};

struct SurrogateSums {
  double s_unc_sum = 0.0;
  double s_rep_sum = 0.0;
  double s_combined = 0.0;
};

inline SurrogateSums cumulative_surrogates(const StreamTrace& trace) {
  if (trace.steps.empty()) throw ArgumentError("cumulative_surrogates: empty trace");
  SurrogateSums s;
  for (const auto& st : trace.steps) {
    s.s_unc_sum += st.signals.s_unc;
    s.s_rep_sum += st.signals.s_rep;
  }
  s.s_combined = 0.5 * (s.s_unc_sum + s.s_rep_sum);
  return s;
}

/// Sum of L1 distances between consecutive priors.
inline double true_l1_path(std::span<const ProbVector> priors) {
  if (priors.size() < 2) throw ArgumentError("true_l1_path: need at least two priors");
  double s = 0.0;
  for (std::size_t t = 1; t < priors.size(); ++t) s += l1_distance(priors[t], priors[t - 1]);
  return s;
}

struct SurrogateGapReport {
  double surrogate_sum = 0.0;      // sum_t s_unc
  double true_cosine_sum = 0.0;    // sum_t 1 - cos(Q_{t-1}, Q_t)
  double true_l1_path = 0.0;
  double gap = 0.0;                // |surrogate_sum - true_cosine_sum|
  double bound = 0.0;              // K sum_t (eps_t + eps_{t-1})
  std::vector<double> eps;         // ||q_t - Q_t||_2, t = 0..T
  std::vector<bool> step_violation;    // |s_unc_t - (1 - cos(Q))| > K (eps_t + eps_{t-1})
  std::vector<bool> prefix_holds;      // prefix sum s_unc <= prefix L1 path + prefix bound
  double lipschitz = kCosineLipschitz;

  std::size_t violations() const { return static_cast<std::size_t>(std::count(step_violation.begin(), step_violation.end(), true)); }
  double prefix_pass_rate() const {
    if (prefix_holds.empty()) return 1.0;
    return static_cast<double>(std::count(prefix_holds.begin(), prefix_holds.end(), true)) /
           static_cast<double>(prefix_holds.size());
  }
};

inline SurrogateGapReport surrogate_gap_report(const StreamTrace& trace, double lipschitz = kCosineLipschitz) {
  if (trace.steps.empty()) throw ArgumentError("surrogate_gap_report: empty trace");
  if (trace.initial_prior.size() == 0 || trace.initial_q.size() == 0)
    throw ArgumentError("surrogate_gap_report: trace carries no oracle priors");
  SurrogateGapReport r;
  r.lipschitz = lipschitz;
  auto eps_of = [](const ProbVector& q, const ProbVector& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += (q[i] - p[i]) * (q[i] - p[i]);
    return std::sqrt(s);
  };
  r.eps.push_back(eps_of(trace.initial_q, trace.initial_prior));
  const ProbVector* prev = &trace.initial_prior;
  double prefix_s = 0.0, prefix_l1 = 0.0, prefix_bound = 0.0;
  for (const auto& st : trace.steps) {
    if (st.true_prior.size() == 0 || st.q.size() == 0) throw ArgumentError("surrogate_gap_report: step lacks oracle data");
    const double eps = eps_of(st.q, st.true_prior);
    const double step_bound = lipschitz * (eps + r.eps.back());
    const double true_cos = 1.0 - cosine(*prev, st.true_prior);
    r.eps.push_back(eps);
    r.surrogate_sum += st.signals.s_unc;
    r.true_cosine_sum += true_cos;
    r.bound += step_bound;
    r.step_violation.push_back(std::abs(st.signals.s_unc - true_cos) > step_bound);

    prefix_s += st.signals.s_unc;
    prefix_l1 += l1_distance(*prev, st.true_prior);
    prefix_bound += step_bound;
    r.prefix_holds.push_back(prefix_s <= prefix_l1 + prefix_bound);
    prev = &st.true_prior;
  }
  r.true_l1_path = prefix_l1;
  r.gap = std::abs(r.surrogate_sum - r.true_cosine_sum);
  return r;
}

inline constexpr double kOracleTolerance = 1e-6;

/// sum_t (loss_t - oracle_t); terms within the oracle tolerance below zero
/// are clipped to zero.
inline double dynamic_regret(std::span<const double> losses, std::span<const double> oracle_losses) {
  if (losses.size() != oracle_losses.size()) throw ArgumentError("dynamic_regret: length mismatch");
  double r = 0.0;
  for (std::size_t t = 0; t < losses.size(); ++t) {
    const double d = losses[t] - oracle_losses[t];
    if (d < -kOracleTolerance)
      throw ArgumentError("dynamic_regret: oracle loss exceeds loss at step " + std::to_string(t));
    r += std::max(d, 0.0);
  }
  return r;
}

// ---- per-step oracle ------------------------------------------------------

/// Softmax regression head on fixed features.
struct Head {
  Mat W;  // classes x hidden
  Vec b;
};

struct HeadFit {
  Head head;
  double loss = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Hidden representations of every row under the given extractor.
inline Mat frozen_features(const SplitParams& extractor, const Mat& x) {
  const std::size_t h = extractor.hidden_dim();
  Mat out(x.rows(), h);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const auto pre = matvec(extractor.shared_W, x.row(s));
    auto row = out.row(s);
    for (std::size_t j = 0; j < h; ++j) row[j] = std::max(pre[j] + extractor.shared_b[j], 0.0);
  }
  return out;
}

namespace detail {

/// Mean CE (exact log-sum-exp, no probability floor) of a head over
/// (features, labels); fills the gradient when asked.
inline double head_loss(const Head& head, const Mat& feats, std::span<const std::size_t> labels, Head* grad) {
  const std::size_t k = head.W.rows();
  const std::size_t h = head.W.cols();
  const double inv_n = 1.0 / static_cast<double>(feats.rows());
  if (grad) {
    grad->W = Mat(k, h);
    grad->b.assign(k, 0.0);
  }
  double loss = 0.0;
  Vec p(k);
  for (std::size_t s = 0; s < feats.rows(); ++s) {
    const auto f = feats.row(s);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      const double* w = head.W.values().data() + c * h;
      double z = head.b[c];
      for (std::size_t j = 0; j < h; ++j) z += w[j] * f[j];
      p[c] = z;
      mx = std::max(mx, z);
    }
    const std::size_t y = labels[s];
    const double zy = p[y];
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += (p[c] = std::exp(p[c] - mx));
    for (std::size_t c = 0; c < k; ++c) p[c] /= sum;
    loss += mx + std::log(sum) - zy;
    if (!grad) continue;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = (p[c] - (c == y ? 1.0 : 0.0)) * inv_n;
      auto gw = grad->W.row(c);
      for (std::size_t j = 0; j < h; ++j) gw[j] += d * f[j];
      grad->b[c] += d;
    }
  }
  return loss * inv_n;
}

/// Mean CE, gradient and Hessian of a head in flattened form: entry
/// c * (h + 1) + j is W(c, j) for j < h and b(c) for j = h.
inline double head_newton_terms(const Head& head, const Mat& feats, std::span<const std::size_t> labels, Vec& g,
                                Mat& H) {
  const std::size_t k = head.W.rows(), h = head.W.cols(), m = h + 1, n = k * m;
  const double inv_n = 1.0 / static_cast<double>(feats.rows());
  g.assign(n, 0.0);
  H = Mat(n, n);
  double loss = 0.0;
  Vec p(k), f(m);
  for (std::size_t s = 0; s < feats.rows(); ++s) {
    const auto row = feats.row(s);
    std::copy(row.begin(), row.end(), f.begin());
    f[h] = 1.0;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double z = head.b[c];
      for (std::size_t j = 0; j < h; ++j) z += head.W(c, j) * f[j];
      p[c] = z;
      mx = std::max(mx, z);
    }
    const std::size_t y = labels[s];
    const double zy = p[y];
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += (p[c] = std::exp(p[c] - mx));
    for (std::size_t c = 0; c < k; ++c) p[c] /= sum;
    loss += mx + std::log(sum) - zy;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = (p[c] - (c == y ? 1.0 : 0.0)) * inv_n;
      for (std::size_t j = 0; j < m; ++j) g[c * m + j] += d * f[j];
      for (std::size_t c2 = c; c2 < k; ++c2) {
        const double a = ((c == c2 ? p[c] : 0.0) - p[c] * p[c2]) * inv_n;
        for (std::size_t i = 0; i < m; ++i) {
          const double af = a * f[i];
          double* out = &H(c * m + i, c2 * m);
          for (std::size_t j = 0; j < m; ++j) out[j] += af * f[j];
        }
      }
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < r; ++c) H(r, c) = H(c, r);
  return loss * inv_n;
}

/// Solves (H + mu I) x = v for symmetric positive semidefinite H by Cholesky.
inline Vec cholesky_solve(Mat H, std::span<const double> v, double mu) {
  const std::size_t n = H.rows();
  for (std::size_t i = 0; i < n; ++i) H(i, i) += mu;
  for (std::size_t j = 0; j < n; ++j) {
    double d = H(j, j);
    for (std::size_t q = 0; q < j; ++q) d -= H(j, q) * H(j, q);
    if (!(d > 0.0)) throw IllConditionedError("cholesky_solve: matrix not positive definite", 0.0);
    H(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = H(i, j);
      for (std::size_t q = 0; q < j; ++q) s -= H(i, q) * H(j, q);
      H(i, j) = s / H(j, j);
    }
  }
  Vec x(v.begin(), v.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < i; ++q) x[i] -= H(i, q) * x[q];
    x[i] /= H(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t q = i + 1; q < n; ++q) x[i] -= H(q, i) * x[q];
    x[i] /= H(i, i);
  }
  return x;
}

inline Head head_from_flat(const Head& like, std::span<const double> x) {
  Head out = like;
  const std::size_t m = like.W.cols() + 1;
  for (std::size_t c = 0; c < like.W.rows(); ++c) {
    for (std::size_t j = 0; j + 1 < m; ++j) out.W(c, j) = x[c * m + j];
    out.b[c] = x[c * m + m - 1];
  }
  return out;
}

inline Vec head_to_flat(const Head& head) {
  const std::size_t m = head.W.cols() + 1;
  Vec x(head.W.rows() * m);
  for (std::size_t c = 0; c < head.W.rows(); ++c) {
    for (std::size_t j = 0; j + 1 < m; ++j) x[c * m + j] = head.W(c, j);
    x[c * m + m - 1] = head.b[c];
  }
  return x;
}

}  // namespace detail

/// Damped Newton with Armijo backtracking on the mean CE of a head over
/// frozen features, until the gradient norm drops to `tol` or `max_iter`
/// iterations pass. The damping covers the class-shift null space.
inline HeadFit fit_head(const Mat& feats, std::span<const std::size_t> labels, Head init, double tol = 1e-6,
                        int max_iter = 200) {
  HeadFit fit;
  fit.head = std::move(init);
  Vec g;
  Mat H;
  double loss = detail::head_newton_terms(fit.head, feats, labels, g, H);
  for (int it = 0; it < max_iter; ++it) {
    fit.grad_norm = norm2(g);
    if (fit.grad_norm <= tol) {
      fit.converged = true;
      break;
    }
    double trace = 0.0;
    for (std::size_t i = 0; i < H.rows(); ++i) trace += H(i, i);
    const double mu = 1e-8 * std::max(trace / static_cast<double>(H.rows()), 1e-12) + 1e-12;
    Vec step = detail::cholesky_solve(H, g, mu);
    const Vec x = detail::head_to_flat(fit.head);
    const double slope = dot(g, step);
    double a = 1.0;
    Head next;
    double next_loss = loss;
    for (int bt = 0; bt < 60; ++bt) {
      Vec trial = x;
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= a * step[i];
      next = detail::head_from_flat(fit.head, trial);
      next_loss = detail::head_loss(next, feats, labels, nullptr);
      if (next_loss <= loss - 1e-4 * a * slope) break;
      a *= 0.5;
    }
    if (!(next_loss < loss)) break;  // no further decrease at machine precision
    fit.head = std::move(next);
    loss = detail::head_newton_terms(fit.head, feats, labels, g, H);
    fit.iterations = it + 1;
  }
  fit.grad_norm = norm2(g);
  fit.converged = fit.converged || fit.grad_norm <= tol;
  fit.loss = loss;
  return fit;
}

inline Head zero_head(std::size_t num_classes, std::size_t hidden_dim) {
  return {Mat(num_classes, hidden_dim), Vec(num_classes, 0.0)};
}

inline constexpr std::size_t kOracleBatch = 2000;

struct OracleLoss {
  double loss = 0.0;
  bool converged = false;  // false: loss at the iteration cap, treat as a warning
};

/// Minimum mean CE over heads on frozen features, estimated on a fresh
/// labeled batch of 2000 samples from the true distribution at t.
inline OracleLoss per_step_oracle_loss(const SyntheticTask& task, const ProbVector& prior_t,
                                       const SplitParams& frozen_shared, Rng& rng) {
  const auto batch = sample_batch(task, prior_t, kOracleBatch, rng);
  const auto feats = frozen_features(frozen_shared, batch.features);
  const auto fit = fit_head(feats, batch.labels, zero_head(task.num_classes, frozen_shared.hidden_dim()));
  return {fit.loss, fit.converged};
}

// ---- rate-shape check -----------------------------------------------------

struct RegretRateReport {
  std::vector<int> horizons;
  std::vector<double> regret;
  std::vector<double> regret_per_step;
  double slope = 0.0;
  double intercept = 0.0;
  bool per_step_decreasing = false;
  bool pass = false;  // per-step regret strictly decreasing and slope <= max_slope
  double max_slope = 0.9;
};

/// Least-squares fit of log Reg_T against log T.
inline RegretRateReport regret_rate_check(const std::map<int, double>& regret_by_T, double max_slope = 0.9) {
  if (regret_by_T.size() < 3) throw ArgumentError("regret_rate_check: need at least 3 horizons");
  RegretRateReport r;
  r.max_slope = max_slope;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [T, reg] : regret_by_T) {
    if (T < 1 || !(reg > 0.0)) throw ArgumentError("regret_rate_check: horizons and regrets must be positive");
    r.horizons.push_back(T);
    r.regret.push_back(reg);
    r.regret_per_step.push_back(reg / static_cast<double>(T));
    const double x = std::log(static_cast<double>(T));
    const double y = std::log(reg);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(regret_by_T.size());
  r.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  r.intercept = (sy - r.slope * sx) / n;
  r.per_step_decreasing = true;
  for (std::size_t i = 1; i < r.regret_per_step.size(); ++i)
    r.per_step_decreasing = r.per_step_decreasing && r.regret_per_step[i] < r.regret_per_step[i - 1];
  r.pass = r.per_step_decreasing && r.slope <= max_slope;
  return r;
}

// ---- convex frozen-feature stream -----------------------------------------

/// Single client adapting only its head on features frozen at the pretrained
/// extractor, so every per-step problem is convex.
struct FrozenStreamConfig {
  int T = 100;
  ScheduleKind schedule = ScheduleKind::Linear;
  RateMode rate_mode = RateMode::adaptive();
  RateBounds bounds{5e-3, 1e-1};
  int local_epochs = 4;
  std::size_t batch_size = 128;
  std::size_t anchor_size = 200;
  double alpha = 0.1;
  double bbse_ridge = kDefaultBbseRidge;
  std::size_t oracle_batch = kOracleBatch;
  double oracle_tol = 1e-6;  // gradient-norm stop for the per-step comparator
  std::uint64_t stream_seed = 0;
};

struct FrozenStreamResult {
  StreamTrace trace;
  double regret = 0.0;
  std::size_t unconverged_oracles = 0;
};

inline FrozenStreamResult run_frozen_stream(const Setup& setup, const FrozenStreamConfig& cfg) {
  const auto& task = setup.task;
  const std::size_t k = task.num_classes;
  Rng rng = make_rng(cfg.stream_seed, 77);
  const auto target = sample_dirichlet_priors(cfg.alpha, 1, k, rng).front();
  ShiftSchedule schedule(cfg.schedule, cfg.T);
  schedule.omega(0, rng);

  SplitParams params = setup.global_params;
  const auto anchor = sample_anchor(task, setup.pretrain_prior, cfg.anchor_size, true, rng);
  const auto initial = batch_summary(params, UnlabeledBatch(anchor.features));

  FrozenStreamResult out;
  out.trace.initial_prior = setup.pretrain_prior;
  out.trace.initial_q = initial.q;
  out.trace.initial_z = initial.z;
  BatchSummary prev = initial;

  Head oracle_head{params.head_W, params.head_b};
  std::vector<double> losses, oracle_losses;
  for (int t = 1; t <= cfg.T; ++t) {
    const auto prior = interpolate_prior(setup.pretrain_prior, target, schedule.omega(t, rng));
    const auto batch = sample_batch(task, prior, cfg.batch_size, rng);
    const UnlabeledBatch ub(batch.features);

    const auto weights = bbse_estimate(setup.confusion, prediction_histogram(setup.global_params, ub), cfg.bbse_ridge);
    const auto summary = batch_summary(params, ub);
    Signals sig;
    sig.s_unc = std::clamp(s_unc(prev.q, summary.q), 0.0, 1.0);
    sig.s_rep = s_rep_or_zero(prev.z, summary.z);
    sig.s = combine_signal(sig.s_unc, sig.s_rep);
    sig.eta = cfg.rate_mode.kind == RateModeKind::Adaptive ? adaptive_eta(sig.s, cfg.bounds) : cfg.rate_mode.eta;
    for (int e = 0; e < cfg.local_epochs; ++e)
      params = sgd_step(params, grad_weighted_risk(params, anchor, weights, UpdateScope::HeadOnly), sig.eta,
                        UpdateScope::HeadOnly);

    // Learner and comparator are scored on the same labeled oracle batch.
    const auto eval = sample_batch(task, prior, cfg.oracle_batch, rng);
    const auto feats = frozen_features(params, eval.features);
    const double loss = detail::head_loss({params.head_W, params.head_b}, feats, eval.labels, nullptr);
    // Warm start from whichever of the previous optimum and the learner is better.
    const Head learner_head{params.head_W, params.head_b};
    const bool from_learner = detail::head_loss(oracle_head, feats, eval.labels, nullptr) > loss;
    auto fit = fit_head(feats, eval.labels, from_learner ? learner_head : oracle_head, cfg.oracle_tol);
    if (!fit.converged) ++out.unconverged_oracles;
    oracle_head = fit.head;

    TraceStep st{prior, summary.q, summary.z, sig, loss, std::min(fit.loss, loss),
                 accuracy(params, eval)};
    losses.push_back(st.loss);
    oracle_losses.push_back(st.oracle_loss);
    out.trace.steps.push_back(std::move(st));
    prev = summary;
  }
  out.regret = dynamic_regret(losses, oracle_losses);
  return out;
}

/// Per-client trace from an instrumented run (record_oracle, every step a participant).
inline StreamTrace trace_from_run(const RunResult& result, std::size_t client_id, const ProbVector& initial_prior,
                                  const BatchSummary& initial_summary) {
  StreamTrace trace;
  trace.initial_prior = initial_prior;
  trace.initial_q = initial_summary.q;
  trace.initial_z = initial_summary.z;
  for (const auto& round : result.rounds) {
    for (const auto& c : round.clients) {
      if (c.client_id != client_id) continue;
      if (!c.participated || !c.true_prior || !c.q)
        throw ArgumentError("trace_from_run: client " + std::to_string(client_id) + " lacks oracle data at t = " +
                            std::to_string(round.t));
      trace.steps.push_back({*c.true_prior, *c.q, c.z, c.signals, c.loss, 0.0, c.accuracy});
    }
  }
  return trace;
}

// ---- report ---------------------------------------------------------------

inline nlohmann::json analysis_report_json(const std::vector<SurrogateSums>& surrogate_sums,
                                           const std::vector<SurrogateGapReport>& gaps,
                                           const std::optional<RegretRateReport>& rate) {
  nlohmann::json j;
  j["comparator"] = kComparatorNote;
  j["surrogate_sums"] = nlohmann::json::array();
  for (const auto& s : surrogate_sums)
    j["surrogate_sums"].push_back({{"s_unc", s.s_unc_sum}, {"s_rep", s.s_rep_sum}, {"s_combined", s.s_combined}});
  j["true_paths"] = nlohmann::json::array();
  j["gaps"] = nlohmann::json::array();
  j["bounds"] = nlohmann::json::array();
  for (const auto& g : gaps) {
    j["true_paths"].push_back(g.true_l1_path);
    j["gaps"].push_back(g.gap);
    j["bounds"].push_back(g.bound);
  }
  if (rate) {
    nlohmann::json by_t = nlohmann::json::object();
    for (std::size_t i = 0; i < rate->horizons.size(); ++i) by_t[std::to_string(rate->horizons[i])] = rate->regret[i];
    j["regret_by_T"] = by_t;
    j["fitted_slope"] = rate->slope;
  }
  // Existence-level constants of the regret and convergence bounds; only rate
  // shapes are checked, so these stay symbolic.
  j["symbolic_constants"] = {"G", "B", "Gamma", "sigma", "rho", "chi", "delta", "K_psi", "K_phi", "sigma_psi", "sigma_phi"};
  return j;
}

}  // namespace fedade
