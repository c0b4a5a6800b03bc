#pragma once
// Label-free drift estimation: confusion matrices and black-box shift
// estimation of the current label prior, batch summaries, the uncertainty and
// representation dynamics signals, and the signal-to-learning-rate map.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/errors.hpp"
#include "fedade/model.hpp"
#include "fedade/numerics.hpp"

namespace fedade {

/// m(i, j) = P(predict i | true class j); every column sums to one.
struct ConfusionMatrix {
  Mat m;
  std::size_t sample_count = 0;

  std::size_t num_classes() const noexcept { return m.rows(); }
};

struct BatchSummary {
  ProbVector q;  // mean softmax
  Vec z;         // mean of unit-normalized hidden vectors; zero if the batch is dead
};

struct RateBounds {
  double eta_min = 5e-6;
  double eta_max = 1e-4;

  RateBounds() = default;
  RateBounds(double lo, double hi) : eta_min(lo), eta_max(hi) { validate(); }

  void validate() const {
    if (!(eta_min > 0.0 && eta_min <= eta_max))
      throw ArgumentError("RateBounds: require 0 < eta_min <= eta_max (got " + std::to_string(eta_min) + ", " +
                          std::to_string(eta_max) + ")");
  }
  bool operator==(const RateBounds&) const = default;
};

inline constexpr double kDefaultBbseRidge = 1e-6;

inline std::size_t predict(const SplitParams& model, std::span<const double> x) {
  return argmax(forward(model, x).probs.values());
}

inline ConfusionMatrix build_confusion(const SplitParams& model, const LabeledBatch& data) {
  const std::size_t k = model.num_classes();
  const auto counts = detail::class_counts(data, k);
  ConfusionMatrix conf{Mat(k, k), data.size()};
  for (std::size_t s = 0; s < data.size(); ++s) conf.m(predict(model, data.features.row(s)), data.labels[s]) += 1.0;
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < k; ++i) conf.m(i, j) /= static_cast<double>(counts[j]);
  return conf;
}

/// Normalized histogram of hard (argmax) predictions.
inline ProbVector prediction_histogram(const SplitParams& model, const UnlabeledBatch& batch) {
  std::vector<double> h(model.num_classes(), 0.0);
  for (std::size_t s = 0; s < batch.size(); ++s) h[predict(model, batch.features.row(s))] += 1.0;
  for (double& v : h) v /= static_cast<double>(batch.size());
  return ProbVector::normalized(std::move(h));
}

struct BbseResult {
  ProbVector prior;  // projected onto the simplex
  Vec raw;           // regularized solution before projection
  /// Some raw entry fell below -0.5: the confusion matrix is close to singular.
  bool conditioning_warning = false;
};

inline BbseResult bbse_estimate_detailed(const ConfusionMatrix& conf, const ProbVector& q_hat, double ridge) {
  if (q_hat.size() != conf.num_classes()) throw ArgumentError("bbse_estimate: histogram length mismatch");
  Vec raw = solve_regularized(conf.m, q_hat.values(), ridge);
  bool warn = false;
  for (double v : raw) warn = warn || v < -0.5;
  return {simplex_project(raw), std::move(raw), warn};
}

/// Recovers the current label prior from the predicted-label histogram.
inline ProbVector bbse_estimate(const ConfusionMatrix& conf, const ProbVector& q_hat, double ridge) {
  return bbse_estimate_detailed(conf, q_hat, ridge).prior;
}

inline BatchSummary batch_summary(const SplitParams& model, const UnlabeledBatch& batch) {
  const std::size_t n = batch.size();
  std::vector<double> q(model.num_classes(), 0.0);
  Vec z(model.hidden_dim(), 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto out = forward(model, batch.features.row(s));
    for (std::size_t c = 0; c < q.size(); ++c) q[c] += out.probs[c];
    const double nh = norm2(out.hidden);
    if (nh < kZeroNorm) continue;
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += out.hidden[j] / nh;
  }
  for (double& v : q) v /= static_cast<double>(n);
  for (double& v : z) v /= static_cast<double>(n);
  return {ProbVector::normalized(std::move(q)), std::move(z)};
}

/// 1 - cos(q_prev, q_cur); in [0, 1] for probability vectors.
inline double s_unc(const ProbVector& q_prev, const ProbVector& q_cur) { return 1.0 - cosine(q_prev, q_cur); }

/// Cosine distance rescaled from [0, 2] to [0, 1].
inline double s_rep(std::span<const double> z_prev, std::span<const double> z_cur) {
  return 0.5 * (1.0 - cosine(z_prev, z_cur));
}

/// s_rep, except that a dead (all-zero) summary on either side reads as no drift.
inline double s_rep_or_zero(std::span<const double> z_prev, std::span<const double> z_cur) {
  if (norm2(z_prev) < kZeroNorm || norm2(z_cur) < kZeroNorm) return 0.0;
  return s_rep(z_prev, z_cur);
}

inline double combine_signal(double unc, double rep) {
  if (!(unc >= 0.0 && unc <= 1.0 && rep >= 0.0 && rep <= 1.0))
    throw ArgumentError("combine_signal: signals must lie in [0,1]");
  return 0.5 * (unc + rep);
}

inline double adaptive_eta(double s, const RateBounds& bounds) {
  if (!(s >= 0.0 && s <= 1.0)) throw ArgumentError("adaptive_eta: signal " + std::to_string(s) + " not in [0,1]");
  return bounds.eta_min + (bounds.eta_max - bounds.eta_min) * s;
}

/// scale * T^(-1/3) * cum_shift^(1/3). Reported only.
inline double optimal_eta_reference(int T, double cum_shift, double scale) {
  if (T < 1) throw ArgumentError("optimal_eta_reference: T must be >= 1");
  if (!(cum_shift >= 0.0)) throw ArgumentError("optimal_eta_reference: cum_shift must be >= 0");
  if (!(scale > 0.0)) throw ArgumentError("optimal_eta_reference: scale must be > 0");
  return scale * std::cbrt(cum_shift / static_cast<double>(T));
}

// ---- alternative uncertainty measures (ablation only) ---------------------

enum class DriftMeasure { Cosine, KL, Wasserstein };

NLOHMANN_JSON_SERIALIZE_ENUM(DriftMeasure, {{DriftMeasure::Cosine, "cosine"},
                                            {DriftMeasure::KL, "kl"},
                                            {DriftMeasure::Wasserstein, "wasserstein"}})

/// KL(q_prev || q_cur) after flooring both at 1e-8, squashed to [0, 1) by 1 - exp(-KL).
inline double kl_drift(const ProbVector& q_prev, const ProbVector& q_cur) {
  if (q_prev.size() != q_cur.size()) throw ArgumentError("kl_drift: length mismatch");
  constexpr double floor = 1e-8;
  std::vector<double> a(q_prev.values()), b(q_cur.values());
  for (double& v : a) v += floor;
  for (double& v : b) v += floor;
  const auto pa = ProbVector::normalized(a);
  const auto pb = ProbVector::normalized(b);
  double kl = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) kl += pa[i] * std::log(pa[i] / pb[i]);
  return 1.0 - std::exp(-std::max(kl, 0.0));
}

/// 1-D Wasserstein-1 distance between class-index distributions, divided by
/// the largest possible value (|I| - 1).
inline double wasserstein_drift(const ProbVector& q_prev, const ProbVector& q_cur) {
  if (q_prev.size() != q_cur.size()) throw ArgumentError("wasserstein_drift: length mismatch");
  if (q_prev.size() < 2) return 0.0;
  double ca = 0.0, cb = 0.0, w = 0.0;
  for (std::size_t i = 0; i + 1 < q_prev.size(); ++i) {
    ca += q_prev[i];
    cb += q_cur[i];
    w += std::abs(ca - cb);
  }
  return std::clamp(w / static_cast<double>(q_prev.size() - 1), 0.0, 1.0);
}

inline double uncertainty_drift(DriftMeasure measure, const ProbVector& q_prev, const ProbVector& q_cur) {
  switch (measure) {
    case DriftMeasure::Cosine:
      return s_unc(q_prev, q_cur);
    case DriftMeasure::KL:
      return kl_drift(q_prev, q_cur);
    case DriftMeasure::Wasserstein:
      return wasserstein_drift(q_prev, q_cur);
  }
  return 0.0;
}

}  // namespace fedade
