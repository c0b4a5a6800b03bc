#pragma once
// Synthetic non-stationary streams: mixing-weight schedules, Dirichlet client
// targets, interpolated class priors, Gaussian class-conditional features and
// additive-noise corruption.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/errors.hpp"
#include "fedade/model.hpp"
#include "fedade/numerics.hpp"
#include "fedade/rng.hpp"

namespace fedade {

enum class ScheduleKind { Linear, Sine, Square, Bernoulli };
enum class SineMode { Clamp, Rescale };
enum class ScenarioKind { LabelShift, CovariateShift };
enum class PriorKind { Uniform, Gaussian, ExpDecay };

NLOHMANN_JSON_SERIALIZE_ENUM(ScheduleKind, {{ScheduleKind::Linear, "linear"},
                                            {ScheduleKind::Sine, "sine"},
                                            {ScheduleKind::Square, "square"},
                                            {ScheduleKind::Bernoulli, "bernoulli"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SineMode, {{SineMode::Clamp, "clamp"}, {SineMode::Rescale, "rescale"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ScenarioKind, {{ScenarioKind::LabelShift, "label"},
                                            {ScenarioKind::CovariateShift, "covariate"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PriorKind, {{PriorKind::Uniform, "uniform"},
                                         {PriorKind::Gaussian, "gaussian"},
                                         {PriorKind::ExpDecay, "expdecay"}})

/// Mixing weight omega(t) in [0, 1] between the initial and target priors.
///
/// Linear is t/T. Sine is sin(pi t / sqrt(T)), clamped to [0, 1] or rescaled
/// to (1 + sin)/2. Square alternates 0/1 in blocks of ceil(sqrt(T)/2) steps,
/// starting at 0. Bernoulli starts at 0 and flips with probability
/// 1/sqrt(T) at each step; it is the only stateful kind and must be queried
/// with consecutive t.
class ShiftSchedule {
 public:
  ShiftSchedule(ScheduleKind kind, int total_steps, SineMode sine_mode = SineMode::Clamp)
      : kind_(kind), total_steps_(total_steps), sine_mode_(sine_mode) {
    if (total_steps < 1) throw ArgumentError("ShiftSchedule: T must be >= 1");
  }

  ScheduleKind kind() const noexcept { return kind_; }
  int total_steps() const noexcept { return total_steps_; }
  double bernoulli_state() const noexcept { return state_; }

  int square_block() const noexcept {
    return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(total_steps_)) / 2.0));
  }

  /// `rng` is consumed only by the Bernoulli kind.
  double omega(int t, Rng& rng) {
    if (t < 0 || t > total_steps_)
      throw ArgumentError("omega: t = " + std::to_string(t) + " outside [0, " + std::to_string(total_steps_) + "]");
    const double T = static_cast<double>(total_steps_);
    switch (kind_) {
      case ScheduleKind::Linear:
        return static_cast<double>(t) / T;
      case ScheduleKind::Sine: {
        const double s = std::sin(M_PI * static_cast<double>(t) / std::sqrt(T));
        return sine_mode_ == SineMode::Clamp ? std::clamp(s, 0.0, 1.0) : 0.5 * (1.0 + s);
      }
      case ScheduleKind::Square:
        return ((t / square_block()) % 2 == 0) ? 0.0 : 1.0;
      case ScheduleKind::Bernoulli:
        if (t == 0) {
          state_ = 0.0;
        } else if (uniform01(rng) < 1.0 / std::sqrt(T)) {
          state_ = 1.0 - state_;
        }
        return state_;
    }
    return 0.0;
  }

 private:
  ScheduleKind kind_;
  int total_steps_;
  SineMode sine_mode_;
  double state_ = 0.0;
};

/// (1 - w) q0 + w qT
inline ProbVector interpolate_prior(const ProbVector& q0, const ProbVector& qT, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw ArgumentError("interpolate_prior: weight " + std::to_string(w) + " not in [0,1]");
  if (q0.size() != qT.size()) throw ArgumentError("interpolate_prior: length mismatch");
  if (w == 0.0) return q0;
  if (w == 1.0) return qT;
  std::vector<double> out(q0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * q0[i] + w * qT[i];
  return ProbVector::normalized(std::move(out));
}

/// i.i.d. symmetric Dirichlet(alpha) draws via normalized Gamma variates.
inline std::vector<ProbVector> sample_dirichlet_priors(double alpha, std::size_t num_clients, std::size_t num_classes,
                                                       Rng& rng) {
  if (!(alpha > 0.0)) throw ArgumentError("sample_dirichlet_priors: alpha must be > 0");
  if (num_clients == 0 || num_classes == 0) throw ArgumentError("sample_dirichlet_priors: counts must be >= 1");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<ProbVector> out;
  out.reserve(num_clients);
  std::vector<double> g(num_classes);
  while (out.size() < num_clients) {
    double sum = 0.0;
    for (double& x : g) {
      x = gamma(rng);
      sum += x;
    }
    // All-zero draws happen for tiny alpha through underflow; redraw.
    if (!(sum > 0.0)) continue;
    out.push_back(ProbVector::normalized(g));
  }
  return out;
}

/// Gaussian class-conditional task: x = mean[y] + noise_std * N(0, I).
struct SyntheticTask {
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
  std::vector<Vec> class_means;
  double noise_std = 1.0;
};

inline SyntheticTask make_task(std::size_t num_classes, std::size_t input_dim, double mean_scale, double noise_std,
                               Rng& rng) {
  if (num_classes == 0 || input_dim == 0) throw ArgumentError("make_task: dimensions must be positive");
  if (!(mean_scale >= 0.0)) throw ArgumentError("make_task: mean_scale must be >= 0");
  if (!(noise_std > 0.0)) throw ArgumentError("make_task: noise_std must be > 0");
  SyntheticTask task{num_classes, input_dim, {}, noise_std};
  task.class_means.assign(num_classes, Vec(input_dim, 0.0));
  for (auto& m : task.class_means)
    for (double& v : m) v = mean_scale * std_normal(rng);
  return task;
}

/// Labels by inverse CDF over the cumulative prior, then Gaussian features.
inline LabeledBatch sample_batch(const SyntheticTask& task, const ProbVector& prior, std::size_t n, Rng& rng) {
  if (n == 0) throw ArgumentError("sample_batch: n must be >= 1");
  if (prior.size() != task.num_classes) throw ArgumentError("sample_batch: prior length mismatch");
  std::vector<double> cdf(prior.size());
  std::partial_sum(prior.begin(), prior.end(), cdf.begin());

  Mat features(n, task.input_dim);
  std::vector<std::size_t> labels(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = uniform01(rng) * cdf.back();
    // First class whose cumulative mass exceeds u; zero-mass classes are never hit.
    const auto y = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    labels[s] = y;
    auto row = features.row(s);
    const auto& mean = task.class_means[y];
    for (std::size_t i = 0; i < task.input_dim; ++i) row[i] = mean[i] + task.noise_std * std_normal(rng);
  }
  return {std::move(features), std::move(labels)};
}

/// Additive isotropic Gaussian corruption; severity 0 returns the batch untouched.
inline LabeledBatch corrupt(LabeledBatch batch, double severity, Rng& rng) {
  if (!(severity >= 0.0)) throw ArgumentError("corrupt: severity must be >= 0");
  if (severity == 0.0) return batch;
  for (double& v : batch.features.values()) v += severity * std_normal(rng);
  return batch;
}

inline ProbVector pretrain_prior(PriorKind kind, std::size_t num_classes) {
  if (num_classes < 2) throw ArgumentError("pretrain_prior: need at least 2 classes");
  const double k = static_cast<double>(num_classes);
  std::vector<double> w(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) {
    const double x = static_cast<double>(i);
    switch (kind) {
      case PriorKind::Uniform:
        w[i] = 1.0;
        break;
      case PriorKind::Gaussian: {
        const double c = (k - 1.0) / 2.0;
        const double sd = k / 4.0;
        w[i] = std::exp(-(x - c) * (x - c) / (2.0 * sd * sd));
        break;
      }
      case PriorKind::ExpDecay:
        w[i] = std::exp(-x / (k / 4.0));
        break;
    }
  }
  return ProbVector::normalized(std::move(w));
}

/// Per-client description of how its stream drifts.
struct ClientShiftProfile {
  ProbVector initial_prior;
  ProbVector target_prior;
  ShiftSchedule schedule;
  ScenarioKind scenario = ScenarioKind::LabelShift;
  double corruption_max_severity = 0.0;

  ClientShiftProfile(ProbVector q0, ProbVector qT, ShiftSchedule sched, ScenarioKind kind, double max_severity)
      : initial_prior(std::move(q0)),
        target_prior(std::move(qT)),
        schedule(sched),
        scenario(kind),
        corruption_max_severity(max_severity) {
    if (initial_prior.size() != target_prior.size()) throw ArgumentError("ClientShiftProfile: prior length mismatch");
    if (!(corruption_max_severity >= 0.0)) throw ArgumentError("ClientShiftProfile: negative severity");
    if (scenario == ScenarioKind::LabelShift && corruption_max_severity != 0.0)
      throw ArgumentError("ClientShiftProfile: label shift cannot carry corruption");
    if (scenario == ScenarioKind::CovariateShift && !(initial_prior == target_prior))
      throw ArgumentError("ClientShiftProfile: covariate shift must keep the label prior fixed");
  }

  struct Step {
    ProbVector prior;
    double severity;
  };

  /// Advances the schedule to `t` and returns the data distribution there.
  Step at(int t, Rng& rng) {
    const double w = schedule.omega(t, rng);
    if (scenario == ScenarioKind::CovariateShift) return {initial_prior, w * corruption_max_severity};
    return {interpolate_prior(initial_prior, target_prior, w), 0.0};
  }
};

/// Everything needed to rebuild the synthetic stream of an experiment.
struct ScenarioConfig {
  ScenarioKind scenario = ScenarioKind::LabelShift;
  ScheduleKind schedule = ScheduleKind::Linear;
  SineMode sine_mode = SineMode::Clamp;
  double alpha = 0.1;
  int T = 100;
  std::size_t num_classes = 5;
  std::size_t input_dim = 10;
  double mean_scale = 2.0;
  double noise_std = 1.0;
  double corruption_max_severity = 0.0;
  PriorKind pretrain_prior_kind = PriorKind::Uniform;
  /// Q0 == QT: no drift at all (used for stationary checks).
  bool stationary = false;

  bool operator==(const ScenarioConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ScenarioConfig& s) {
  j = {{"scenario", s.scenario},
       {"schedule", s.schedule},
       {"sine_mode", s.sine_mode},
       {"alpha", s.alpha},
       {"T", s.T},
       {"num_classes", s.num_classes},
       {"input_dim", s.input_dim},
       {"mean_scale", s.mean_scale},
       {"noise_std", s.noise_std},
       {"corruption_max_severity", s.corruption_max_severity},
       {"pretrain_prior_kind", s.pretrain_prior_kind},
       {"stationary", s.stationary}};
}

inline void from_json(const nlohmann::json& j, ScenarioConfig& s) {
  ScenarioConfig d;
  s.scenario = j.value("scenario", d.scenario);
  s.schedule = j.value("schedule", d.schedule);
  s.sine_mode = j.value("sine_mode", d.sine_mode);
  s.alpha = j.value("alpha", d.alpha);
  s.T = j.value("T", d.T);
  s.num_classes = j.value("num_classes", d.num_classes);
  s.input_dim = j.value("input_dim", d.input_dim);
  s.mean_scale = j.value("mean_scale", d.mean_scale);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.corruption_max_severity = j.value("corruption_max_severity", d.corruption_max_severity);
  s.pretrain_prior_kind = j.value("pretrain_prior_kind", d.pretrain_prior_kind);
  s.stationary = j.value("stationary", d.stationary);
}

}  // namespace fedade
