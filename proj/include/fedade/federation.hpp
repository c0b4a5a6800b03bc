#pragma once
// Two-phase partial-sharing federated post-adaptation loop.
//
// Per timestep every client draws a batch from its drifting distribution.
// Sampled participants estimate the label prior of their batch, measure how
// far their batch summaries moved since the last cached ones, turn that into
// a learning rate, and take joint steps on the reweighted anchor risk. On
// communication steps the server averages the shared extractors, broadcasts
// the average to every client, and participants refine their heads with the
// extractor frozen. Participants then cache their summaries.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/errors.hpp"
#include "fedade/estimation.hpp"
#include "fedade/model.hpp"
#include "fedade/numerics.hpp"
#include "fedade/parallel.hpp"
#include "fedade/rng.hpp"
#include "fedade/shift.hpp"

namespace fedade {

enum class RateModeKind { Adaptive, Fixed };
NLOHMANN_JSON_SERIALIZE_ENUM(RateModeKind, {{RateModeKind::Adaptive, "adaptive"}, {RateModeKind::Fixed, "fixed"}})

struct RateMode {
  RateModeKind kind = RateModeKind::Adaptive;
  double eta = 0.0;   // Fixed only
  std::string name;   // label in metrics output

  static RateMode adaptive(std::string name = "adaptive") { return {RateModeKind::Adaptive, 0.0, std::move(name)}; }
  static RateMode fixed(double eta, std::string name = "") {
    if (name.empty()) name = "fixed";
    return {RateModeKind::Fixed, eta, std::move(name)};
  }
  bool operator==(const RateMode&) const = default;
};

struct PretrainConfig {
  std::size_t n_samples = 10000;
  int epochs = 20;
  double eta = 0.1;
  std::size_t minibatch = 64;
  bool operator==(const PretrainConfig&) const = default;
};

struct RunConfig {
  std::size_t num_clients = 100;
  int T = 100;
  double participant_rate = 0.1;
  int local_epochs = 4;
  int comm_interval = 1;
  RateMode rate_mode = RateMode::adaptive();
  RateBounds bounds{5e-6, 1e-4};
  std::size_t batch_size = 32;
  std::size_t anchor_size = 50;
  bool stratified_anchor = false;
  std::size_t anchor_minibatch = 0;  // 0: one full-batch gradient step per epoch
  double bbse_ridge = kDefaultBbseRidge;
  ScenarioConfig scenario;
  std::uint64_t seed = 0;
  std::size_t hidden_dim = 16;
  PretrainConfig pretrain;
  DriftMeasure drift_measure = DriftMeasure::Cosine;
  bool evaluate_participants_only = false;
  bool record_oracle = false;    // keep true prior and summaries per client record
  int checkpoint_interval = 0;   // 0: no shared-parameter checkpoints
  std::size_t workers = 1;

  std::size_t participants_per_step() const {
    return static_cast<std::size_t>(std::ceil(participant_rate * static_cast<double>(num_clients) - 1e-9));
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (num_clients < 1) v.push_back("num_clients must be >= 1");
    if (T < 1) v.push_back("T must be >= 1");
    if (!(participant_rate > 0.0 && participant_rate <= 1.0)) v.push_back("participant_rate must be in (0, 1]");
    if (local_epochs < 0) v.push_back("local_epochs must be >= 0");
    if (comm_interval < 1) v.push_back("comm_interval must be >= 1");
    if (!(bounds.eta_min > 0.0 && bounds.eta_min <= bounds.eta_max))
      v.push_back("RateBounds: require 0 < eta_min <= eta_max");
    else if (rate_mode.kind == RateModeKind::Fixed &&
             !(rate_mode.eta >= bounds.eta_min && rate_mode.eta <= bounds.eta_max))
      v.push_back("rate mode '" + rate_mode.name + "': fixed eta must lie within [eta_min, eta_max]");
    if (batch_size < 1) v.push_back("batch_size must be >= 1");
    if (anchor_size < scenario.num_classes) v.push_back("anchor_size must be >= num_classes");
    if (!(bbse_ridge >= 0.0)) v.push_back("bbse_ridge must be >= 0");
    if (hidden_dim < 1) v.push_back("hidden_dim must be >= 1");
    if (scenario.num_classes < 2) v.push_back("num_classes must be >= 2");
    if (scenario.input_dim < 1) v.push_back("input_dim must be >= 1");
    if (!(scenario.alpha > 0.0)) v.push_back("alpha must be > 0");
    if (!(scenario.noise_std > 0.0)) v.push_back("noise_std must be > 0");
    if (!(scenario.mean_scale >= 0.0)) v.push_back("mean_scale must be >= 0");
    if (!(scenario.corruption_max_severity >= 0.0)) v.push_back("corruption_max_severity must be >= 0");
    if (scenario.scenario == ScenarioKind::LabelShift && scenario.corruption_max_severity != 0.0)
      v.push_back("label-shift scenario cannot carry corruption");
    if (pretrain.n_samples < 10 * scenario.num_classes) v.push_back("pretrain.n_samples must be >= 10 * num_classes");
    if (pretrain.epochs < 0) v.push_back("pretrain.epochs must be >= 0");
    if (pretrain.minibatch < 1) v.push_back("pretrain.minibatch must be >= 1");
    if (!(pretrain.eta >= 0.0)) v.push_back("pretrain.eta must be >= 0");
    return v;
  }

  void validate() const {
    auto v = violations();
    if (!v.empty()) throw ValidationError(std::move(v));
  }
};

// RNG stream ids; clients use kClientStreamBase + id.
inline constexpr std::uint64_t kTaskStream = 1;
inline constexpr std::uint64_t kPretrainStream = 2;
inline constexpr std::uint64_t kTargetPriorStream = 3;
inline constexpr std::uint64_t kServerStream = 4;
inline constexpr std::uint64_t kClientStreamBase = 1000;

/// Minibatch SGD on the plain mean cross-entropy, from a fresh initialization.
inline SplitParams pretrain(const SyntheticTask& task, const LabeledBatch& data, std::size_t hidden_dim,
                            const PretrainConfig& cfg, Rng& rng) {
  SplitParams params = init_params(task.input_dim, hidden_dim, task.num_classes, rng);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t mb = std::min(cfg.minibatch, data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const std::size_t len = std::min(mb, order.size() - start);
      const auto chunk = select_rows(data, std::span<const std::size_t>(order).subspan(start, len));
      params = sgd_step(params, grad_mean_cross_entropy(params, chunk, UpdateScope::Joint), cfg.eta, UpdateScope::Joint);
    }
  }
  return params;
}

/// Shared extractor block that travels to the server.
struct SharedParams {
  Mat W;
  Vec b;
  bool operator==(const SharedParams&) const = default;
};

inline SharedParams shared_of(const SplitParams& p) { return {p.shared_W, p.shared_b}; }

inline void set_shared(SplitParams& p, const SharedParams& s) {
  p.shared_W = s.W;
  p.shared_b = s.b;
}

struct WeightedShared {
  SharedParams params;
  double sample_count;
};

/// Sample-count weighted average of the uploaded extractors.
inline SharedParams aggregate_shared(std::span<const WeightedShared> entries) {
  if (entries.empty()) throw ArgumentError("aggregate_shared: no entries");
  const auto& first = entries.front().params;
  SharedParams out{Mat(first.W.rows(), first.W.cols()), Vec(first.b.size(), 0.0)};
  double total = 0.0;
  for (const auto& e : entries) {
    if (!(e.sample_count > 0.0)) throw ArgumentError("aggregate_shared: sample counts must be > 0");
    if (e.params.W.rows() != first.W.rows() || e.params.W.cols() != first.W.cols() ||
        e.params.b.size() != first.b.size())
      throw ArgumentError("aggregate_shared: inconsistent dimensions");
    total += e.sample_count;
  }
  for (const auto& e : entries) {
    const double w = e.sample_count / total;
    for (std::size_t i = 0; i < out.W.values().size(); ++i) out.W.values()[i] += w * e.params.W.values()[i];
    for (std::size_t i = 0; i < out.b.size(); ++i) out.b[i] += w * e.params.b[i];
  }
  return out;
}

struct Signals {
  double s_unc = 0.0;
  double s_rep = 0.0;
  double s = 0.0;
  double eta = 0.0;
};

struct ClientState {
  std::size_t id = 0;
  SplitParams params;
  SplitParams predictor;  // black-box classifier the confusion matrix was measured on
  LabeledBatch anchor;
  ClientShiftProfile profile;
  BatchSummary prev_summary;
  std::size_t sample_count = 0;
  Rng rng;

  // Filled by client_step, consumed by head_refine and the summary cache.
  std::optional<BatchSummary> pending_summary;
  std::optional<ProbVector> risk_weights;
  double eta = 0.0;
};

/// Samples an anchor set from `prior` that covers every class. Random draws
/// are retried up to 10 times; the stratified variant allocates counts by
/// largest remainder with at least one sample per class.
inline LabeledBatch sample_anchor(const SyntheticTask& task, const ProbVector& prior, std::size_t n, bool stratified,
                                  Rng& rng) {
  const std::size_t k = task.num_classes;
  if (n < k) throw ArgumentError("sample_anchor: anchor smaller than class count");
  if (!stratified) {
    for (int attempt = 0; attempt < 10; ++attempt) {
      auto batch = sample_batch(task, prior, n, rng);
      std::vector<bool> seen(k, false);
      for (auto y : batch.labels) seen[y] = true;
      const auto missing = std::find(seen.begin(), seen.end(), false);
      if (missing == seen.end()) return batch;
      if (attempt == 9) {
        const auto cls = static_cast<std::size_t>(missing - seen.begin());
        throw CoverageError("anchor set misses class " + std::to_string(cls) + " after 10 draws", cls);
      }
    }
  }
  // Stratified: one per class, the rest by largest remainder of prior * (n - k).
  std::vector<std::size_t> counts(k, 1);
  const std::size_t extra = n - k;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = prior[i] * static_cast<double>(extra);
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    counts[i] += whole;
    assigned += whole;
    rem.emplace_back(exact - static_cast<double>(whole), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < extra; ++r, ++assigned) ++counts[rem[r % k].second];

  Mat f(n, task.input_dim);
  std::vector<std::size_t> labels;
  labels.reserve(n);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c < counts[i]; ++c) labels.push_back(i);
  for (std::size_t s = 0; s < n; ++s) {
    auto row = f.row(s);
    for (std::size_t d = 0; d < task.input_dim; ++d)
      row[d] = task.class_means[labels[s]][d] + task.noise_std * std_normal(rng);
  }
  return {std::move(f), std::move(labels)};
}

/// Server-side artifacts built once per run.
struct Setup {
  SyntheticTask task;
  ProbVector pretrain_prior;
  SplitParams global_params;
  ConfusionMatrix confusion;
  double pretrain_accuracy = 0.0;
  double pretrain_loss = 0.0;
};

inline Setup prepare(const RunConfig& config) {
  const auto& sc = config.scenario;
  Rng task_rng = make_rng(config.seed, kTaskStream);
  Rng pre_rng = make_rng(config.seed, kPretrainStream);
  Setup s;
  s.task = make_task(sc.num_classes, sc.input_dim, sc.mean_scale, sc.noise_std, task_rng);
  s.pretrain_prior = pretrain_prior(sc.pretrain_prior_kind, sc.num_classes);
  auto data = sample_anchor(s.task, s.pretrain_prior, config.pretrain.n_samples, false, pre_rng);
  s.global_params = pretrain(s.task, data, config.hidden_dim, config.pretrain, pre_rng);
  s.confusion = build_confusion(s.global_params, data);
  s.pretrain_accuracy = accuracy(s.global_params, data);
  s.pretrain_loss = mean_cross_entropy(s.global_params, data);
  return s;
}

/// Every client starts from the global model with its own anchor set drawn
/// from the initial prior; cached summaries come from that anchor.
inline std::vector<ClientState> init_clients(const RunConfig& config, const SplitParams& global_params,
                                             const SyntheticTask& task, const ProbVector& initial_prior) {
  const auto& sc = config.scenario;
  Rng target_rng = make_rng(config.seed, kTargetPriorStream);
  std::vector<ProbVector> targets;
  if (sc.scenario == ScenarioKind::LabelShift && !sc.stationary)
    targets = sample_dirichlet_priors(sc.alpha, config.num_clients, sc.num_classes, target_rng);
  else
    targets.assign(config.num_clients, initial_prior);

  std::vector<ClientState> clients;
  clients.reserve(config.num_clients);
  for (std::size_t c = 0; c < config.num_clients; ++c) {
    Rng rng = make_rng(config.seed, kClientStreamBase + c);
    auto anchor = sample_anchor(task, initial_prior, config.anchor_size, config.stratified_anchor, rng);
    const double severity = sc.scenario == ScenarioKind::CovariateShift && !sc.stationary ? sc.corruption_max_severity : 0.0;
    ClientShiftProfile profile(initial_prior, targets[c], ShiftSchedule(sc.schedule, sc.T, sc.sine_mode), sc.scenario,
                               severity);
    auto summary = batch_summary(global_params, UnlabeledBatch(anchor.features));
    clients.push_back(ClientState{c, global_params, global_params, std::move(anchor), std::move(profile), std::move(summary),
                                  config.batch_size, std::move(rng), std::nullopt, std::nullopt, 0.0});
  }
  return clients;
}

namespace detail {

inline void descend(ClientState& client, const ProbVector& weights, double eta, int epochs, std::size_t minibatch,
                    UpdateScope scope) {
  if (eta == 0.0) return;
  const auto& anchor = client.anchor;
  if (minibatch == 0 || minibatch >= anchor.size()) {
    for (int e = 0; e < epochs; ++e)
      client.params = sgd_step(client.params, grad_weighted_risk(client.params, anchor, weights, scope), eta, scope);
    return;
  }
  // Unbiased minibatch estimate of the full weighted-risk gradient.
  const Vec full_w = risk_sample_weights(anchor, weights);
  const double scale = static_cast<double>(anchor.size()) / static_cast<double>(minibatch);
  std::vector<std::size_t> order(anchor.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), client.rng);
    for (std::size_t start = 0; start < order.size(); start += minibatch) {
      const std::size_t len = std::min(minibatch, order.size() - start);
      const auto idx = std::span<const std::size_t>(order).subspan(start, len);
      const auto chunk = select_rows(anchor, idx);
      Vec sw(len);
      for (std::size_t r = 0; r < len; ++r) sw[r] = full_w[idx[r]] * scale;
      client.params = sgd_step(client.params, grad_sample_weighted_ce(client.params, chunk, sw, scope), eta, scope);
    }
  }
}

}  // namespace detail

struct ClientStepOutput {
  SharedParams sent;
  Signals signals;
  BbseResult bbse;
};

/// Local phase of a participant: prior estimate, dynamics signals, learning
/// rate, then joint descent on the reweighted anchor risk. The summary cache
/// is left untouched until after head refinement.
inline ClientStepOutput client_step(ClientState& client, const UnlabeledBatch& batch, const ConfusionMatrix& conf,
                                    const RunConfig& config) {
  auto bbse = bbse_estimate_detailed(conf, prediction_histogram(client.predictor, batch), config.bbse_ridge);
  auto summary = batch_summary(client.params, batch);

  Signals sig;
  sig.s_unc = std::clamp(uncertainty_drift(config.drift_measure, client.prev_summary.q, summary.q), 0.0, 1.0);
  sig.s_rep = s_rep_or_zero(client.prev_summary.z, summary.z);
  sig.s = combine_signal(sig.s_unc, sig.s_rep);
  sig.eta = config.rate_mode.kind == RateModeKind::Adaptive ? adaptive_eta(sig.s, config.bounds) : config.rate_mode.eta;

  client.eta = sig.eta;
  client.risk_weights = bbse.prior;
  client.pending_summary = std::move(summary);
  detail::descend(client, bbse.prior, sig.eta, config.local_epochs, config.anchor_minibatch, UpdateScope::Joint);
  return {shared_of(client.params), sig, std::move(bbse)};
}

/// Head-only descent with the rate and risk weights of this timestep.
inline void head_refine(ClientState& client, const RunConfig& config) {
  if (!client.risk_weights) throw ArgumentError("head_refine: client has not taken a step this timestep");
  detail::descend(client, *client.risk_weights, client.eta, config.local_epochs, config.anchor_minibatch,
                  UpdateScope::HeadOnly);
}

inline void cache_summary(ClientState& client) {
  if (client.pending_summary) client.prev_summary = std::move(*client.pending_summary);
  client.pending_summary.reset();
  client.risk_weights.reset();
}

struct ClientRecord {
  std::size_t client_id = 0;
  bool participated = false;
  double accuracy = 0.0;
  double loss = 0.0;  // estimated (reweighted anchor) risk at the end of the step
  Signals signals;    // NaN for non-participants
  double bbse_l1 = 0.0;
  bool conditioning_warning = false;
  // record_oracle only
  std::optional<ProbVector> true_prior;
  std::optional<ProbVector> q;
  Vec z;
};

struct RoundRecord {
  int t = 0;
  std::vector<std::size_t> participants;
  bool communicated = false;
  std::vector<ClientRecord> clients;
  double mean_accuracy = 0.0;
  double mean_eta = 0.0;  // over participants
  double mean_loss = 0.0;
};

struct Checkpoint {
  int t = 0;
  SharedParams shared;
};

struct RunResult {
  std::vector<RoundRecord> rounds;
  std::vector<Checkpoint> checkpoints;
  double pretrain_accuracy = 0.0;
  double bbse_ridge = 0.0;
  std::size_t conditioning_warnings = 0;
};

/// Uniform sample of `k` of `n` ids without replacement, sorted ascending.
inline std::vector<std::size_t> sample_participants(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline RunResult run(const RunConfig& config, const Setup& setup) {
  config.validate();
  const auto& sc = config.scenario;
  auto clients = init_clients(config, setup.global_params, setup.task, setup.pretrain_prior);
  Rng server_rng = make_rng(config.seed, kServerStream);
  const std::size_t n = clients.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  RunResult result;
  result.pretrain_accuracy = setup.pretrain_accuracy;
  result.bbse_ridge = config.bbse_ridge;

  std::vector<LabeledBatch> batches(n);
  std::vector<ProbVector> priors(n);
  std::vector<ClientStepOutput> outputs(n);
  std::vector<char> is_participant(n, 0);

  for (int t = 1; t <= sc.T; ++t) {
    // Draw every client's batch from its distribution at t.
    parallel_for(n, config.workers, [&](std::size_t c) {
      auto& cl = clients[c];
      if (t == 1) cl.profile.at(0, cl.rng);  // anchor the schedule state at t = 0
      auto step = cl.profile.at(t, cl.rng);
      batches[c] = corrupt(sample_batch(setup.task, step.prior, config.batch_size, cl.rng), step.severity, cl.rng);
      priors[c] = std::move(step.prior);
    });

    RoundRecord rec;
    rec.t = t;
    rec.participants = sample_participants(n, config.participants_per_step(), server_rng);
    std::fill(is_participant.begin(), is_participant.end(), 0);
    for (auto id : rec.participants) is_participant[id] = 1;

    parallel_for(rec.participants.size(), config.workers, [&](std::size_t i) {
      const auto c = rec.participants[i];
      outputs[c] = client_step(clients[c], UnlabeledBatch(batches[c].features), setup.confusion, config);
    });

    rec.communicated = t % config.comm_interval == 0;
    if (rec.communicated) {
      std::vector<WeightedShared> uploads;
      uploads.reserve(rec.participants.size());
      for (auto c : rec.participants)
        uploads.push_back({outputs[c].sent, static_cast<double>(clients[c].sample_count)});
      const auto global = aggregate_shared(uploads);
      for (auto& cl : clients) set_shared(cl.params, global);
      parallel_for(rec.participants.size(), config.workers,
                   [&](std::size_t i) { head_refine(clients[rec.participants[i]], config); });
      if (config.checkpoint_interval > 0 && t % config.checkpoint_interval == 0)
        result.checkpoints.push_back({t, global});
    }

    // Evaluation; cache summaries afterwards so risk weights are still at hand.
    std::vector<ClientRecord> evals(n);
    std::vector<char> evaluated(n, 0);
    parallel_for(n, config.workers, [&](std::size_t c) {
      const bool part = is_participant[c] != 0;
      if (config.evaluate_participants_only && !part) return;
      auto& cl = clients[c];
      ClientRecord r;
      r.client_id = c;
      r.participated = part;
      BbseResult bbse = part ? outputs[c].bbse
                             : bbse_estimate_detailed(setup.confusion,
                                                      prediction_histogram(cl.predictor, UnlabeledBatch(batches[c].features)),
                                                      config.bbse_ridge);
      r.accuracy = accuracy(cl.params, batches[c]);
      r.loss = weighted_risk(cl.params, cl.anchor, bbse.prior);
      r.signals = part ? outputs[c].signals : Signals{nan, nan, nan, nan};
      r.bbse_l1 = l1_distance(bbse.prior, priors[c]);
      r.conditioning_warning = bbse.conditioning_warning;
      if (config.record_oracle) {
        r.true_prior = priors[c];
        if (part && cl.pending_summary) {
          r.q = cl.pending_summary->q;
          r.z = cl.pending_summary->z;
        }
      }
      evals[c] = std::move(r);
      evaluated[c] = 1;
    });
    for (auto c : rec.participants) cache_summary(clients[c]);

    double acc = 0.0, loss = 0.0, eta = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!evaluated[c]) continue;
      acc += evals[c].accuracy;
      loss += evals[c].loss;
      if (evals[c].participated) eta += evals[c].signals.eta;
      result.conditioning_warnings += evals[c].conditioning_warning ? 1 : 0;
      rec.clients.push_back(std::move(evals[c]));
    }
    const auto m = static_cast<double>(rec.clients.size());
    rec.mean_accuracy = acc / m;
    rec.mean_loss = loss / m;
    rec.mean_eta = rec.participants.empty() ? 0.0 : eta / static_cast<double>(rec.participants.size());
    result.rounds.push_back(std::move(rec));
  }
  return result;
}

inline RunResult run(const RunConfig& config) {
  config.validate();
  return run(config, prepare(config));
}

}  // namespace fedade
