#pragma once
// One-hidden-layer split classifier. The first (ReLU) layer is the shared
// feature extractor that the server aggregates; the softmax output layer is
// the personalized head that never leaves the client.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/errors.hpp"
#include "fedade/numerics.hpp"
#include "fedade/rng.hpp"

namespace fedade {

struct SplitParams {
  Mat shared_W;  // hidden x input
  Vec shared_b;  // hidden
  Mat head_W;    // classes x hidden
  Vec head_b;    // classes

  std::size_t input_dim() const noexcept { return shared_W.cols(); }
  std::size_t hidden_dim() const noexcept { return shared_W.rows(); }
  std::size_t num_classes() const noexcept { return head_W.rows(); }

  static SplitParams zeros(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_classes) {
    return {Mat(hidden_dim, input_dim), Vec(hidden_dim, 0.0), Mat(num_classes, hidden_dim), Vec(num_classes, 0.0)};
  }

  void check_consistent() const {
    if (hidden_dim() == 0 || input_dim() == 0 || num_classes() == 0)
      throw ArgumentError("SplitParams: empty dimension");
    if (shared_b.size() != hidden_dim() || head_W.cols() != hidden_dim() || head_b.size() != num_classes())
      throw ArgumentError("SplitParams: inconsistent block dimensions");
  }

  bool operator==(const SplitParams&) const = default;
};

/// Same block layout as the parameters.
using Gradient = SplitParams;

/// Which blocks an update touches: everything, or the head with the shared
/// extractor frozen.
enum class UpdateScope { Joint, HeadOnly };

struct LabeledBatch {
  Mat features;                    // n x input_dim
  std::vector<std::size_t> labels;  // n

  LabeledBatch() = default;
  LabeledBatch(Mat f, std::vector<std::size_t> l) : features(std::move(f)), labels(std::move(l)) {
    if (features.rows() == 0) throw ArgumentError("LabeledBatch: empty");
    if (labels.size() != features.rows()) throw ArgumentError("LabeledBatch: label count != sample count");
  }
  std::size_t size() const noexcept { return labels.size(); }
};

struct UnlabeledBatch {
  Mat features;  // n x input_dim

  UnlabeledBatch() = default;
  explicit UnlabeledBatch(Mat f) : features(std::move(f)) {
    if (features.rows() == 0) throw ArgumentError("UnlabeledBatch: empty");
  }
  static UnlabeledBatch from(const LabeledBatch& b) { return UnlabeledBatch(b.features); }
  std::size_t size() const noexcept { return features.rows(); }
};

/// Uniform in +-1/sqrt(fan_in) for both weight matrices, zero biases.
inline SplitParams init_params(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_classes, Rng& rng) {
  if (input_dim == 0 || hidden_dim == 0 || num_classes == 0) throw ArgumentError("init_params: zero dimension");
  auto p = SplitParams::zeros(input_dim, hidden_dim, num_classes);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  std::uniform_real_distribution<double> u1(-a1, a1);
  std::uniform_real_distribution<double> u2(-a2, a2);
  for (double& w : p.shared_W.values()) w = u1(rng);
  for (double& w : p.head_W.values()) w = u2(rng);
  return p;
}

struct ForwardResult {
  Vec pre;     // shared_W x + shared_b
  Vec hidden;  // ReLU(pre)
  Vec logits;
  ProbVector probs;
};

inline ForwardResult forward_full(const SplitParams& params, std::span<const double> x) {
  if (x.size() != params.input_dim())
    throw ArgumentError("forward: input has " + std::to_string(x.size()) + " features, expected " +
                        std::to_string(params.input_dim()));
  ForwardResult r;
  r.pre = matvec(params.shared_W, x);
  r.hidden.resize(r.pre.size());
  for (std::size_t j = 0; j < r.pre.size(); ++j) {
    r.pre[j] += params.shared_b[j];
    r.hidden[j] = r.pre[j] > 0.0 ? r.pre[j] : 0.0;
  }
  r.logits = matvec(params.head_W, r.hidden);
  for (std::size_t k = 0; k < r.logits.size(); ++k) r.logits[k] += params.head_b[k];
  r.probs = softmax(r.logits);
  return r;
}

struct HiddenAndProbs {
  Vec hidden;
  ProbVector probs;
};

inline HiddenAndProbs forward(const SplitParams& params, std::span<const double> x) {
  auto r = forward_full(params, x);
  return {std::move(r.hidden), std::move(r.probs)};
}

inline constexpr double kProbFloor = 1e-12;

inline double cross_entropy(const ProbVector& probs, std::size_t label) {
  return -std::log(std::max(probs[label], kProbFloor));
}

namespace detail {

inline std::vector<std::size_t> class_counts(const LabeledBatch& batch, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : batch.labels) {
    if (y >= num_classes) throw ArgumentError("label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  for (std::size_t i = 0; i < num_classes; ++i)
    if (counts[i] == 0) throw CoverageError("class " + std::to_string(i) + " missing from labeled set", i);
  return counts;
}

}  // namespace detail

/// Mean cross-entropy per true class over the anchor set.
inline Vec class_wise_risks(const SplitParams& params, const LabeledBatch& anchor) {
  const std::size_t k = params.num_classes();
  const auto counts = detail::class_counts(anchor, k);
  Vec sums(k, 0.0);
  for (std::size_t s = 0; s < anchor.size(); ++s) {
    const auto out = forward(params, anchor.features.row(s));
    sums[anchor.labels[s]] += cross_entropy(out.probs, anchor.labels[s]);
  }
  for (std::size_t i = 0; i < k; ++i) sums[i] /= static_cast<double>(counts[i]);
  return sums;
}

/// Class risks reweighted by a (estimated) target prior.
inline double weighted_risk(const SplitParams& params, const LabeledBatch& anchor, const ProbVector& weights) {
  if (weights.size() != params.num_classes()) throw ArgumentError("weighted_risk: weight length mismatch");
  return dot(weights.values(), class_wise_risks(params, anchor));
}

/// Gradient of sum_s sample_weight[s] * CE(x_s, y_s) over the rows of
/// `batch`. HeadOnly leaves the shared blocks at exactly zero. The ReLU
/// derivative at 0 is 0, and samples whose true-class probability sits below
/// the CE floor contribute nothing (the clamp is flat there).
inline Gradient grad_sample_weighted_ce(const SplitParams& params, const LabeledBatch& batch,
                                        std::span<const double> sample_weight, UpdateScope scope) {
  const std::size_t k = params.num_classes();
  const std::size_t h = params.hidden_dim();
  const std::size_t d = params.input_dim();
  if (sample_weight.size() != batch.size()) throw ArgumentError("grad: one weight per sample required");

  auto g = SplitParams::zeros(d, h, k);
  Vec delta(k);
  Vec delta_h(h);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t y = batch.labels[s];
    if (y >= k) throw ArgumentError("label " + std::to_string(y) + " out of range");
    const double alpha = sample_weight[s];
    if (alpha == 0.0) continue;
    const auto x = batch.features.row(s);
    const auto f = forward_full(params, x);
    if (f.probs[y] < kProbFloor) continue;

    for (std::size_t c = 0; c < k; ++c) delta[c] = alpha * (f.probs[c] - (c == y ? 1.0 : 0.0));
    for (std::size_t c = 0; c < k; ++c) {
      auto gw = g.head_W.row(c);
      for (std::size_t j = 0; j < h; ++j) gw[j] += delta[c] * f.hidden[j];
      g.head_b[c] += delta[c];
    }
    if (scope == UpdateScope::HeadOnly) continue;

    for (std::size_t j = 0; j < h; ++j) {
      double acc = 0.0;
      if (f.pre[j] > 0.0)
        for (std::size_t c = 0; c < k; ++c) acc += params.head_W(c, j) * delta[c];
      delta_h[j] = acc;
    }
    for (std::size_t j = 0; j < h; ++j) {
      if (delta_h[j] == 0.0) continue;
      auto gw = g.shared_W.row(j);
      for (std::size_t i = 0; i < d; ++i) gw[i] += delta_h[j] * x[i];
      g.shared_b[j] += delta_h[j];
    }
  }
  return g;
}

/// Per-sample weights that turn the weighted class risk into a plain sum:
/// w[y] / (number of anchor samples with label y).
inline Vec risk_sample_weights(const LabeledBatch& anchor, const ProbVector& weights) {
  const auto counts = detail::class_counts(anchor, weights.size());
  Vec sw(anchor.size());
  for (std::size_t s = 0; s < anchor.size(); ++s)
    sw[s] = weights[anchor.labels[s]] / static_cast<double>(counts[anchor.labels[s]]);
  return sw;
}

/// Analytic gradient of weighted_risk.
inline Gradient grad_weighted_risk(const SplitParams& params, const LabeledBatch& anchor, const ProbVector& weights,
                                   UpdateScope scope) {
  if (weights.size() != params.num_classes()) throw ArgumentError("grad_weighted_risk: weight length mismatch");
  return grad_sample_weighted_ce(params, anchor, risk_sample_weights(anchor, weights), scope);
}

/// Gradient of the plain mean cross-entropy over `batch`.
inline Gradient grad_mean_cross_entropy(const SplitParams& params, const LabeledBatch& batch, UpdateScope scope) {
  const Vec sw(batch.size(), 1.0 / static_cast<double>(batch.size()));
  return grad_sample_weighted_ce(params, batch, sw, scope);
}

/// params - eta * grad on the blocks selected by `scope`; other blocks are
/// copied bit-for-bit.
inline SplitParams sgd_step(const SplitParams& params, const Gradient& grad, double eta, UpdateScope scope) {
  if (!(eta >= 0.0)) throw ArgumentError("sgd_step: eta must be >= 0");
  SplitParams out = params;
  auto sub = [eta](std::vector<double>& dst, const std::vector<double>& g) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= eta * g[i];
  };
  if (scope == UpdateScope::Joint) {
    sub(out.shared_W.values(), grad.shared_W.values());
    sub(out.shared_b, grad.shared_b);
  }
  sub(out.head_W.values(), grad.head_W.values());
  sub(out.head_b, grad.head_b);
  return out;
}

inline double accuracy(const SplitParams& params, const LabeledBatch& batch) {
  std::size_t correct = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto out = forward(params, batch.features.row(s));
    if (argmax(out.probs.values()) == batch.labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

/// Plain (unweighted) mean cross-entropy over a labeled batch.
inline double mean_cross_entropy(const SplitParams& params, const LabeledBatch& batch) {
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    s += cross_entropy(forward(params, batch.features.row(i)).probs, batch.labels[i]);
  return s / static_cast<double>(batch.size());
}

/// Rows `idx` of `batch`, in that order.
inline LabeledBatch select_rows(const LabeledBatch& batch, std::span<const std::size_t> idx) {
  Mat f(idx.size(), batch.features.cols());
  std::vector<std::size_t> l(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = batch.features.row(idx[r]);
    std::copy(src.begin(), src.end(), f.row(r).begin());
    l[r] = batch.labels[idx[r]];
  }
  return {std::move(f), std::move(l)};
}

// ---- JSON snapshots -------------------------------------------------------

namespace detail {

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline Mat mat_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols, const char* name) {
  if (!j.is_array() || j.size() != rows) throw ArgumentError(std::string(name) + ": wrong row count");
  Mat m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = j[r].get<std::vector<double>>();
    if (row.size() != cols) throw ArgumentError(std::string(name) + ": wrong column count");
    std::copy(row.begin(), row.end(), m.row(r).begin());
  }
  return m;
}

}  // namespace detail

inline nlohmann::json params_to_json(const SplitParams& p) {
  return {{"dims", {{"input", p.input_dim()}, {"hidden", p.hidden_dim()}, {"classes", p.num_classes()}}},
          {"shared_W", detail::mat_to_json(p.shared_W)},
          {"shared_b", p.shared_b},
          {"head_W", detail::mat_to_json(p.head_W)},
          {"head_b", p.head_b}};
}

inline SplitParams params_from_json(const nlohmann::json& j) {
  const auto& dims = j.at("dims");
  const auto d = dims.at("input").get<std::size_t>();
  const auto h = dims.at("hidden").get<std::size_t>();
  const auto k = dims.at("classes").get<std::size_t>();
  SplitParams p{detail::mat_from_json(j.at("shared_W"), h, d, "shared_W"), j.at("shared_b").get<Vec>(),
                detail::mat_from_json(j.at("head_W"), k, h, "head_W"), j.at("head_b").get<Vec>()};
  p.check_consistent();
  return p;
}

}  // namespace fedade
