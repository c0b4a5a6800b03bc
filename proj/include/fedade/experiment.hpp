#pragma once
// Experiment runner behind the command-line tool: JSON config parsing and
// validation, (mode, seed) job execution, and the metrics / summary /
// comparison files.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedade/analysis.hpp"
#include "fedade/errors.hpp"
#include "fedade/federation.hpp"

namespace fedade {

struct ExperimentConfig {
  RunConfig run;  // rate_mode and seed are overwritten per job
  std::vector<RateMode> modes;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "out";
  bool emit_oracle_diagnostics = false;
};

enum class ExitCode : int { Ok = 0, Usage = 1, Config = 2, Io = 3, Numeric = 4 };

/// FixLR(Low/Mid/High) at eta_min, 2 eta_min and eta_max, plus the adaptive rate.
inline std::vector<RateMode> default_modes(const RateBounds& b) {
  return {RateMode::adaptive("adaptive"), RateMode::fixed(b.eta_min, "fixlr_low"),
          RateMode::fixed(std::min(2.0 * b.eta_min, b.eta_max), "fixlr_mid"), RateMode::fixed(b.eta_max, "fixlr_high")};
}

namespace detail {

template <class E>
std::string enum_name(E e) {
  return nlohmann::json(e).get<std::string>();
}

/// Reads an enum written as a string, recording unknown names as violations.
template <class E>
void read_enum(const nlohmann::json& j, const char* key, E& out, std::initializer_list<E> allowed,
               std::vector<std::string>& violations, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_string())
    for (E e : allowed)
      if (enum_name(e) == v.get<std::string>()) {
        out = e;
        return;
      }
  std::string names;
  for (E e : allowed) names += (names.empty() ? "" : "|") + enum_name(e);
  violations.push_back(where + key + ": expected one of " + names + ", got " + v.dump());
}

template <class T>
void read_value(const nlohmann::json& j, const char* key, T& out, std::vector<std::string>& violations,
                const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    violations.push_back(where + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                       std::vector<std::string>& violations, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) violations.push_back(where + it.key() + ": unknown key");
  }
}

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

/// Parses, defaults and validates a JSON experiment description. Throws
/// ParseError on malformed JSON and ValidationError listing every violation.
inline ExperimentConfig validate_config(const std::string& raw) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_col(raw, e.byte);
    throw ParseError("config is not valid JSON at line " + std::to_string(line) + ", column " + std::to_string(col) +
                         ": " + e.what(),
                     line, col);
  }
  std::vector<std::string> v;
  if (!j.is_object()) throw ValidationError({"config must be a JSON object"});

  ExperimentConfig cfg;
  RunConfig& r = cfg.run;
  detail::check_keys(j,
                     {"num_clients", "T", "participant_rate", "local_epochs", "comm_interval", "eta_min", "eta_max",
                      "batch_size", "anchor_size", "stratified_anchor", "anchor_minibatch", "bbse_ridge", "hidden_dim",
                      "pretrain", "drift_measure", "evaluate_participants_only", "checkpoint_interval", "scenario",
                      "modes", "seeds", "output_dir", "emit_oracle_diagnostics"},
                     v, "");
  detail::read_value(j, "num_clients", r.num_clients, v, "");
  detail::read_value(j, "participant_rate", r.participant_rate, v, "");
  detail::read_value(j, "local_epochs", r.local_epochs, v, "");
  detail::read_value(j, "comm_interval", r.comm_interval, v, "");
  detail::read_value(j, "eta_min", r.bounds.eta_min, v, "");
  detail::read_value(j, "eta_max", r.bounds.eta_max, v, "");
  detail::read_value(j, "batch_size", r.batch_size, v, "");
  detail::read_value(j, "anchor_size", r.anchor_size, v, "");
  detail::read_value(j, "stratified_anchor", r.stratified_anchor, v, "");
  detail::read_value(j, "anchor_minibatch", r.anchor_minibatch, v, "");
  detail::read_value(j, "bbse_ridge", r.bbse_ridge, v, "");
  detail::read_value(j, "hidden_dim", r.hidden_dim, v, "");
  detail::read_value(j, "evaluate_participants_only", r.evaluate_participants_only, v, "");
  detail::read_value(j, "checkpoint_interval", r.checkpoint_interval, v, "");
  detail::read_value(j, "output_dir", cfg.output_dir, v, "");
  detail::read_value(j, "emit_oracle_diagnostics", cfg.emit_oracle_diagnostics, v, "");
  detail::read_enum(j, "drift_measure", r.drift_measure,
                    {DriftMeasure::Cosine, DriftMeasure::KL, DriftMeasure::Wasserstein}, v, "");

  // T lives on the scenario; a top-level T is accepted as a shorthand.
  auto& sc = r.scenario;
  detail::read_value(j, "T", sc.T, v, "");
  if (j.contains("scenario")) {
    const auto& s = j.at("scenario");
    if (!s.is_object()) {
      v.push_back("scenario: must be an object");
    } else {
      const std::string w = "scenario.";
      detail::check_keys(s,
                         {"scenario", "schedule", "sine_mode", "alpha", "T", "num_classes", "input_dim", "mean_scale",
                          "noise_std", "corruption_max_severity", "pretrain_prior_kind", "stationary"},
                         v, w);
      detail::read_enum(s, "scenario", sc.scenario, {ScenarioKind::LabelShift, ScenarioKind::CovariateShift}, v, w);
      detail::read_enum(s, "schedule", sc.schedule,
                        {ScheduleKind::Linear, ScheduleKind::Sine, ScheduleKind::Square, ScheduleKind::Bernoulli}, v, w);
      detail::read_enum(s, "sine_mode", sc.sine_mode, {SineMode::Clamp, SineMode::Rescale}, v, w);
      detail::read_enum(s, "pretrain_prior_kind", sc.pretrain_prior_kind,
                        {PriorKind::Uniform, PriorKind::Gaussian, PriorKind::ExpDecay}, v, w);
      detail::read_value(s, "alpha", sc.alpha, v, w);
      detail::read_value(s, "T", sc.T, v, w);
      detail::read_value(s, "num_classes", sc.num_classes, v, w);
      detail::read_value(s, "input_dim", sc.input_dim, v, w);
      detail::read_value(s, "mean_scale", sc.mean_scale, v, w);
      detail::read_value(s, "noise_std", sc.noise_std, v, w);
      detail::read_value(s, "corruption_max_severity", sc.corruption_max_severity, v, w);
      detail::read_value(s, "stationary", sc.stationary, v, w);
    }
  }
  r.T = sc.T;

  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    const std::string w = "pretrain.";
    if (!p.is_object()) {
      v.push_back("pretrain: must be an object");
    } else {
      detail::check_keys(p, {"n_samples", "epochs", "eta", "minibatch"}, v, w);
      detail::read_value(p, "n_samples", r.pretrain.n_samples, v, w);
      detail::read_value(p, "epochs", r.pretrain.epochs, v, w);
      detail::read_value(p, "eta", r.pretrain.eta, v, w);
      detail::read_value(p, "minibatch", r.pretrain.minibatch, v, w);
    }
  }

  if (j.contains("modes")) {
    const auto& m = j.at("modes");
    if (!m.is_array()) {
      v.push_back("modes: must be an array");
    } else {
      for (std::size_t i = 0; i < m.size(); ++i) {
        const std::string w = "modes[" + std::to_string(i) + "].";
        const auto& e = m[i];
        if (!e.is_object()) {
          v.push_back(w + " must be an object");
          continue;
        }
        detail::check_keys(e, {"name", "kind", "eta"}, v, w);
        RateMode mode;
        detail::read_enum(e, "kind", mode.kind, {RateModeKind::Adaptive, RateModeKind::Fixed}, v, w);
        detail::read_value(e, "eta", mode.eta, v, w);
        detail::read_value(e, "name", mode.name, v, w);
        if (mode.kind == RateModeKind::Fixed && !e.contains("eta")) v.push_back(w + "eta: required for fixed modes");
        if (mode.name.empty()) mode.name = mode.kind == RateModeKind::Adaptive ? "adaptive" : "fixed";
        cfg.modes.push_back(mode);
      }
    }
  } else {
    cfg.modes = default_modes(r.bounds);
  }

  if (j.contains("seeds")) {
    detail::read_value(j, "seeds", cfg.seeds, v, "");
  } else {
    cfg.seeds = {0};
  }

  if (cfg.modes.empty()) v.push_back("modes: at least one rate mode is required");
  if (cfg.seeds.empty()) v.push_back("seeds: at least one seed is required");
  std::set<std::string> names;
  for (const auto& m : cfg.modes) {
    if (!names.insert(m.name).second) v.push_back("modes: duplicate name '" + m.name + "'");
    if (m.name.find_first_of("/\\ ,") != std::string::npos) v.push_back("modes: name '" + m.name + "' has / \\ , or space");
  }
  std::set<std::uint64_t> seen;
  for (auto s : cfg.seeds)
    if (!seen.insert(s).second) v.push_back("seeds: duplicate seed " + std::to_string(s));

  // Per-mode run-config invariants (fixed rates must honor the bounds).
  std::set<std::string> run_violations;
  for (const auto& m : cfg.modes) {
    RunConfig probe = r;
    probe.rate_mode = m;
    for (auto& s : probe.violations()) run_violations.insert(s);
  }
  if (cfg.modes.empty())
    for (auto& s : r.violations()) run_violations.insert(s);
  v.insert(v.end(), run_violations.begin(), run_violations.end());

  if (!v.empty()) throw ValidationError(std::move(v));
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  const RunConfig& r = cfg.run;
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& m : cfg.modes) {
    nlohmann::json e = {{"name", m.name}, {"kind", m.kind}};
    if (m.kind == RateModeKind::Fixed) e["eta"] = m.eta;
    modes.push_back(e);
  }
  return {{"num_clients", r.num_clients},
          {"T", r.T},
          {"participant_rate", r.participant_rate},
          {"local_epochs", r.local_epochs},
          {"comm_interval", r.comm_interval},
          {"eta_min", r.bounds.eta_min},
          {"eta_max", r.bounds.eta_max},
          {"batch_size", r.batch_size},
          {"anchor_size", r.anchor_size},
          {"stratified_anchor", r.stratified_anchor},
          {"anchor_minibatch", r.anchor_minibatch},
          {"bbse_ridge", r.bbse_ridge},
          {"hidden_dim", r.hidden_dim},
          {"pretrain",
           {{"n_samples", r.pretrain.n_samples},
            {"epochs", r.pretrain.epochs},
            {"eta", r.pretrain.eta},
            {"minibatch", r.pretrain.minibatch}}},
          {"drift_measure", r.drift_measure},
          {"evaluate_participants_only", r.evaluate_participants_only},
          {"checkpoint_interval", r.checkpoint_interval},
          {"scenario", r.scenario},
          {"modes", modes},
          {"seeds", cfg.seeds},
          {"output_dir", cfg.output_dir},
          {"emit_oracle_diagnostics", cfg.emit_oracle_diagnostics}};
}

/// 16 hex digits of FNV-1a over the canonical config dump, output_dir excluded.
inline std::string config_hash(const ExperimentConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- metrics CSV ----------------------------------------------------------

inline constexpr const char* kMetricsHeader = "t,client_id,mode,seed,accuracy,loss,s_unc,s_rep,s,eta,bbse_l1";

inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline void write_metrics_csv(std::ostream& os, const RunResult& result, const std::string& mode, std::uint64_t seed) {
  os << kMetricsHeader << '\n';
  for (const auto& round : result.rounds)
    for (const auto& c : round.clients)
      os << round.t << ',' << c.client_id << ',' << mode << ',' << seed << ',' << format_real(c.accuracy) << ','
         << format_real(c.loss) << ',' << format_real(c.signals.s_unc) << ',' << format_real(c.signals.s_rep) << ','
         << format_real(c.signals.s) << ',' << format_real(c.signals.eta) << ',' << format_real(c.bbse_l1) << '\n';
}

struct RunStats {
  double mean_accuracy = 0.0;
  double final_accuracy = 0.0;
  double mean_eta = 0.0;
  double cum_S = 0.0;  // sum over t of the participants' mean signal
};

inline RunStats run_stats(const RunResult& result) {
  RunStats s;
  if (result.rounds.empty()) return s;
  for (const auto& r : result.rounds) {
    s.mean_accuracy += r.mean_accuracy;
    s.mean_eta += r.mean_eta;
    double sig = 0.0;
    std::size_t n = 0;
    for (const auto& c : r.clients)
      if (c.participated) {
        sig += c.signals.s;
        ++n;
      }
    if (n > 0) s.cum_S += sig / static_cast<double>(n);
  }
  const auto T = static_cast<double>(result.rounds.size());
  s.mean_accuracy /= T;
  s.mean_eta /= T;
  s.final_accuracy = result.rounds.back().mean_accuracy;
  return s;
}

namespace detail {

inline nlohmann::json mean_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - m) * (x - m);
  const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return {{"mean", m}, {"std", sd}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string scenario_label(const ScenarioConfig& s) {
  if (s.stationary) return enum_name(s.scenario) + "/stationary";
  return enum_name(s.scenario) + "/" + enum_name(s.schedule);
}

}  // namespace detail

struct ComparisonRow {
  std::string scenario;
  std::string mode;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::size_t seeds = 0;
};

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "scenario,mode,mean_accuracy,std_accuracy,seeds\n";
  for (const auto& r : rows)
    os << r.scenario << ',' << r.mode << ',' << format_real(r.mean_accuracy) << ',' << format_real(r.std_accuracy)
       << ',' << r.seeds << '\n';
  return os.str();
}

struct ExperimentOutcome {
  std::string hash;
  std::vector<ComparisonRow> comparison;
  std::vector<std::filesystem::path> files;
};

/// Runs every (mode, seed) job, `workers` at a time, and writes per-job
/// metrics CSVs plus per-mode summaries and the comparison table.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::size_t workers = 1) {
  namespace fs = std::filesystem;
  const fs::path out(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());

  ExperimentOutcome outcome;
  outcome.hash = config_hash(cfg);
  const auto& hash = outcome.hash;

  struct Job {
    std::size_t mode;
    std::size_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < cfg.modes.size(); ++m)
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) jobs.push_back({m, s});
  std::vector<RunStats> stats(jobs.size());
  std::vector<std::size_t> warnings(jobs.size());
  std::vector<std::vector<fs::path>> written(jobs.size());

  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto& mode = cfg.modes[jobs[i].mode];
    const auto seed = cfg.seeds[jobs[i].seed];
    RunConfig rc = cfg.run;
    rc.rate_mode = mode;
    rc.seed = seed;
    rc.workers = 1;
    rc.record_oracle = cfg.emit_oracle_diagnostics;
    const auto setup = prepare(rc);
    const auto result = run(rc, setup);
    stats[i] = run_stats(result);
    warnings[i] = result.conditioning_warnings;

    const std::string stem = hash + "_" + mode.name + "_seed" + std::to_string(seed);
    std::ostringstream csv;
    write_metrics_csv(csv, result, mode.name, seed);
    const auto csv_path = out / ("metrics_" + stem + ".csv");
    detail::write_text(csv_path, csv.str());
    written[i].push_back(csv_path);

    for (const auto& cp : result.checkpoints) {
      SplitParams shell = setup.global_params;
      set_shared(shell, cp.shared);
      auto j = params_to_json(shell);
      j.erase("head_W");
      j.erase("head_b");
      j["t"] = cp.t;
      const auto p = out / ("checkpoint_" + stem + "_t" + std::to_string(cp.t) + ".json");
      detail::write_text(p, j.dump(2) + "\n");
      written[i].push_back(p);
    }

    if (cfg.emit_oracle_diagnostics) {
      // Surrogate-bound reports need a signal at every step: only clients that
      // participated throughout are reported.
      const auto clients = init_clients(rc, setup.global_params, setup.task, setup.pretrain_prior);
      std::vector<SurrogateSums> sums;
      std::vector<SurrogateGapReport> gaps;
      double l1 = 0.0;
      std::size_t l1_n = 0;
      for (const auto& round : result.rounds)
        for (const auto& c : round.clients) {
          l1 += c.bbse_l1;
          ++l1_n;
        }
      if (rc.participants_per_step() == rc.num_clients) {
        for (std::size_t c = 0; c < rc.num_clients; ++c) {
          const auto trace = trace_from_run(result, c, setup.pretrain_prior, clients[c].prev_summary);
          sums.push_back(cumulative_surrogates(trace));
          gaps.push_back(surrogate_gap_report(trace));
        }
      }
      auto j = analysis_report_json(sums, gaps, std::nullopt);
      j["mean_bbse_l1"] = l1_n ? l1 / static_cast<double>(l1_n) : 0.0;
      j["bbse_ridge"] = rc.bbse_ridge;
      const auto p = out / ("analysis_" + stem + ".json");
      detail::write_text(p, j.dump(2) + "\n");
      written[i].push_back(p);
    }
  });
  for (auto& w : written) outcome.files.insert(outcome.files.end(), w.begin(), w.end());

  const std::string scenario = detail::scenario_label(cfg.run.scenario);
  for (std::size_t m = 0; m < cfg.modes.size(); ++m) {
    std::vector<double> acc, fin, eta, cum;
    std::size_t warn = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].mode != m) continue;
      acc.push_back(stats[i].mean_accuracy);
      fin.push_back(stats[i].final_accuracy);
      eta.push_back(stats[i].mean_eta);
      cum.push_back(stats[i].cum_S);
      warn += warnings[i];
    }
    const auto& mode = cfg.modes[m];
    nlohmann::json summary = {{"mode", mode.name},
                              {"config_hash", hash},
                              {"seeds", cfg.seeds},
                              {"mean_accuracy", detail::mean_std(acc)},
                              {"final_accuracy", detail::mean_std(fin)},
                              {"mean_eta", detail::mean_std(eta)},
                              {"cum_S", detail::mean_std(cum)},
                              {"bbse_ridge", cfg.run.bbse_ridge},
                              {"conditioning_warnings", warn}};
    const auto p = out / ("summary_" + hash + "_" + mode.name + ".json");
    detail::write_text(p, summary.dump(2) + "\n");
    outcome.files.push_back(p);
    const auto ms = detail::mean_std(acc);
    outcome.comparison.push_back({scenario, mode.name, ms["mean"], ms["std"], acc.size()});
  }

  auto cfg_path = out / ("config_" + hash + ".json");
  auto cfg_json = config_to_json(cfg);
  cfg_json.erase("output_dir");
  detail::write_text(cfg_path, cfg_json.dump(2) + "\n");
  outcome.files.push_back(cfg_path);
  auto cmp_path = out / ("comparison_" + hash + ".csv");
  detail::write_text(cmp_path, comparison_csv(outcome.comparison));
  outcome.files.push_back(cmp_path);
  return outcome;
}

/// Rebuilds the comparison table from the metrics CSVs found in `dir`.
/// The scenario label comes from the config_<hash>.json written alongside.
inline std::vector<ComparisonRow> report_from_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("metrics_", 0) == 0 && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  // (scenario, mode) -> per-seed mean accuracy
  std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
  std::map<std::string, std::string> scenario_of_hash;
  for (const auto& path : files) {
    const auto name = path.filename().string();
    const auto hash = name.substr(8, name.find('_', 8) - 8);
    if (!scenario_of_hash.count(hash)) {
      std::string label = "unknown";
      std::ifstream cf(fs::path(dir) / ("config_" + hash + ".json"));
      if (cf) {
        try {
          const auto j = nlohmann::json::parse(cf);
          label = detail::scenario_label(j.at("scenario").get<ScenarioConfig>());
        } catch (const std::exception&) {
        }
      }
      scenario_of_hash[hash] = label;
    }
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(f, line);
    if (line != kMetricsHeader) throw IoError(path.string() + ": unexpected header");
    std::string mode;
    double sum = 0.0;
    std::size_t n = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
      if (cols.size() != 11) throw IoError(path.string() + ": malformed row");
      mode = cols[2];
      sum += std::stod(cols[4]);
      ++n;
    }
    if (n == 0) continue;
    acc[{scenario_of_hash[hash], mode}].push_back(sum / static_cast<double>(n));
  }
  std::vector<ComparisonRow> rows;
  for (const auto& [key, xs] : acc) {
    const auto ms = detail::mean_std(xs);
    rows.push_back({key.first, key.second, ms["mean"], ms["std"], xs.size()});
  }
  return rows;
}

}  // namespace fedade
