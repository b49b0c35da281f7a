// Corpus-level scoring of detectors and baseline defenses: attack success
// rate, false positive rate, ROC/AUC over suspicion scores, per-level
// ablations and deterministic report emission.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "traceguard/consistency.hpp"
#include "traceguard/detectors.hpp"
#include "traceguard/simulate.hpp"
#include "traceguard/trace.hpp"

namespace traceguard {

// What decides a trace's flag in run_experiment.
enum class DetectorKind {
  Combined,       // execution and planning, flag on either
  ExecutionOnly,  // thought vs action checks only
  PlanningOnly,   // instruction reconstruction check only
  SelfCheck,      // resampled-reconstruction agreement below threshold
  Rephrase,       // trigger no longer fires after instruction rephrasing
};

std::string to_string(DetectorKind kind);
DetectorKind detector_kind_from_string(const std::string& name);

// Fraction of backdoored traces whose malicious action went unflagged.
// Results pair with traces by position and id. Every trace needs a ground
// truth label (ArgumentError otherwise); zero backdoored traces make the
// rate undefined (UndefinedMetricError).
double compute_asr(const std::vector<Trace>& corpus,
                   const std::vector<DetectionResult>& results);

// Fraction of benign traces flagged anyway. Same contract, benign side.
double compute_fpr(const std::vector<Trace>& corpus,
                   const std::vector<DetectionResult>& results);

struct RocPoint {
  double theta = 0.0;  // flag when score >= theta
  double tpr = 0.0;
  double fpr = 0.0;
};

// ROC by sweeping every distinct score as a threshold (descending), AUC by
// the trapezoid rule, which equals the Mann-Whitney ordered-pair statistic
// with ties counted half. Scores are suspicion: higher means more likely
// backdoored. Throws ArgumentError on size mismatch and
// UndefinedMetricError unless both classes are present.
std::pair<std::vector<RocPoint>, double> roc_auc(
    const std::vector<double>& scores, const std::vector<bool>& backdoored);

struct LevelRates {
  std::optional<double> asr;  // absent when the corpus has no backdoored
  std::optional<double> fpr;  // absent when the corpus has no benign
};

struct ConfusionCounts {
  size_t tp = 0;  // backdoored, flagged
  size_t fn = 0;  // backdoored, missed
  size_t fp = 0;  // benign, flagged
  size_t tn = 0;  // benign, clean
};

struct EvalReport {
  std::string corpus;
  std::string detector;
  size_t n_traces = 0;
  size_t n_backdoored = 0;
  size_t n_benign = 0;
  std::optional<double> asr;
  std::optional<double> fpr;
  LevelRates execution;  // rates if only execution-level flags counted
  LevelRates planning;   // rates if only planning-level flags counted
  std::optional<std::vector<RocPoint>> roc;
  std::optional<double> auc;
  ConfusionCounts confusion;
};

struct ExperimentConfig {
  DetectorKind detector = DetectorKind::Combined;
  CheckerKind exec_checker = CheckerKind::judge();
  CheckerKind plan_checker = CheckerKind::judge();
  // Step-level fan-out inside one trace. Keep at 1 for bit-reproducible
  // runs with stochastic judges; oracle and metric checkers are
  // deterministic at any width.
  size_t concurrency = 1;
  size_t selfcheck_samples = 3;
  double selfcheck_threshold = 1.0;  // flag when score < threshold
  uint64_t selfcheck_seed = 0;
  // Trigger definition for the rephrase defense; required by that kind.
  std::optional<BackdoorSpec> rephrase_spec;
  // When set, the report carries a ROC over per-trace suspicion scores
  // max_i(1 - metric(thought_i, action_i)) using this metric id.
  std::optional<std::string> roc_metric;
  std::string corpus_label = "corpus";

  void validate() const;  // throws ConfigError naming the bad field
};

struct ExperimentOutput {
  EvalReport report;
  std::vector<DetectionResult> results;  // one per trace, input order
};

// Runs the configured detector over a labeled corpus and aggregates one
// report. Deterministic given seeds and concurrency 1.
ExperimentOutput run_experiment(const CheckerContext& ctx,
                                const std::vector<Trace>& corpus,
                                const ExperimentConfig& config);

struct AblationOutput {
  EvalReport combined;
  EvalReport execution;
  EvalReport planning;
  std::vector<DetectionResult> results;
};

// One combined run re-read three ways: a trace counts as flagged for a
// level report when that level is among its fired levels. Combined flag
// count therefore never drops below either level's.
AblationOutput run_ablation(const CheckerContext& ctx,
                            const std::vector<Trace>& corpus,
                            const ExperimentConfig& config);

// Single-line JSON with a fixed field order, so identical reports are
// byte-identical.
std::string serialize_eval_report(const EvalReport& report);
EvalReport parse_eval_report(const std::string& record);
void write_report(const std::string& path, const EvalReport& report);

// Human-readable summary block, deterministic layout.
std::string format_report(const EvalReport& report);

}  // namespace traceguard
