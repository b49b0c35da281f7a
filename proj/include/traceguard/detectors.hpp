// Two-level trace detection: every step's thought-action pair is checked,
// then the instruction reconstructed from the full thought trajectory is
// checked against the original. A backdoor that hides its intent from the
// thoughts fails the first check; one that declares it fails the second.
#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "traceguard/consistency.hpp"
#include "traceguard/trace.hpp"

namespace traceguard {

enum class DetectionLevel { Execution, Planning };

std::string to_string(DetectionLevel level);
DetectionLevel detection_level_from_string(const std::string& name);

struct StepVerdict {
  int step_index = 0;
  Verdict verdict;
};

// Outcome for one trace. An errored result keeps whatever was decided
// before the failure; consumers must treat it as needing review, never as
// a clean pass.
struct DetectionResult {
  std::string trace_id;
  bool flagged = false;
  std::vector<DetectionLevel> fired_levels;  // sorted, unique
  std::vector<StepVerdict> step_verdicts;    // one per step, in step order
  std::optional<std::string> reconstructed_instruction;
  std::optional<Verdict> planning_verdict;
  std::vector<std::string> explanations;  // one per inconsistent verdict
  std::optional<std::string> error;
};

struct DetectorConfig {
  CheckerKind exec_checker = CheckerKind::judge();
  CheckerKind plan_checker = CheckerKind::judge();
  // Step checks fan out across up to this many threads and are reassembled
  // in step order. Keep at 1 when the judge's replies depend on call order
  // (the noisy judge draws from one stream).
  size_t concurrency = 1;
};

// Checks thought vs action for every step, in step order, without stopping
// at the first inconsistency. Judge errors abort the scan and are rethrown
// with the failing step index prefixed; under concurrency the smallest
// failing index wins.
std::vector<StepVerdict> detect_execution(const CheckerContext& ctx,
                                          const CheckerKind& checker,
                                          const Trace& trace,
                                          size_t concurrency = 1);

// Asks the judge to rebuild the instruction from all thoughts in order and
// strips the answer-format wrapper. The trace must have at least one step.
std::string reconstruct_instruction(const CheckerContext& ctx,
                                    const Trace& trace);

// Reconstruction plus one original-vs-reconstructed equivalence check.
std::pair<std::string, Verdict> detect_planning(const CheckerContext& ctx,
                                                const CheckerKind& checker,
                                                const Trace& trace);

// Runs both levels (planning runs even when execution already fired) and
// assembles the flag, the fired levels and the explanations. Judge failures
// yield an errored result instead of propagating.
DetectionResult run_two_level(const CheckerContext& ctx, const Trace& trace,
                              const DetectorConfig& config);

// Structural invariant check; returns human-readable violations.
std::vector<std::string> validate_detection_result(
    const DetectionResult& result);

// Line-delimited JSON records, same shape discipline as traces.
std::string serialize_detection_result(const DetectionResult& result);
DetectionResult parse_detection_result(const std::string& record);
void write_results(const std::string& path,
                   const std::vector<DetectionResult>& results);
std::vector<DetectionResult> read_results(const std::string& path);

}  // namespace traceguard
