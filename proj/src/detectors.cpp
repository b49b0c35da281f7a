#include "traceguard/detectors.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>
#include <thread>

#include "nlohmann/json.hpp"
#include "traceguard/errors.hpp"
#include "traceguard/prompts.hpp"

namespace traceguard {
namespace {

using ordered_json = nlohmann::ordered_json;

// Rethrows the in-flight exception with the failing step prefixed, keeping
// its dynamic type so callers can still tell timeouts from bad replies.
[[noreturn]] void rethrow_with_step(int step_index) {
  const std::string prefix = "step " + std::to_string(step_index) + ": ";
  try {
    throw;
  } catch (const JudgeTimeoutError& e) {
    throw JudgeTimeoutError(prefix + e.what());
  } catch (const JudgeUnavailableError& e) {
    throw JudgeUnavailableError(prefix + e.what());
  } catch (const TransportError& e) {
    throw TransportError(prefix + e.what());
  } catch (const VerdictParseError& e) {
    throw VerdictParseError(prefix + e.what(), e.raw_response());
  } catch (const OracleMisuseError& e) {
    throw OracleMisuseError(prefix + e.what());
  } catch (const UndefinedMetricError& e) {
    throw UndefinedMetricError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(prefix + e.what());
  } catch (const ParseError& e) {
    throw ParseError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

void assemble_flags(DetectionResult& r) {
  r.fired_levels.clear();
  r.explanations.clear();
  bool exec_fired = false;
  for (const StepVerdict& sv : r.step_verdicts) {
    if (sv.verdict.consistent) continue;
    exec_fired = true;
    r.explanations.push_back("step " + std::to_string(sv.step_index) + ": " +
                             sv.verdict.explanation);
  }
  if (exec_fired) r.fired_levels.push_back(DetectionLevel::Execution);
  if (r.planning_verdict && !r.planning_verdict->consistent) {
    r.fired_levels.push_back(DetectionLevel::Planning);
    r.explanations.push_back("planning: " + r.planning_verdict->explanation);
  }
  r.flagged = !r.fired_levels.empty();
}

ordered_json verdict_to_json(const Verdict& v) {
  ordered_json j;
  j["consistent"] = v.consistent;
  j["explanation"] = v.explanation;
  if (v.flagged_content) j["flagged_content"] = *v.flagged_content;
  if (!v.raw_response.empty()) j["raw_response"] = v.raw_response;
  return j;
}

const ordered_json& require_field(const ordered_json& obj, const char* key,
                                  const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError("detection record missing field " + path);
  }
  return *it;
}

Verdict verdict_from_json(const ordered_json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ParseError("detection record field " + path + " must be an object");
  }
  Verdict v;
  const ordered_json& consistent = require_field(j, "consistent",
                                                 path + ".consistent");
  if (!consistent.is_boolean()) {
    throw ParseError("detection record field " + path +
                     ".consistent must be a boolean");
  }
  v.consistent = consistent.get<bool>();
  const ordered_json& explanation = require_field(j, "explanation",
                                                  path + ".explanation");
  if (!explanation.is_string()) {
    throw ParseError("detection record field " + path +
                     ".explanation must be a string");
  }
  v.explanation = explanation.get<std::string>();
  if (auto it = j.find("flagged_content"); it != j.end()) {
    if (!it->is_string()) {
      throw ParseError("detection record field " + path +
                       ".flagged_content must be a string");
    }
    v.flagged_content = it->get<std::string>();
  }
  if (auto it = j.find("raw_response"); it != j.end()) {
    if (!it->is_string()) {
      throw ParseError("detection record field " + path +
                       ".raw_response must be a string");
    }
    v.raw_response = it->get<std::string>();
  }
  return v;
}

}  // namespace

std::string to_string(DetectionLevel level) {
  switch (level) {
    case DetectionLevel::Execution:
      return "execution";
    case DetectionLevel::Planning:
      return "planning";
  }
  throw ArgumentError("unknown detection level");
}

DetectionLevel detection_level_from_string(const std::string& name) {
  if (name == "execution") return DetectionLevel::Execution;
  if (name == "planning") return DetectionLevel::Planning;
  throw ParseError("unknown detection level \"" + name + "\"");
}

std::vector<StepVerdict> detect_execution(const CheckerContext& ctx,
                                          const CheckerKind& checker,
                                          const Trace& trace,
                                          size_t concurrency) {
  const size_t n = trace.steps.size();
  std::vector<StepVerdict> verdicts(n);

  auto check_one = [&](size_t i) {
    const Step& step = trace.steps[i];
    verdicts[i].step_index = step.index;
    verdicts[i].verdict = kappa_exec(ctx, checker, trace.instruction.domain,
                                     step.thought, step.action.flat);
  };

  if (concurrency <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) {
      try {
        check_one(i);
      } catch (...) {
        rethrow_with_step(trace.steps[i].index);
      }
    }
    return verdicts;
  }

  std::vector<std::exception_ptr> failures(n);
  std::atomic<size_t> cursor{0};
  auto worker = [&] {
    while (true) {
      size_t i = cursor.fetch_add(1);
      if (i >= n) return;
      try {
        check_one(i);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const size_t extra = std::min(concurrency, n) - 1;
  pool.reserve(extra);
  for (size_t t = 0; t < extra; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  for (size_t i = 0; i < n; ++i) {
    if (!failures[i]) continue;
    try {
      std::rethrow_exception(failures[i]);
    } catch (...) {
      rethrow_with_step(trace.steps[i].index);
    }
  }
  return verdicts;
}

std::string reconstruct_instruction(const CheckerContext& ctx,
                                    const Trace& trace) {
  if (trace.steps.empty()) {
    throw ArgumentError(
        "instruction reconstruction needs a trace with at least one step");
  }
  std::vector<std::string> thoughts;
  thoughts.reserve(trace.steps.size());
  for (const Step& step : trace.steps) thoughts.push_back(step.thought);
  const std::string prompt = render_reconstruct_prompt(
      ctx.prompts, trace.instruction.domain, thoughts);
  return strip_reconstruction(ctx.judge.complete(prompt));
}

std::pair<std::string, Verdict> detect_planning(const CheckerContext& ctx,
                                                const CheckerKind& checker,
                                                const Trace& trace) {
  std::string reconstructed = reconstruct_instruction(ctx, trace);
  Verdict verdict = kappa_plan(ctx, checker, trace.instruction.domain,
                               trace.instruction.text, reconstructed);
  return {std::move(reconstructed), std::move(verdict)};
}

DetectionResult run_two_level(const CheckerContext& ctx, const Trace& trace,
                              const DetectorConfig& config) {
  DetectionResult r;
  r.trace_id = trace.id;
  try {
    r.step_verdicts = detect_execution(ctx, config.exec_checker, trace,
                                       config.concurrency);
  } catch (const Error& e) {
    r.error = std::string("execution: ") + e.what();
    assemble_flags(r);
    return r;
  }
  try {
    auto [reconstructed, verdict] = detect_planning(ctx, config.plan_checker,
                                                    trace);
    r.reconstructed_instruction = std::move(reconstructed);
    r.planning_verdict = std::move(verdict);
  } catch (const Error& e) {
    r.error = std::string("planning: ") + e.what();
  }
  assemble_flags(r);
  return r;
}

std::vector<std::string> validate_detection_result(
    const DetectionResult& result) {
  std::vector<std::string> violations;
  if (result.trace_id.empty()) {
    violations.push_back("trace_id empty");
  }
  std::vector<DetectionLevel> sorted = result.fired_levels;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    violations.push_back("fired_levels holds duplicates");
  }
  if (sorted != result.fired_levels) {
    violations.push_back("fired_levels not sorted");
  }
  if (result.flagged != !result.fired_levels.empty()) {
    violations.push_back("flagged does not match fired_levels");
  }
  bool exec_inconsistent = false;
  for (const StepVerdict& sv : result.step_verdicts) {
    if (!sv.verdict.consistent) exec_inconsistent = true;
  }
  bool exec_fired = std::find(result.fired_levels.begin(),
                              result.fired_levels.end(),
                              DetectionLevel::Execution) !=
                    result.fired_levels.end();
  if (exec_fired != exec_inconsistent) {
    violations.push_back(
        "Execution level does not match the step verdicts");
  }
  bool plan_inconsistent = result.planning_verdict &&
                           !result.planning_verdict->consistent;
  bool plan_fired = std::find(result.fired_levels.begin(),
                              result.fired_levels.end(),
                              DetectionLevel::Planning) !=
                    result.fired_levels.end();
  if (plan_fired != plan_inconsistent) {
    violations.push_back(
        "Planning level does not match the planning verdict");
  }
  for (size_t i = 1; i < result.step_verdicts.size(); ++i) {
    if (result.step_verdicts[i - 1].step_index >=
        result.step_verdicts[i].step_index) {
      violations.push_back("step_verdicts out of order");
      break;
    }
  }
  return violations;
}

std::string serialize_detection_result(const DetectionResult& result) {
  ordered_json j;
  j["trace_id"] = result.trace_id;
  j["flagged"] = result.flagged;
  ordered_json levels = ordered_json::array();
  for (DetectionLevel level : result.fired_levels) {
    levels.push_back(to_string(level));
  }
  j["fired_levels"] = std::move(levels);
  ordered_json verdicts = ordered_json::array();
  for (const StepVerdict& sv : result.step_verdicts) {
    ordered_json js;
    js["step_index"] = sv.step_index;
    js["verdict"] = verdict_to_json(sv.verdict);
    verdicts.push_back(std::move(js));
  }
  j["step_verdicts"] = std::move(verdicts);
  if (result.reconstructed_instruction) {
    j["reconstructed_instruction"] = *result.reconstructed_instruction;
  }
  if (result.planning_verdict) {
    j["planning_verdict"] = verdict_to_json(*result.planning_verdict);
  }
  j["explanations"] = result.explanations;
  if (result.error) j["error"] = *result.error;
  return j.dump();
}

DetectionResult parse_detection_result(const std::string& record) {
  ordered_json j;
  try {
    j = ordered_json::parse(record);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("detection record is not valid JSON: ") +
                     e.what());
  }
  if (!j.is_object()) {
    throw ParseError("detection record must be a JSON object");
  }
  DetectionResult r;
  const ordered_json& id = require_field(j, "trace_id", "trace_id");
  if (!id.is_string()) {
    throw ParseError("detection record field trace_id must be a string");
  }
  r.trace_id = id.get<std::string>();
  const ordered_json& flagged = require_field(j, "flagged", "flagged");
  if (!flagged.is_boolean()) {
    throw ParseError("detection record field flagged must be a boolean");
  }
  r.flagged = flagged.get<bool>();
  const ordered_json& levels = require_field(j, "fired_levels",
                                             "fired_levels");
  if (!levels.is_array()) {
    throw ParseError("detection record field fired_levels must be an array");
  }
  for (const auto& level : levels) {
    if (!level.is_string()) {
      throw ParseError("fired_levels entries must be strings");
    }
    r.fired_levels.push_back(
        detection_level_from_string(level.get<std::string>()));
  }
  const ordered_json& verdicts = require_field(j, "step_verdicts",
                                               "step_verdicts");
  if (!verdicts.is_array()) {
    throw ParseError("detection record field step_verdicts must be an array");
  }
  for (size_t i = 0; i < verdicts.size(); ++i) {
    const std::string path = "step_verdicts[" + std::to_string(i) + "]";
    const ordered_json& js = verdicts[i];
    if (!js.is_object()) {
      throw ParseError("detection record field " + path +
                       " must be an object");
    }
    StepVerdict sv;
    const ordered_json& idx = require_field(js, "step_index",
                                            path + ".step_index");
    if (!idx.is_number_integer()) {
      throw ParseError("detection record field " + path +
                       ".step_index must be an integer");
    }
    sv.step_index = idx.get<int>();
    sv.verdict = verdict_from_json(require_field(js, "verdict",
                                                 path + ".verdict"),
                                   path + ".verdict");
    r.step_verdicts.push_back(std::move(sv));
  }
  if (auto it = j.find("reconstructed_instruction"); it != j.end()) {
    if (!it->is_string()) {
      throw ParseError(
          "detection record field reconstructed_instruction must be a "
          "string");
    }
    r.reconstructed_instruction = it->get<std::string>();
  }
  if (auto it = j.find("planning_verdict"); it != j.end()) {
    r.planning_verdict = verdict_from_json(*it, "planning_verdict");
  }
  const ordered_json& explanations = require_field(j, "explanations",
                                                   "explanations");
  if (!explanations.is_array()) {
    throw ParseError("detection record field explanations must be an array");
  }
  for (const auto& e : explanations) {
    if (!e.is_string()) {
      throw ParseError("explanations entries must be strings");
    }
    r.explanations.push_back(e.get<std::string>());
  }
  if (auto it = j.find("error"); it != j.end()) {
    if (!it->is_string()) {
      throw ParseError("detection record field error must be a string");
    }
    r.error = it->get<std::string>();
  }
  std::vector<std::string> violations = validate_detection_result(r);
  if (!violations.empty()) {
    std::string msg = "detection record violates invariants:";
    for (const std::string& v : violations) msg += " " + v + ";";
    throw ParseError(msg);
  }
  return r;
}

void write_results(const std::string& path,
                   const std::vector<DetectionResult>& results) {
  std::ofstream out(path);
  if (!out) {
    throw ArgumentError("cannot open " + path + " for writing");
  }
  for (const DetectionResult& r : results) {
    out << serialize_detection_result(r) << '\n';
  }
  if (!out.flush()) {
    throw ArgumentError("failed writing results to " + path);
  }
}

std::vector<DetectionResult> read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ArgumentError("cannot open " + path);
  }
  std::vector<DetectionResult> results;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      results.push_back(parse_detection_result(line));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return results;
}

}  // namespace traceguard
