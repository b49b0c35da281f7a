// Trace data model: instructions, reasoning steps, ground-truth labels and
// the line-delimited JSON wire format shared by every tool in this repo.
#pragma once

#include <optional>
#include <string>
#include <vector>

namespace traceguard {

enum class TaskDomain { OS, DB, WebShop };

std::string to_string(TaskDomain domain);
TaskDomain domain_from_string(const std::string& name);

enum class BackdoorMode { None, ActionOnly, ThoughtAction };

std::string to_string(BackdoorMode mode);
BackdoorMode mode_from_string(const std::string& name);

struct Instruction {
  std::string text;
  TaskDomain domain = TaskDomain::OS;
  bool operator==(const Instruction&) const = default;
};

// Canonical one-string rendering of an action: "verb payload".
std::string flatten_action(const std::string& verb, const std::string& payload);

struct ActionRecord {
  std::string verb;
  std::string payload;
  std::string flat;  // must equal flatten_action(verb, payload)
  bool operator==(const ActionRecord&) const = default;
};

ActionRecord make_action(std::string verb, std::string payload);

struct Step {
  int index = 0;
  std::string thought;
  ActionRecord action;
  std::string observation;
  bool operator==(const Step&) const = default;
};

struct GroundTruth {
  bool is_backdoored = false;
  BackdoorMode mode = BackdoorMode::None;
  std::vector<int> malicious_step_indices;  // kept sorted ascending
  std::optional<std::string> trigger_token;
  bool operator==(const GroundTruth&) const = default;
};

struct Trace {
  std::string id;
  Instruction instruction;
  std::vector<Step> steps;
  std::optional<GroundTruth> ground_truth;  // absent on unlabeled traces
  bool operator==(const Trace&) const = default;
};

// Returns every invariant violation found; an empty list means valid.
std::vector<std::string> validate_trace(const Trace& trace);

// One JSON document per trace, single line, fixed field order.
std::string serialize_trace(const Trace& trace);
Trace parse_trace(const std::string& record);

// Whole-file helpers over the line-delimited format.
std::vector<Trace> read_corpus(const std::string& path);
void write_corpus(const std::string& path, const std::vector<Trace>& traces);

}  // namespace traceguard
