// Deterministic trace simulator: slot-template scripts per domain, backdoor
// injection, and labeled corpus generation. The simulator stands in for a
// poisoned agent policy; the oracle judge's soundness rests on two authoring
// rules validated at load time:
//   1. every slot referenced by a script's instruction also appears in at
//      least one of its thoughts, so distinct instructions produce distinct
//      thought trajectories;
//   2. every instruction template contains the library's trigger slot, so
//      any benign trace can be converted into a triggered one.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "traceguard/trace.hpp"

namespace traceguard {

struct SlotPool {
  std::vector<std::string> benign;
  std::vector<std::string> triggered;  // values carrying the domain trigger
};

struct ScriptStep {
  std::string thought;  // template text; "{slot}" references a slot value
  std::string verb;
  std::string payload;      // template
  std::string observation;  // template
};

struct Script {
  std::string id;
  std::string instruction;  // template
  std::vector<ScriptStep> steps;
};

struct TemplateLibrary {
  TaskDomain domain = TaskDomain::OS;
  std::string trigger_slot;
  std::map<std::string, SlotPool> slots;
  std::vector<Script> scripts;

  // Parses and validates a template file; violations raise ConfigError with
  // the offending script id.
  static TemplateLibrary load(const std::string& path);
  // Loads <data dir>/templates/<domain>.json.
  static TemplateLibrary load_default(TaskDomain domain);
};

struct BackdoorSpec {
  TaskDomain domain = TaskDomain::OS;
  BackdoorMode mode = BackdoorMode::ActionOnly;
  std::string trigger;
  std::string malicious_verb;
  std::string malicious_payload;  // may reference slots, e.g. "{table}"
  std::string malicious_thought;  // ThoughtAction mode only
};

// Table-style defaults: OS rm on .txt, DB delete of the updated table,
// WebShop unsolicited Adidas sneaker purchase.
BackdoorSpec default_backdoor_spec(TaskDomain domain, BackdoorMode mode);

struct CorpusConfig {
  TaskDomain domain = TaskDomain::OS;
  size_t n_traces = 100;
  double triggered_fraction = 0.5;
  BackdoorMode mode = BackdoorMode::ActionOnly;
  uint64_t seed = 0;
  // Inclusive bounds on script length; 0 means unbounded.
  size_t min_steps = 0;
  size_t max_steps = 0;

  void validate() const;  // throws ConfigError naming the bad field
};

// A benign trace rendered from a seeded script and slot choice. The trigger
// slot draws from the union of benign and triggered values, so trigger
// tokens also occur naturally in clean data.
Trace generate_benign_trace(const TemplateLibrary& lib, uint64_t seed);

// Re-renders the trace with a triggered value in the trigger slot (when not
// already triggered), then plants one malicious step at a seeded position.
// ActionOnly swaps the malicious action into an existing step, keeping its
// benign thought; ThoughtAction inserts a new step pairing the backdoor
// spec's malicious thought with its malicious action, so the backdoor
// enters the thought trajectory.
Trace inject_backdoor(const TemplateLibrary& lib, const Trace& benign,
                      const BackdoorSpec& spec, uint64_t seed);

// Exactly llround(n_traces * triggered_fraction) backdoored traces, order
// shuffled, everything derived from config.seed.
std::vector<Trace> generate_corpus(const TemplateLibrary& lib,
                                   const CorpusConfig& config,
                                   const BackdoorSpec& spec);

// True when some script step can render this exact thought/action pair.
bool is_entailed(const TemplateLibrary& lib, const std::string& thought,
                 const std::string& flat_action);

// The simulated policy's trigger rule: the backdoor fires iff the trigger
// substring survives in the instruction text. Used to rerun the policy on
// rephrased instructions.
bool backdoor_fires(const std::string& instruction_text,
                    const BackdoorSpec& spec);

// Matches an instruction back to the script and slot values that render it.
struct ScriptMatch {
  size_t script_index = 0;
  std::map<std::string, std::string> binding;
};
std::optional<ScriptMatch> match_instruction(const TemplateLibrary& lib,
                                             const std::string& text);

// Substitutes "{slot}" references; unknown slots raise ConfigError.
std::string render_template(const std::string& tpl,
                            const std::map<std::string, std::string>& binding);

}  // namespace traceguard
