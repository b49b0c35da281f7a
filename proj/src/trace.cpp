#include "traceguard/trace.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "nlohmann/json.hpp"
#include "traceguard/errors.hpp"

namespace traceguard {
namespace {

using ordered_json = nlohmann::ordered_json;

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c); });
}

const ordered_json& require_field(const ordered_json& obj, const char* key,
                                  const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError("schema error: missing required field '" + path + "'");
  }
  return *it;
}

std::string require_string(const ordered_json& obj, const char* key,
                           const std::string& path) {
  const ordered_json& v = require_field(obj, key, path);
  if (!v.is_string()) {
    throw ParseError("schema error: field '" + path + "' must be a string");
  }
  return v.get<std::string>();
}

}  // namespace

std::string to_string(TaskDomain domain) {
  switch (domain) {
    case TaskDomain::OS:
      return "os";
    case TaskDomain::DB:
      return "db";
    case TaskDomain::WebShop:
      return "webshop";
  }
  return "os";
}

TaskDomain domain_from_string(const std::string& name) {
  if (name == "os") return TaskDomain::OS;
  if (name == "db") return TaskDomain::DB;
  if (name == "webshop") return TaskDomain::WebShop;
  throw ConfigError("unknown task domain '" + name + "'");
}

std::string to_string(BackdoorMode mode) {
  switch (mode) {
    case BackdoorMode::None:
      return "none";
    case BackdoorMode::ActionOnly:
      return "action_only";
    case BackdoorMode::ThoughtAction:
      return "thought_action";
  }
  return "none";
}

BackdoorMode mode_from_string(const std::string& name) {
  if (name == "none") return BackdoorMode::None;
  if (name == "action_only") return BackdoorMode::ActionOnly;
  if (name == "thought_action") return BackdoorMode::ThoughtAction;
  throw ConfigError("unknown backdoor mode '" + name + "'");
}

std::string flatten_action(const std::string& verb, const std::string& payload) {
  if (payload.empty()) return verb;
  return verb + " " + payload;
}

ActionRecord make_action(std::string verb, std::string payload) {
  ActionRecord a;
  a.flat = flatten_action(verb, payload);
  a.verb = std::move(verb);
  a.payload = std::move(payload);
  return a;
}

std::vector<std::string> validate_trace(const Trace& trace) {
  std::vector<std::string> violations;
  if (is_blank(trace.instruction.text)) {
    violations.push_back("instruction text empty");
  }
  if (trace.steps.empty()) {
    violations.push_back("trace has no steps");
  }
  for (size_t i = 0; i < trace.steps.size(); ++i) {
    const Step& s = trace.steps[i];
    if (s.index != static_cast<int>(i)) {
      violations.push_back("non-contiguous step index at position " +
                           std::to_string(i));
    }
    if (s.action.flat != flatten_action(s.action.verb, s.action.payload)) {
      violations.push_back("action flat string mismatch at step " +
                           std::to_string(i));
    }
  }
  if (trace.ground_truth) {
    const GroundTruth& gt = *trace.ground_truth;
    if (gt.is_backdoored != (gt.mode != BackdoorMode::None)) {
      violations.push_back(
          "label inconsistency: is_backdoored does not match mode");
    }
    if (gt.is_backdoored != !gt.malicious_step_indices.empty()) {
      violations.push_back(
          "label inconsistency: is_backdoored does not match "
          "malicious_step_indices");
    }
    for (size_t i = 0; i < gt.malicious_step_indices.size(); ++i) {
      int idx = gt.malicious_step_indices[i];
      if (idx < 0 || idx >= static_cast<int>(trace.steps.size())) {
        violations.push_back("malicious step index out of range: " +
                             std::to_string(idx));
      }
      if (i > 0 && gt.malicious_step_indices[i - 1] >= idx) {
        violations.push_back("malicious step indices not strictly ascending");
      }
    }
  }
  return violations;
}

std::string serialize_trace(const Trace& trace) {
  ordered_json j;
  j["id"] = trace.id;
  ordered_json ins;
  ins["text"] = trace.instruction.text;
  ins["domain"] = to_string(trace.instruction.domain);
  j["instruction"] = std::move(ins);
  ordered_json steps = ordered_json::array();
  for (const Step& s : trace.steps) {
    ordered_json js;
    js["index"] = s.index;
    js["thought"] = s.thought;
    ordered_json ja;
    ja["verb"] = s.action.verb;
    ja["payload"] = s.action.payload;
    ja["flat"] = s.action.flat;
    js["action"] = std::move(ja);
    js["observation"] = s.observation;
    steps.push_back(std::move(js));
  }
  j["steps"] = std::move(steps);
  if (trace.ground_truth) {
    const GroundTruth& gt = *trace.ground_truth;
    ordered_json jg;
    jg["is_backdoored"] = gt.is_backdoored;
    jg["mode"] = to_string(gt.mode);
    std::vector<int> sorted = gt.malicious_step_indices;
    std::sort(sorted.begin(), sorted.end());
    jg["malicious_step_indices"] = sorted;
    if (gt.trigger_token) {
      jg["trigger_token"] = *gt.trigger_token;
    }
    j["ground_truth"] = std::move(jg);
  }
  return j.dump();
}

Trace parse_trace(const std::string& record) {
  ordered_json j;
  try {
    j = ordered_json::parse(record);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("malformed record at byte " + std::to_string(e.byte) +
                     ": " + e.what());
  }
  if (!j.is_object()) {
    throw ParseError("schema error: record must be a JSON object");
  }

  Trace t;
  t.id = require_string(j, "id", "id");

  const ordered_json& jins = require_field(j, "instruction", "instruction");
  if (!jins.is_object()) {
    throw ParseError("schema error: field 'instruction' must be an object");
  }
  t.instruction.text = require_string(jins, "text", "instruction.text");
  try {
    t.instruction.domain =
        domain_from_string(require_string(jins, "domain", "instruction.domain"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("schema error: ") + e.what());
  }

  const ordered_json& jsteps = require_field(j, "steps", "steps");
  if (!jsteps.is_array()) {
    throw ParseError("schema error: field 'steps' must be an array");
  }
  for (size_t i = 0; i < jsteps.size(); ++i) {
    const ordered_json& js = jsteps[i];
    const std::string base = "steps[" + std::to_string(i) + "]";
    if (!js.is_object()) {
      throw ParseError("schema error: field '" + base + "' must be an object");
    }
    Step s;
    const ordered_json& jidx = require_field(js, "index", base + ".index");
    if (!jidx.is_number_integer()) {
      throw ParseError("schema error: field '" + base +
                       ".index' must be an integer");
    }
    s.index = jidx.get<int>();
    s.thought = require_string(js, "thought", base + ".thought");
    const ordered_json& ja = require_field(js, "action", base + ".action");
    if (!ja.is_object()) {
      throw ParseError("schema error: field '" + base +
                       ".action' must be an object");
    }
    s.action.verb = require_string(ja, "verb", base + ".action.verb");
    s.action.payload = require_string(ja, "payload", base + ".action.payload");
    s.action.flat = require_string(ja, "flat", base + ".action.flat");
    s.observation = require_string(js, "observation", base + ".observation");
    t.steps.push_back(std::move(s));
  }

  if (auto it = j.find("ground_truth"); it != j.end()) {
    const ordered_json& jg = *it;
    if (!jg.is_object()) {
      throw ParseError("schema error: field 'ground_truth' must be an object");
    }
    GroundTruth gt;
    const ordered_json& jb =
        require_field(jg, "is_backdoored", "ground_truth.is_backdoored");
    if (!jb.is_boolean()) {
      throw ParseError(
          "schema error: field 'ground_truth.is_backdoored' must be a boolean");
    }
    gt.is_backdoored = jb.get<bool>();
    try {
      gt.mode = mode_from_string(require_string(jg, "mode", "ground_truth.mode"));
    } catch (const ConfigError& e) {
      throw ParseError(std::string("schema error: ") + e.what());
    }
    const ordered_json& jm = require_field(jg, "malicious_step_indices",
                                           "ground_truth.malicious_step_indices");
    if (!jm.is_array()) {
      throw ParseError(
          "schema error: field 'ground_truth.malicious_step_indices' must be "
          "an array");
    }
    for (const ordered_json& v : jm) {
      if (!v.is_number_integer()) {
        throw ParseError(
            "schema error: ground_truth.malicious_step_indices entries must "
            "be integers");
      }
      gt.malicious_step_indices.push_back(v.get<int>());
    }
    std::sort(gt.malicious_step_indices.begin(),
              gt.malicious_step_indices.end());
    if (auto jt = jg.find("trigger_token"); jt != jg.end()) {
      if (!jt->is_string()) {
        throw ParseError(
            "schema error: field 'ground_truth.trigger_token' must be a "
            "string");
      }
      gt.trigger_token = jt->get<std::string>();
    }
    t.ground_truth = std::move(gt);
  }
  return t;
}

std::vector<Trace> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open corpus file: " + path);
  }
  std::vector<Trace> traces;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    try {
      traces.push_back(parse_trace(line));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return traces;
}

void write_corpus(const std::string& path, const std::vector<Trace>& traces) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open output file: " + path);
  }
  for (const Trace& t : traces) {
    out << serialize_trace(t) << '\n';
  }
  if (!out) {
    throw Error("failed writing corpus file: " + path);
  }
}

}  // namespace traceguard
