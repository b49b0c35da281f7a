#include "traceguard/prompts.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nlohmann/json.hpp"
#include "traceguard/data_dir.hpp"
#include "traceguard/errors.hpp"

namespace traceguard {
namespace {

constexpr const char kQueryMarker[] = "\n### Query\n";
constexpr const char kAnswerCue[] = "\nAnswer:";
constexpr const char kSuspiciousMarker[] = "SUSPICIOUS:";

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start <= s.size()) {
    size_t nl = s.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(s.substr(start));
      break;
    }
    lines.push_back(s.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

void validate_doc(const PromptDoc& doc) {
  const std::string where =
      to_string(doc.task) + "/" + to_string(doc.domain);
  if (trim(doc.preamble).empty()) {
    throw ConfigError("registry " + where + ": preamble empty");
  }
  if (trim(doc.answer_format).empty()) {
    throw ConfigError("registry " + where + ": answer format empty");
  }
  size_t positives = 0;
  size_t negatives = 0;
  for (const InContextExample& ex : doc.examples) {
    if (ex.positive) {
      ++positives;
    } else {
      ++negatives;
      if (doc.task == TaskKind::EquivCheck &&
          ex.answer.find(kSuspiciousMarker) == std::string::npos) {
        throw ConfigError("registry " + where +
                          ": negative example lacks a named suspicious "
                          "behavior (SUSPICIOUS: marker)");
      }
    }
  }
  if (doc.task == TaskKind::Reconstruct) {
    if (doc.examples.empty()) {
      throw ConfigError("registry " + where + ": needs at least one example");
    }
  } else if (positives == 0 || negatives == 0) {
    throw ConfigError("registry " + where +
                      ": needs at least one positive and one negative "
                      "example");
  }
}

// Renders preamble, format, the selected examples and the query block.
std::string render(const PromptLibrary& lib, TaskKind task, TaskDomain domain,
                   const std::string& query) {
  const PromptDoc& doc = lib.doc(task, domain);
  size_t count = doc.examples.size();
  if (lib.example_limit() > 0 && lib.example_limit() < count) {
    count = lib.example_limit();
  }
  if (count < doc.examples.size()) {
    // The cap must not drop a required polarity.
    size_t positives = 0;
    size_t negatives = 0;
    for (size_t i = 0; i < count; ++i) {
      (doc.examples[i].positive ? positives : negatives) += 1;
    }
    if (task == TaskKind::Reconstruct) {
      if (count == 0) {
        throw ConfigError("example limit drops every reconstruction example");
      }
    } else if (positives == 0 || negatives == 0) {
      throw ConfigError(
          "example limit drops a required example polarity for " +
          to_string(task) + "/" + to_string(domain));
    }
  }

  std::string out = doc.preamble;
  out += "\n\nAnswer format: ";
  out += doc.answer_format;
  out += "\n\n";
  for (size_t i = 0; i < count; ++i) {
    out += "### Example " + std::to_string(i + 1) + "\n";
    out += doc.examples[i].input;
    out += "\nAnswer: ";
    out += doc.examples[i].answer;
    out += "\n\n";
  }
  out += "### Query\n";
  out += query;
  out += kAnswerCue;
  return out;
}

std::string strip_label(const std::string& line, const char* label,
                        const char* what) {
  size_t len = std::strlen(label);
  if (line.compare(0, len, label) != 0) {
    throw ParseError(std::string("query line missing '") + label +
                     "' label in " + what + " query");
  }
  return unescape_field(line.substr(len));
}

PromptDoc doc_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError("registry file " + path + ": not a JSON object");
  }
  auto str_field = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) {
      throw ConfigError("registry file " + path + ": missing string field '" +
                        key + "'");
    }
    return it->get<std::string>();
  };
  PromptDoc doc;
  doc.task = task_kind_from_string(str_field("task"));
  doc.domain = domain_from_string(str_field("domain"));
  doc.preamble = str_field("preamble");
  doc.answer_format = str_field("answer_format");
  auto ex = j.find("examples");
  if (ex == j.end() || !ex->is_array()) {
    throw ConfigError("registry file " + path +
                      ": missing array field 'examples'");
  }
  for (const nlohmann::json& je : *ex) {
    if (!je.is_object() || !je.contains("input") || !je.contains("answer") ||
        !je.contains("positive") || !je["input"].is_string() ||
        !je["answer"].is_string() || !je["positive"].is_boolean()) {
      throw ConfigError("registry file " + path +
                        ": each example needs string 'input', string "
                        "'answer' and boolean 'positive'");
    }
    doc.examples.push_back(InContextExample{je["input"].get<std::string>(),
                                            je["answer"].get<std::string>(),
                                            je["positive"].get<bool>()});
  }
  return doc;
}

}  // namespace

std::string to_string(TaskKind task) {
  switch (task) {
    case TaskKind::ExecCheck:
      return "exec_check";
    case TaskKind::Reconstruct:
      return "reconstruct";
    case TaskKind::EquivCheck:
      return "equiv_check";
  }
  return "exec_check";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "exec_check") return TaskKind::ExecCheck;
  if (name == "reconstruct") return TaskKind::Reconstruct;
  if (name == "equiv_check") return TaskKind::EquivCheck;
  throw ConfigError("unknown task kind '" + name + "'");
}

PromptLibrary PromptLibrary::load(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw ConfigError("prompt registry directory not found: " + dir);
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  PromptLibrary lib;
  for (const fs::path& path : files) {
    std::ifstream in(path);
    if (!in) {
      throw ConfigError("cannot read registry file: " + path.string());
    }
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("registry file " + path.string() +
                        ": invalid JSON: " + e.what());
    }
    lib.add(doc_from_json(j, path.string()));
  }
  return lib;
}

PromptLibrary PromptLibrary::load_default() {
  return load(default_data_dir() + "/prompts");
}

void PromptLibrary::add(PromptDoc doc) {
  validate_doc(doc);
  if (has(doc.task, doc.domain)) {
    throw ConfigError("duplicate prompt registry for " + to_string(doc.task) +
                      "/" + to_string(doc.domain));
  }
  docs_.push_back(std::move(doc));
}

const PromptDoc& PromptLibrary::doc(TaskKind task, TaskDomain domain) const {
  for (const PromptDoc& d : docs_) {
    if (d.task == task && d.domain == domain) return d;
  }
  throw ConfigError("no prompt registry for " + to_string(task) + "/" +
                    to_string(domain));
}

bool PromptLibrary::has(TaskKind task, TaskDomain domain) const {
  for (const PromptDoc& d : docs_) {
    if (d.task == task && d.domain == domain) return true;
  }
  return false;
}

std::string render_exec_prompt(const PromptLibrary& lib, TaskDomain domain,
                               const std::string& thought,
                               const std::string& action) {
  if (thought.empty() || action.empty()) {
    throw ArgumentError("exec check needs a non-empty thought and action");
  }
  std::string query = "THOUGHT: " + escape_field(thought) +
                      "\nACTION: " + escape_field(action);
  return render(lib, TaskKind::ExecCheck, domain, query);
}

std::string render_reconstruct_prompt(const PromptLibrary& lib,
                                      TaskDomain domain,
                                      const std::vector<std::string>& thoughts) {
  if (thoughts.empty()) {
    throw ArgumentError("reconstruction needs at least one thought");
  }
  std::string query = "THOUGHTS:";
  for (size_t i = 0; i < thoughts.size(); ++i) {
    query += "\n" + std::to_string(i + 1) + ". " + escape_field(thoughts[i]);
  }
  return render(lib, TaskKind::Reconstruct, domain, query);
}

std::string render_equiv_prompt(const PromptLibrary& lib, TaskDomain domain,
                                const std::string& original,
                                const std::string& reconstructed) {
  if (original.empty() || reconstructed.empty()) {
    throw ArgumentError(
        "equivalence check needs non-empty original and reconstructed "
        "instructions");
  }
  std::string query = "ORIGINAL: " + escape_field(original) +
                      "\nRECONSTRUCTED: " + escape_field(reconstructed);
  return render(lib, TaskKind::EquivCheck, domain, query);
}

std::string escape_field(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '\\':
        out += "\\\\";
        break;
      case '\n':
        out += "\\n";
        break;
      case '\r':
        out += "\\r";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string unescape_field(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out += text[i];
      continue;
    }
    if (i + 1 >= text.size()) {
      throw ParseError("dangling escape in query field");
    }
    switch (text[++i]) {
      case '\\':
        out += '\\';
        break;
      case 'n':
        out += '\n';
        break;
      case 'r':
        out += '\r';
        break;
      default:
        throw ParseError("unknown escape in query field");
    }
  }
  return out;
}

std::string extract_query(const std::string& prompt) {
  size_t mark = prompt.rfind(kQueryMarker);
  if (mark == std::string::npos) {
    throw ParseError("prompt has no query section");
  }
  size_t cue_len = std::strlen(kAnswerCue);
  if (prompt.size() < cue_len ||
      prompt.compare(prompt.size() - cue_len, cue_len, kAnswerCue) != 0) {
    throw ParseError("prompt missing trailing answer cue");
  }
  size_t begin = mark + std::strlen(kQueryMarker);
  size_t end = prompt.size() - cue_len;
  if (end < begin) {
    throw ParseError("prompt query section malformed");
  }
  return prompt.substr(begin, end - begin);
}

std::optional<TaskKind> classify_query(const std::string& query) {
  if (query.rfind("THOUGHT: ", 0) == 0) return TaskKind::ExecCheck;
  if (query.rfind("THOUGHTS:", 0) == 0) return TaskKind::Reconstruct;
  if (query.rfind("ORIGINAL: ", 0) == 0) return TaskKind::EquivCheck;
  return std::nullopt;
}

ExecQuery parse_exec_query(const std::string& query) {
  std::vector<std::string> lines = split_lines(query);
  if (lines.size() != 2) {
    throw ParseError("exec query must have exactly two lines");
  }
  ExecQuery q;
  q.thought = strip_label(lines[0], "THOUGHT: ", "exec");
  q.action = strip_label(lines[1], "ACTION: ", "exec");
  return q;
}

std::vector<std::string> parse_reconstruct_query(const std::string& query) {
  std::vector<std::string> lines = split_lines(query);
  if (lines.empty() || lines[0] != "THOUGHTS:") {
    throw ParseError("reconstruct query missing THOUGHTS: header");
  }
  std::vector<std::string> thoughts;
  for (size_t i = 1; i < lines.size(); ++i) {
    std::string want = std::to_string(i) + ". ";
    if (lines[i].compare(0, want.size(), want) != 0) {
      throw ParseError("reconstruct query line " + std::to_string(i) +
                       " not numbered as expected");
    }
    thoughts.push_back(unescape_field(lines[i].substr(want.size())));
  }
  if (thoughts.empty()) {
    throw ParseError("reconstruct query lists no thoughts");
  }
  return thoughts;
}

EquivQuery parse_equiv_query(const std::string& query) {
  std::vector<std::string> lines = split_lines(query);
  if (lines.size() != 2) {
    throw ParseError("equivalence query must have exactly two lines");
  }
  EquivQuery q;
  q.original = strip_label(lines[0], "ORIGINAL: ", "equivalence");
  q.reconstructed = strip_label(lines[1], "RECONSTRUCTED: ", "equivalence");
  return q;
}

std::string strip_reconstruction(const std::string& reply) {
  std::string text = trim(reply);
  size_t len = std::strlen(kReconstructionPrefix);
  if (text.compare(0, len, kReconstructionPrefix) == 0) {
    return trim(text.substr(len));
  }
  return text;
}

}  // namespace traceguard
