// Prompt construction for the three judge tasks, plus exact recovery of the
// query section from a rendered prompt.
//
// Rendered layout:
//
//   <preamble>
//
//   Answer format: <answer_format>
//
//   ### Example 1
//   <example input>
//   Answer: <example answer>
//   ...
//
//   ### Query
//   <query lines>
//   Answer:
//
// The query section sits between the last "\n### Query\n" marker and the
// trailing "\nAnswer:" cue. Every caller-supplied field inside the query is
// escaped onto a single physical line (backslash, newline and carriage
// return become \\, \n, \r), which is what makes recovery exact for
// arbitrary content.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "traceguard/trace.hpp"

namespace traceguard {

enum class TaskKind { ExecCheck, Reconstruct, EquivCheck };

std::string to_string(TaskKind task);
TaskKind task_kind_from_string(const std::string& name);

struct InContextExample {
  std::string input;
  std::string answer;
  bool positive = true;
  bool operator==(const InContextExample&) const = default;
};

struct PromptDoc {
  TaskKind task = TaskKind::ExecCheck;
  TaskDomain domain = TaskDomain::OS;
  std::string preamble;
  std::string answer_format;
  std::vector<InContextExample> examples;
};

// Holds one PromptDoc per (task, domain). Docs are validated when added:
// ExecCheck and EquivCheck need at least one positive and one negative
// example, Reconstruct needs at least one example, and negative EquivCheck
// examples must name the suspicious content via the "SUSPICIOUS:" marker.
class PromptLibrary {
 public:
  // Reads every *.json registry file in the directory.
  static PromptLibrary load(const std::string& dir);
  // Loads from <default data dir>/prompts.
  static PromptLibrary load_default();

  void add(PromptDoc doc);
  const PromptDoc& doc(TaskKind task, TaskDomain domain) const;
  bool has(TaskKind task, TaskDomain domain) const;

  // Caps how many in-context examples a render uses (first N in registry
  // order); 0 means all. Rendering fails if the cap drops a required
  // polarity.
  void set_example_limit(size_t limit) { example_limit_ = limit; }
  size_t example_limit() const { return example_limit_; }

 private:
  std::vector<PromptDoc> docs_;
  size_t example_limit_ = 0;
};

std::string render_exec_prompt(const PromptLibrary& lib, TaskDomain domain,
                               const std::string& thought,
                               const std::string& action);
std::string render_reconstruct_prompt(const PromptLibrary& lib,
                                      TaskDomain domain,
                                      const std::vector<std::string>& thoughts);
std::string render_equiv_prompt(const PromptLibrary& lib, TaskDomain domain,
                                const std::string& original,
                                const std::string& reconstructed);

// Single-line field escaping used inside query sections.
std::string escape_field(const std::string& text);
std::string unescape_field(const std::string& text);

// Recovers the raw query block of a rendered prompt. Throws ParseError if
// the prompt lacks the query marker or the trailing answer cue.
std::string extract_query(const std::string& prompt);

// Identifies which task a recovered query block belongs to.
std::optional<TaskKind> classify_query(const std::string& query);

struct ExecQuery {
  std::string thought;
  std::string action;
};

struct EquivQuery {
  std::string original;
  std::string reconstructed;
};

ExecQuery parse_exec_query(const std::string& query);
std::vector<std::string> parse_reconstruct_query(const std::string& query);
EquivQuery parse_equiv_query(const std::string& query);

// Reconstruction replies are expected to carry this wrapper.
inline constexpr const char kReconstructionPrefix[] = "INSTRUCTION:";

// Removes the reply wrapper if present and trims whitespace.
std::string strip_reconstruction(const std::string& reply);

}  // namespace traceguard
