#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "helpers.hpp"
#include "traceguard/errors.hpp"
#include "traceguard/prompts.hpp"

using namespace traceguard;

namespace {

PromptDoc tiny_doc(TaskKind task, TaskDomain domain) {
  PromptDoc doc;
  doc.task = task;
  doc.domain = domain;
  doc.preamble = "preamble";
  doc.answer_format = "format";
  if (task == TaskKind::Reconstruct) {
    doc.examples = {{"THOUGHTS:\n1. example", "INSTRUCTION: example", true}};
  } else {
    doc.examples = {{"in", "yes", true},
                    {"in", "no. bad. SUSPICIOUS: thing", false}};
  }
  return doc;
}

}  // namespace

TEST_CASE("default registries cover every task and domain") {
  PromptLibrary lib = PromptLibrary::load_default();
  for (TaskKind task :
       {TaskKind::ExecCheck, TaskKind::Reconstruct, TaskKind::EquivCheck}) {
    for (TaskDomain domain :
         {TaskDomain::OS, TaskDomain::DB, TaskDomain::WebShop}) {
      CHECK(lib.has(task, domain));
    }
  }
  // Bundled example counts: 3 exec, 1 reconstruct, 2 equivalence.
  CHECK(lib.doc(TaskKind::ExecCheck, TaskDomain::DB).examples.size() == 3);
  CHECK(lib.doc(TaskKind::Reconstruct, TaskDomain::DB).examples.size() == 1);
  CHECK(lib.doc(TaskKind::EquivCheck, TaskDomain::DB).examples.size() == 2);
}

TEST_CASE("rendering is deterministic and structured") {
  PromptLibrary lib = PromptLibrary::load_default();
  std::string a = render_exec_prompt(lib, TaskDomain::DB, "count rows",
                                     "sql SELECT COUNT(*) FROM t");
  std::string b = render_exec_prompt(lib, TaskDomain::DB, "count rows",
                                     "sql SELECT COUNT(*) FROM t");
  CHECK(a == b);
  CHECK(a.rfind(lib.doc(TaskKind::ExecCheck, TaskDomain::DB).preamble, 0) == 0);
  CHECK(a.find("Answer format: ") != std::string::npos);
  CHECK(a.find("### Example 1") != std::string::npos);
  CHECK(a.find("### Example 3") != std::string::npos);
  CHECK(a.find("\n### Query\n") != std::string::npos);
  CHECK(a.size() >= 8);
  CHECK(a.substr(a.size() - 8) == "\nAnswer:");
}

TEST_CASE("query recovery round-trips hostile content") {
  PromptLibrary lib = PromptLibrary::load_default();
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    std::string thought = tghelpers::random_text(rng);
    std::string action = tghelpers::random_text(rng);
    std::string prompt =
        render_exec_prompt(lib, tghelpers::random_domain(rng), thought, action);
    ExecQuery q = parse_exec_query(extract_query(prompt));
    REQUIRE(q.thought == thought);
    REQUIRE(q.action == action);
  }
  for (int i = 0; i < 100; ++i) {
    std::vector<std::string> thoughts;
    size_t n = 1 + rng.below(5);
    for (size_t k = 0; k < n; ++k) thoughts.push_back(tghelpers::random_text(rng));
    std::string prompt = render_reconstruct_prompt(
        lib, tghelpers::random_domain(rng), thoughts);
    REQUIRE(parse_reconstruct_query(extract_query(prompt)) == thoughts);
  }
  for (int i = 0; i < 100; ++i) {
    std::string original = tghelpers::random_text(rng);
    std::string reconstructed = tghelpers::random_text(rng);
    std::string prompt = render_equiv_prompt(lib, tghelpers::random_domain(rng),
                                             original, reconstructed);
    EquivQuery q = parse_equiv_query(extract_query(prompt));
    REQUIRE(q.original == original);
    REQUIRE(q.reconstructed == reconstructed);
  }
}

TEST_CASE("queries classify by task") {
  PromptLibrary lib = PromptLibrary::load_default();
  CHECK(classify_query(extract_query(render_exec_prompt(
            lib, TaskDomain::OS, "t", "a"))) == TaskKind::ExecCheck);
  CHECK(classify_query(extract_query(render_reconstruct_prompt(
            lib, TaskDomain::OS, {"t"}))) == TaskKind::Reconstruct);
  CHECK(classify_query(extract_query(render_equiv_prompt(
            lib, TaskDomain::OS, "a", "b"))) == TaskKind::EquivCheck);
  CHECK_FALSE(classify_query("nonsense").has_value());
}

TEST_CASE("missing registry for a domain is a configuration error") {
  PromptLibrary lib;
  lib.add(tiny_doc(TaskKind::ExecCheck, TaskDomain::DB));
  CHECK_NOTHROW(render_exec_prompt(lib, TaskDomain::DB, "t", "a"));
  CHECK_THROWS_AS(render_exec_prompt(lib, TaskDomain::OS, "t", "a"),
                  ConfigError);
}

TEST_CASE("registry invariants are enforced when docs are added") {
  PromptDoc no_negative = tiny_doc(TaskKind::ExecCheck, TaskDomain::OS);
  no_negative.examples = {{"in", "yes", true}};
  PromptLibrary lib;
  CHECK_THROWS_AS(lib.add(no_negative), ConfigError);

  PromptDoc unmarked = tiny_doc(TaskKind::EquivCheck, TaskDomain::OS);
  unmarked.examples = {{"in", "yes", true}, {"in", "no. bad", false}};
  CHECK_THROWS_AS(lib.add(unmarked), ConfigError);

  PromptDoc empty_reconstruct = tiny_doc(TaskKind::Reconstruct, TaskDomain::OS);
  empty_reconstruct.examples.clear();
  CHECK_THROWS_AS(lib.add(empty_reconstruct), ConfigError);

  PromptLibrary dup;
  dup.add(tiny_doc(TaskKind::ExecCheck, TaskDomain::OS));
  CHECK_THROWS_AS(dup.add(tiny_doc(TaskKind::ExecCheck, TaskDomain::OS)),
                  ConfigError);
}

TEST_CASE("empty inputs are argument errors") {
  PromptLibrary lib = PromptLibrary::load_default();
  CHECK_THROWS_AS(render_reconstruct_prompt(lib, TaskDomain::DB, {}),
                  ArgumentError);
  CHECK_THROWS_AS(render_exec_prompt(lib, TaskDomain::DB, "", "a"),
                  ArgumentError);
  CHECK_THROWS_AS(render_equiv_prompt(lib, TaskDomain::DB, "a", ""),
                  ArgumentError);
}

TEST_CASE("example limit keeps required polarities or fails loudly") {
  PromptLibrary lib = PromptLibrary::load_default();
  lib.set_example_limit(2);
  // Bundled exec registries order examples positive, negative, positive, so
  // a cap of two keeps one of each.
  std::string prompt = render_exec_prompt(lib, TaskDomain::DB, "t", "a");
  CHECK(prompt.find("### Example 2") != std::string::npos);
  CHECK(prompt.find("### Example 3") == std::string::npos);

  lib.set_example_limit(1);
  CHECK_THROWS_AS(render_exec_prompt(lib, TaskDomain::DB, "t", "a"),
                  ConfigError);
  CHECK_NOTHROW(render_reconstruct_prompt(lib, TaskDomain::DB, {"t"}));
}

TEST_CASE("field escaping round-trips and rejects bad escapes") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::string s = tghelpers::random_text(rng);
    std::string esc = escape_field(s);
    CHECK(esc.find('\n') == std::string::npos);
    CHECK(esc.find('\r') == std::string::npos);
    CHECK(unescape_field(esc) == s);
  }
  CHECK_THROWS_AS(unescape_field("trailing\\"), ParseError);
  CHECK_THROWS_AS(unescape_field("bad\\q"), ParseError);
}

TEST_CASE("reconstruction replies lose their wrapper") {
  CHECK(strip_reconstruction("INSTRUCTION: buy shoes") == "buy shoes");
  CHECK(strip_reconstruction("  INSTRUCTION:   buy shoes  ") == "buy shoes");
  CHECK(strip_reconstruction("buy shoes") == "buy shoes");
}
