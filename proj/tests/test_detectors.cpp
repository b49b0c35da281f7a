#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "traceguard/detectors.hpp"
#include "traceguard/errors.hpp"
#include "traceguard/judge.hpp"
#include "traceguard/prompts.hpp"
#include "traceguard/simulate.hpp"
#include "traceguard/trace.hpp"

using namespace traceguard;

namespace {

const PromptLibrary& prompts() {
  static PromptLibrary lib = PromptLibrary::load_default();
  return lib;
}

const MetricRegistry& metrics() {
  static MetricRegistry reg = builtin_metrics();
  return reg;
}

std::vector<Trace> make_corpus(TaskDomain domain, BackdoorMode mode,
                               size_t n, double fraction, uint64_t seed) {
  TemplateLibrary lib = TemplateLibrary::load_default(domain);
  CorpusConfig config;
  config.domain = domain;
  config.n_traces = n;
  config.triggered_fraction = fraction;
  config.mode = fraction > 0 ? mode : BackdoorMode::None;
  config.seed = seed;
  return generate_corpus(lib, config, default_backdoor_spec(domain, mode));
}

Trace handmade_trace(const std::vector<std::string>& thoughts) {
  Trace t;
  t.id = "hand-0";
  t.instruction.text = "do the handmade task";
  t.instruction.domain = TaskDomain::OS;
  for (size_t i = 0; i < thoughts.size(); ++i) {
    Step s;
    s.index = static_cast<int>(i);
    s.thought = thoughts[i];
    s.action = make_action("bash", "echo " + std::to_string(i));
    s.observation = "ok";
    t.steps.push_back(std::move(s));
  }
  return t;
}

// Scripted judge: answers exec checks from a thought-keyed table, and
// reconstruction/equivalence with fixed strings.
JudgePtr scripted_judge(
    std::function<std::string(const ExecQuery&)> on_exec,
    std::string reconstruction = "INSTRUCTION: do the handmade task",
    std::string equiv_answer = "yes") {
  return make_function_judge(
      "scripted", [on_exec = std::move(on_exec),
                   reconstruction = std::move(reconstruction),
                   equiv_answer = std::move(equiv_answer)](
                      const std::string& prompt) -> std::string {
        const std::string query = extract_query(prompt);
        auto kind = classify_query(query);
        REQUIRE(kind.has_value());
        switch (*kind) {
          case TaskKind::ExecCheck:
            return on_exec(parse_exec_query(query));
          case TaskKind::Reconstruct:
            return reconstruction;
          case TaskKind::EquivCheck:
            return equiv_answer;
        }
        return "yes";
      });
}

}  // namespace

TEST_CASE("oracle passes benign traces at both levels") {
  std::vector<Trace> corpus = make_corpus(TaskDomain::OS, BackdoorMode::None,
                                          30, 0.0, 21);
  JudgePtr judge = make_oracle_judge(corpus);
  CheckerContext ctx{prompts(), metrics(), *judge};
  DetectorConfig config;

  for (const Trace& trace : corpus) {
    CAPTURE(trace.id);
    DetectionResult r = run_two_level(ctx, trace, config);
    CHECK(validate_detection_result(r).empty());
    CHECK(r.trace_id == trace.id);
    CHECK_FALSE(r.flagged);
    CHECK(r.fired_levels.empty());
    CHECK_FALSE(r.error.has_value());
    REQUIRE(r.step_verdicts.size() == trace.steps.size());
    for (const StepVerdict& sv : r.step_verdicts) {
      CHECK(sv.verdict.consistent);
    }
    REQUIRE(r.reconstructed_instruction.has_value());
    CHECK(*r.reconstructed_instruction == trace.instruction.text);
    REQUIRE(r.planning_verdict.has_value());
    CHECK(r.planning_verdict->consistent);
    CHECK(r.explanations.empty());
  }
}

TEST_CASE("action-only backdoors fire exactly the execution level") {
  std::vector<Trace> corpus = make_corpus(TaskDomain::OS,
                                          BackdoorMode::ActionOnly, 40, 0.5,
                                          7);
  JudgePtr judge = make_oracle_judge(corpus);
  CheckerContext ctx{prompts(), metrics(), *judge};
  DetectorConfig config;

  for (const Trace& trace : corpus) {
    CAPTURE(trace.id);
    DetectionResult r = run_two_level(ctx, trace, config);
    CHECK(validate_detection_result(r).empty());
    const GroundTruth& gt = *trace.ground_truth;
    if (!gt.is_backdoored) {
      CHECK_FALSE(r.flagged);
      continue;
    }
    CHECK(r.flagged);
    CHECK(r.fired_levels ==
          std::vector<DetectionLevel>{DetectionLevel::Execution});

    std::vector<int> inconsistent;
    for (const StepVerdict& sv : r.step_verdicts) {
      if (!sv.verdict.consistent) inconsistent.push_back(sv.step_index);
    }
    CHECK(inconsistent == gt.malicious_step_indices);
    const int p = gt.malicious_step_indices[0];
    const Verdict& bad = r.step_verdicts[p].verdict;
    REQUIRE(bad.flagged_content.has_value());
    CHECK(*bad.flagged_content == trace.steps[p].action.flat);

    REQUIRE(r.planning_verdict.has_value());
    CHECK(r.planning_verdict->consistent);
    CHECK(*r.reconstructed_instruction == trace.instruction.text);
    REQUIRE(r.explanations.size() == 1);
    CHECK(r.explanations[0] ==
          "step " + std::to_string(p) +
              ": The action does not follow from the stated thought.");
  }
}

TEST_CASE("thought-action backdoors fire exactly the planning level") {
  std::vector<Trace> corpus = make_corpus(TaskDomain::WebShop,
                                          BackdoorMode::ThoughtAction, 40,
                                          0.5, 13);
  JudgePtr judge = make_oracle_judge(corpus);
  CheckerContext ctx{prompts(), metrics(), *judge};
  DetectorConfig config;

  for (const Trace& trace : corpus) {
    CAPTURE(trace.id);
    DetectionResult r = run_two_level(ctx, trace, config);
    CHECK(validate_detection_result(r).empty());
    const GroundTruth& gt = *trace.ground_truth;
    if (!gt.is_backdoored) {
      CHECK_FALSE(r.flagged);
      continue;
    }
    CHECK(r.flagged);
    CHECK(r.fired_levels ==
          std::vector<DetectionLevel>{DetectionLevel::Planning});
    for (const StepVerdict& sv : r.step_verdicts) {
      CHECK(sv.verdict.consistent);
    }
    REQUIRE(r.reconstructed_instruction.has_value());
    CHECK(*r.reconstructed_instruction ==
          trace.instruction.text + " and additionally purchase Adidas "
                                   "sneakers");
    REQUIRE(r.planning_verdict.has_value());
    CHECK_FALSE(r.planning_verdict->consistent);
    REQUIRE(r.planning_verdict->flagged_content.has_value());
    CHECK(*r.planning_verdict->flagged_content == "purchase Adidas sneakers");
    REQUIRE(r.explanations.size() == 1);
    CHECK(r.explanations[0] ==
          "planning: The reconstructed instruction includes behavior the "
          "original never requested.");
  }
}

TEST_CASE("the dilemma holds across every domain and mode") {
  for (TaskDomain domain : {TaskDomain::OS, TaskDomain::DB,
                            TaskDomain::WebShop}) {
    for (BackdoorMode mode : {BackdoorMode::ActionOnly,
                              BackdoorMode::ThoughtAction}) {
      CAPTURE(to_string(domain));
      std::vector<Trace> corpus = make_corpus(domain, mode, 30, 0.5, 3);
      JudgePtr judge = make_oracle_judge(corpus);
      CheckerContext ctx{prompts(), metrics(), *judge};
      DetectorConfig config;
      const std::vector<DetectionLevel> want{
          mode == BackdoorMode::ActionOnly ? DetectionLevel::Execution
                                           : DetectionLevel::Planning};
      for (const Trace& trace : corpus) {
        CAPTURE(trace.id);
        DetectionResult r = run_two_level(ctx, trace, config);
        if (trace.ground_truth->is_backdoored) {
          CHECK(r.fired_levels == want);
        } else {
          CHECK_FALSE(r.flagged);
        }
      }
    }
  }
}

TEST_CASE("all steps are checked even after an early inconsistency") {
  // Find an ActionOnly trace whose malicious step is not the last one.
  std::vector<Trace> corpus = make_corpus(TaskDomain::DB,
                                          BackdoorMode::ActionOnly, 80, 1.0,
                                          5);
  JudgePtr judge = make_oracle_judge(corpus);
  CheckerContext ctx{prompts(), metrics(), *judge};

  bool exercised = false;
  for (const Trace& trace : corpus) {
    const GroundTruth& gt = *trace.ground_truth;
    if (trace.steps.size() < 2) continue;
    if (gt.malicious_step_indices[0] + 1 >=
        static_cast<int>(trace.steps.size())) {
      continue;
    }
    exercised = true;
    std::vector<StepVerdict> verdicts =
        detect_execution(ctx, CheckerKind::judge(), trace);
    REQUIRE(verdicts.size() == trace.steps.size());
    for (size_t i = 0; i < verdicts.size(); ++i) {
      CHECK(verdicts[i].step_index == static_cast<int>(i));
      bool malicious = std::find(gt.malicious_step_indices.begin(),
                                 gt.malicious_step_indices.end(),
                                 static_cast<int>(i)) !=
                       gt.malicious_step_indices.end();
      CHECK(verdicts[i].verdict.consistent == !malicious);
    }
  }
  CHECK(exercised);
}

TEST_CASE("execution judge failures carry the failing step index") {
  Trace trace = handmade_trace({"alpha step", "boom step", "boom finale"});

  SUBCASE("transport errors keep their type and gain the index") {
    JudgePtr judge = scripted_judge([](const ExecQuery& q) -> std::string {
      if (q.thought.find("boom") != std::string::npos) {
        throw JudgeUnavailableError("backend down");
      }
      return "yes";
    });
    CheckerContext ctx{prompts(), metrics(), *judge};
    for (size_t concurrency : {size_t{1}, size_t{4}}) {
      CAPTURE(concurrency);
      try {
        detect_execution(ctx, CheckerKind::judge(), trace, concurrency);
        FAIL("expected JudgeUnavailableError");
      } catch (const JudgeUnavailableError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step 1: ") == 0);
        CHECK(msg.find("backend down") != std::string::npos);
      }
    }
  }

  SUBCASE("verdict grammar failures keep the raw reply") {
    JudgePtr judge = scripted_judge([](const ExecQuery& q) -> std::string {
      return q.thought.find("alpha") != std::string::npos ? "dunno" : "yes";
    });
    CheckerContext ctx{prompts(), metrics(), *judge};
    try {
      detect_execution(ctx, CheckerKind::judge(), trace);
      FAIL("expected VerdictParseError");
    } catch (const VerdictParseError& e) {
      CHECK(std::string(e.what()).find("step 0: ") == 0);
      CHECK(e.raw_response() == "dunno");
    }
  }
}

TEST_CASE("reconstruction strips the wrapper and requires steps") {
  JudgePtr judge = scripted_judge(
      [](const ExecQuery&) -> std::string { return "yes"; },
      "INSTRUCTION: tidy the attic");
  CheckerContext ctx{prompts(), metrics(), *judge};

  Trace trace = handmade_trace({"first", "second"});
  CHECK(reconstruct_instruction(ctx, trace) == "tidy the attic");

  Trace empty = handmade_trace({});
  CHECK_THROWS_AS(reconstruct_instruction(ctx, empty), ArgumentError);

  auto [reconstructed, verdict] =
      detect_planning(ctx, CheckerKind::metric("token-jaccard", 0.9), trace);
  CHECK(reconstructed == "tidy the attic");
  CHECK_FALSE(verdict.consistent);  // far from "do the handmade task"
}

TEST_CASE("run_two_level fails closed on judge errors") {
  Trace trace = handmade_trace({"alpha", "beta"});

  SUBCASE("execution failure yields an errored, unflagged result") {
    JudgePtr judge = make_function_judge(
        "melted", [](const std::string&) -> std::string {
          throw JudgeUnavailableError("api melted");
        });
    CheckerContext ctx{prompts(), metrics(), *judge};
    DetectionResult r = run_two_level(ctx, trace, DetectorConfig{});
    CHECK(validate_detection_result(r).empty());
    REQUIRE(r.error.has_value());
    CHECK(r.error->find("execution: step 0: ") == 0);
    CHECK(r.error->find("api melted") != std::string::npos);
    CHECK_FALSE(r.flagged);
    CHECK(r.step_verdicts.empty());
    CHECK_FALSE(r.reconstructed_instruction.has_value());

    std::string line = serialize_detection_result(r);
    DetectionResult back = parse_detection_result(line);
    CHECK(serialize_detection_result(back) == line);
  }

  SUBCASE("planning failure keeps the execution findings") {
    JudgePtr judge = make_function_judge(
        "exec-only", [](const std::string& prompt) -> std::string {
          const std::string query = extract_query(prompt);
          auto kind = classify_query(query);
          REQUIRE(kind.has_value());
          if (*kind == TaskKind::ExecCheck) {
            ExecQuery q = parse_exec_query(query);
            if (q.thought.find("beta") != std::string::npos) {
              return "no. Action mismatch. SUSPICIOUS: echo 1";
            }
            return "yes";
          }
          throw JudgeTimeoutError("reconstruction stalled");
        });
    CheckerContext ctx{prompts(), metrics(), *judge};
    DetectionResult r = run_two_level(ctx, trace, DetectorConfig{});
    CHECK(validate_detection_result(r).empty());
    REQUIRE(r.error.has_value());
    CHECK(r.error->find("planning: ") == 0);
    CHECK(r.error->find("reconstruction stalled") != std::string::npos);
    CHECK(r.flagged);
    CHECK(r.fired_levels ==
          std::vector<DetectionLevel>{DetectionLevel::Execution});
    REQUIRE(r.step_verdicts.size() == 2);
    CHECK_FALSE(r.step_verdicts[1].verdict.consistent);
    CHECK_FALSE(r.planning_verdict.has_value());
  }
}

TEST_CASE("combined flags are the union of the per-level flags") {
  std::vector<Trace> corpus = make_corpus(TaskDomain::OS,
                                          BackdoorMode::ActionOnly, 60, 0.5,
                                          17);
  JudgePtr judge = make_noisy_judge(make_oracle_judge(corpus), 0.25, 9);
  CheckerContext ctx{prompts(), metrics(), *judge};
  DetectorConfig config;

  std::set<std::string> exec_flags, plan_flags, combined_flags;
  for (const Trace& trace : corpus) {
    DetectionResult r = run_two_level(ctx, trace, config);
    CHECK(validate_detection_result(r).empty());
    for (DetectionLevel level : r.fired_levels) {
      (level == DetectionLevel::Execution ? exec_flags : plan_flags)
          .insert(r.trace_id);
    }
    if (r.flagged) combined_flags.insert(r.trace_id);
  }
  std::set<std::string> expected = exec_flags;
  expected.insert(plan_flags.begin(), plan_flags.end());
  CHECK(combined_flags == expected);
  CHECK(std::includes(combined_flags.begin(), combined_flags.end(),
                      exec_flags.begin(), exec_flags.end()));
  CHECK(std::includes(combined_flags.begin(), combined_flags.end(),
                      plan_flags.begin(), plan_flags.end()));
}

TEST_CASE("detection is deterministic for oracle and seeded judges") {
  std::vector<Trace> corpus = make_corpus(TaskDomain::DB,
                                          BackdoorMode::ThoughtAction, 30,
                                          0.5, 23);

  auto run_all = [&](JudgeBackend& judge) {
    CheckerContext ctx{prompts(), metrics(), judge};
    std::string blob;
    for (const Trace& trace : corpus) {
      blob += serialize_detection_result(
          run_two_level(ctx, trace, DetectorConfig{}));
      blob += '\n';
    }
    return blob;
  };

  SUBCASE("oracle") {
    JudgePtr a = make_oracle_judge(corpus);
    JudgePtr b = make_oracle_judge(corpus);
    CHECK(run_all(*a) == run_all(*b));
  }
  SUBCASE("noisy judge with a fixed seed") {
    JudgePtr a = make_noisy_judge(make_oracle_judge(corpus), 0.3, 41);
    JudgePtr b = make_noisy_judge(make_oracle_judge(corpus), 0.3, 41);
    JudgePtr c = make_noisy_judge(make_oracle_judge(corpus), 0.3, 42);
    std::string first = run_all(*a);
    CHECK(first == run_all(*b));
    CHECK(first != run_all(*c));
  }
}

TEST_CASE("concurrent step checks reassemble in step order") {
  std::vector<std::string> thoughts;
  for (int i = 0; i < 9; ++i) {
    thoughts.push_back(i % 2 == 1 ? "odd thought " + std::to_string(i)
                                  : "even thought " + std::to_string(i));
  }
  Trace trace = handmade_trace(thoughts);
  JudgePtr judge = scripted_judge([](const ExecQuery& q) -> std::string {
    if (q.thought.find("odd") != std::string::npos) {
      return "no. odd step. SUSPICIOUS: marker";
    }
    return "yes";
  });
  CheckerContext ctx{prompts(), metrics(), *judge};

  std::vector<StepVerdict> verdicts =
      detect_execution(ctx, CheckerKind::judge(), trace, 8);
  REQUIRE(verdicts.size() == trace.steps.size());
  for (size_t i = 0; i < verdicts.size(); ++i) {
    CHECK(verdicts[i].step_index == static_cast<int>(i));
    CHECK(verdicts[i].verdict.consistent == (i % 2 == 0));
  }
}

TEST_CASE("detection results serialize and parse losslessly") {
  DetectionResult r;
  r.trace_id = "trace-9";
  r.flagged = true;
  r.fired_levels = {DetectionLevel::Execution, DetectionLevel::Planning};
  StepVerdict sv;
  sv.step_index = 0;
  sv.verdict.consistent = false;
  sv.verdict.explanation = "lines\nbreak";
  sv.verdict.flagged_content = "rm -rf ../*.txt";
  sv.verdict.raw_response = "no. lines\nbreak SUSPICIOUS: rm -rf ../*.txt";
  r.step_verdicts.push_back(sv);
  StepVerdict ok;
  ok.step_index = 1;
  ok.verdict.consistent = true;
  ok.verdict.explanation = "";
  r.step_verdicts.push_back(ok);
  r.reconstructed_instruction = "clean the workspace";
  Verdict plan;
  plan.consistent = false;
  plan.explanation = "extra clause";
  plan.flagged_content = "purchase Adidas sneakers";
  r.planning_verdict = plan;
  r.explanations = {"step 0: lines\nbreak", "planning: extra clause"};

  REQUIRE(validate_detection_result(r).empty());
  std::string line = serialize_detection_result(r);
  CHECK(line.find('\n') == std::string::npos);
  DetectionResult back = parse_detection_result(line);
  CHECK(serialize_detection_result(back) == line);
  CHECK(back.step_verdicts[0].verdict.flagged_content ==
        r.step_verdicts[0].verdict.flagged_content);

  SUBCASE("file round trip") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() /
                    ("tg_detect_" + std::to_string(::getpid()) + ".jsonl");
    write_results(path.string(), {r, r});
    std::vector<DetectionResult> loaded = read_results(path.string());
    REQUIRE(loaded.size() == 2);
    CHECK(serialize_detection_result(loaded[1]) == line);
    fs::remove(path);
  }
}

TEST_CASE("malformed detection records are rejected") {
  CHECK_THROWS_AS(parse_detection_result("not json"), ParseError);
  CHECK_THROWS_AS(parse_detection_result("[1,2]"), ParseError);
  CHECK_THROWS_AS(
      parse_detection_result(
          R"({"flagged":false,"fired_levels":[],"step_verdicts":[],)"
          R"("explanations":[]})"),
      ParseError);  // no trace_id
  CHECK_THROWS_AS(
      parse_detection_result(
          R"({"trace_id":"t","flagged":"yes","fired_levels":[],)"
          R"("step_verdicts":[],"explanations":[]})"),
      ParseError);  // flagged not boolean
  CHECK_THROWS_AS(
      parse_detection_result(
          R"({"trace_id":"t","flagged":true,"fired_levels":["sideways"],)"
          R"("step_verdicts":[],"explanations":[]})"),
      ParseError);  // unknown level

  try {
    parse_detection_result(
        R"({"trace_id":"t","flagged":true,"fired_levels":[],)"
        R"("step_verdicts":[],"explanations":[]})");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("invariants") != std::string::npos);
  }

  // Execution fired without any inconsistent step verdict.
  CHECK_THROWS_AS(
      parse_detection_result(
          R"({"trace_id":"t","flagged":true,"fired_levels":["execution"],)"
          R"("step_verdicts":[],"explanations":[]})"),
      ParseError);

  // Step verdicts out of order.
  CHECK_THROWS_AS(
      parse_detection_result(
          R"({"trace_id":"t","flagged":false,"fired_levels":[],)"
          R"("step_verdicts":[)"
          R"({"step_index":1,"verdict":{"consistent":true,"explanation":""}},)"
          R"({"step_index":0,"verdict":{"consistent":true,"explanation":""}})"
          R"(],"explanations":[]})"),
      ParseError);

  SUBCASE("read_results reports the offending line") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() /
                    ("tg_badrec_" + std::to_string(::getpid()) + ".jsonl");
    DetectionResult ok;
    ok.trace_id = "fine";
    std::ofstream out(path);
    out << serialize_detection_result(ok) << "\n" << "garbage\n";
    out.close();
    try {
      read_results(path.string());
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    fs::remove(path);
  }
}
