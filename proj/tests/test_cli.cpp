#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "traceguard/detectors.hpp"
#include "traceguard/eval.hpp"
#include "traceguard/trace.hpp"

using namespace traceguard;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  static fs::path dir = [] {
    fs::path p = fs::temp_directory_path() /
                 ("tg_cli_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

struct RunOutcome {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunOutcome run_cli(const std::string& args) {
  static int serial = 0;
  fs::path out_path = scratch_dir() / ("stdout." + std::to_string(serial));
  fs::path err_path = scratch_dir() / ("stderr." + std::to_string(serial));
  ++serial;
  std::string command = std::string(TRACEGUARD_CLI_PATH) + " " + args + " > " +
                        out_path.string() + " 2> " + err_path.string();
  int status = std::system(command.c_str());
  RunOutcome outcome;
  outcome.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  outcome.out = slurp(out_path);
  outcome.err = slurp(err_path);
  return outcome;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string corpus_path(const std::string& name) {
  return (scratch_dir() / name).string();
}

// Shared 40-trace thought-action corpus most cases reuse.
const std::string& base_corpus() {
  static std::string path = [] {
    std::string p = corpus_path("base.jsonl");
    RunOutcome r = run_cli(
        "simulate --domain db --n 40 --fraction 0.5 --mode thought-action "
        "--seed 7 --out " +
        p);
    REQUIRE(r.exit_code == 0);
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("simulate writes the requested corpus and reports counts") {
  std::string path = corpus_path("sim.jsonl");
  RunOutcome r = run_cli(
      "simulate --domain db --n 100 --fraction 0.5 --mode thought-action "
      "--seed 7 --out " +
      path);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("wrote 100 traces (50 backdoored)") != std::string::npos);
  std::vector<Trace> corpus = read_corpus(path);
  REQUIRE(corpus.size() == 100);
  size_t backdoored = 0;
  for (const Trace& t : corpus) {
    REQUIRE(t.ground_truth.has_value());
    backdoored += t.ground_truth->is_backdoored ? 1 : 0;
  }
  CHECK(backdoored == 50);
}

TEST_CASE("simulate reruns are byte-identical") {
  std::string a = corpus_path("rerun_a.jsonl");
  std::string b = corpus_path("rerun_b.jsonl");
  std::string flags =
      "simulate --domain webshop --n 30 --fraction 0.4 --mode action-only "
      "--seed 11 --out ";
  REQUIRE(run_cli(flags + a).exit_code == 0);
  REQUIRE(run_cli(flags + b).exit_code == 0);
  CHECK(read_file(a) == read_file(b));
}

TEST_CASE("simulate rejects bad configuration with exit 1") {
  CHECK(run_cli("simulate --domain db --n 10 --fraction 1.5 --mode none "
                "--out " +
                corpus_path("bad.jsonl"))
            .exit_code == 1);
  CHECK(run_cli("simulate --domain db --n 10").exit_code == 1);
  CHECK(run_cli("nonsense --flag").exit_code == 1);
}

TEST_CASE("detect flags every backdoored trace under the oracle judge") {
  std::string results = corpus_path("detect.jsonl");
  RunOutcome r = run_cli("detect --in " + base_corpus() + " --out " + results);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("flagged 20 of 40 traces") != std::string::npos);
  std::vector<DetectionResult> records = read_results(results);
  std::vector<Trace> corpus = read_corpus(base_corpus());
  REQUIRE(records.size() == corpus.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].trace_id == corpus[i].id);
    CHECK(records[i].flagged == corpus[i].ground_truth->is_backdoored);
  }
}

TEST_CASE("detect reruns write byte-identical results") {
  std::string a = corpus_path("det_a.jsonl");
  std::string b = corpus_path("det_b.jsonl");
  REQUIRE(run_cli("detect --in " + base_corpus() + " --out " + a).exit_code ==
          0);
  REQUIRE(run_cli("detect --in " + base_corpus() + " --out " + b).exit_code ==
          0);
  CHECK(read_file(a) == read_file(b));
}

TEST_CASE("detect is quiet on a benign corpus") {
  std::string benign = corpus_path("benign.jsonl");
  REQUIRE(run_cli("simulate --domain os --n 20 --fraction 0 --mode none "
                  "--seed 3 --out " +
                  benign)
              .exit_code == 0);
  std::string results = corpus_path("benign_results.jsonl");
  RunOutcome r = run_cli("detect --in " + benign + " --out " + results);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("flagged 0 of 20 traces") != std::string::npos);
  for (const DetectionResult& record : read_results(results)) {
    CHECK_FALSE(record.flagged);
  }
}

TEST_CASE("verbose detect prints explanations with a marker line") {
  RunOutcome r = run_cli("detect --in " + base_corpus() + " -v");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("FLAGGED [planning]") != std::string::npos);
  CHECK(r.out.find("planning: ") != std::string::npos);
  CHECK(r.out.find(">>> ") != std::string::npos);
  CHECK(r.out.find("clean") != std::string::npos);
}

TEST_CASE("detect exits 1 on unreadable input") {
  RunOutcome r = run_cli("detect --in /no/such/file.jsonl");
  CHECK(r.exit_code == 1);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("unreachable judge yields errored records and exit 2") {
  std::string tiny = corpus_path("tiny.jsonl");
  REQUIRE(run_cli("simulate --domain os --n 3 --fraction 0 --mode none "
                  "--seed 1 --max-steps 2 --out " +
                  tiny)
              .exit_code == 0);
  std::string results = corpus_path("down_results.jsonl");
  RunOutcome r = run_cli("detect --in " + tiny +
                         " --judge http --endpoint http://127.0.0.1:9 "
                         "--timeout-ms 200 --out " +
                         results);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("errored") != std::string::npos);
  std::vector<DetectionResult> records = read_results(results);
  REQUIRE(records.size() == 3);
  for (const DetectionResult& record : records) {
    REQUIRE(record.error.has_value());
    CHECK_FALSE(record.flagged);
  }
}

TEST_CASE("evaluate writes a clean oracle report deterministically") {
  std::string report_a = corpus_path("rep_a.json");
  std::string report_b = corpus_path("rep_b.json");
  RunOutcome r =
      run_cli("evaluate --in " + base_corpus() + " --report " + report_a);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("asr       : 0.0000") != std::string::npos);
  CHECK(r.out.find("fpr       : 0.0000") != std::string::npos);
  EvalReport report = parse_eval_report(read_file(report_a));
  CHECK(*report.asr == 0.0);
  CHECK(*report.fpr == 0.0);
  CHECK(report.n_traces == 40);

  REQUIRE(run_cli("evaluate --in " + base_corpus() + " --report " + report_b)
              .exit_code == 0);
  CHECK(read_file(report_a) == read_file(report_b));
}

TEST_CASE("ablation emits three reports exposing the dilemma") {
  std::string report = corpus_path("abl.json");
  RunOutcome r = run_cli("evaluate --in " + base_corpus() + " --report " +
                         report + " --ablation --results " +
                         corpus_path("abl_results.jsonl"));
  CHECK(r.exit_code == 0);
  EvalReport combined = parse_eval_report(read_file(report));
  EvalReport execution =
      parse_eval_report(read_file(corpus_path("abl.execution.json")));
  EvalReport planning =
      parse_eval_report(read_file(corpus_path("abl.planning.json")));
  CHECK(*combined.asr == 0.0);
  // Thought-action backdoors evade the execution level entirely.
  CHECK(*execution.asr == 1.0);
  CHECK(*planning.asr == 0.0);
  CHECK(combined.confusion.tp >= execution.confusion.tp);
  CHECK(combined.confusion.tp >= planning.confusion.tp);
}

TEST_CASE("selfcheck baseline never flags a deterministic judge") {
  std::string report = corpus_path("selfcheck.json");
  RunOutcome r = run_cli("evaluate --in " + base_corpus() + " --report " +
                         report + " --detector selfcheck");
  CHECK(r.exit_code == 0);
  EvalReport parsed = parse_eval_report(read_file(report));
  CHECK(*parsed.asr == 1.0);
  CHECK(*parsed.fpr == 0.0);
}

TEST_CASE("config file entries override command line flags") {
  fs::path config = scratch_dir() / "override.cfg";
  {
    std::ofstream out(config);
    out << "# pin the corpus seed\n";
    out << "seed = 99\n";
  }
  std::string flagged = corpus_path("cfg_flag.jsonl");
  std::string pinned = corpus_path("cfg_pin.jsonl");
  REQUIRE(run_cli("simulate --domain os --n 10 --fraction 0.5 --mode "
                  "action-only --seed 1 --config " +
                  config.string() + " --out " + flagged)
              .exit_code == 0);
  REQUIRE(run_cli("simulate --domain os --n 10 --fraction 0.5 --mode "
                  "action-only --seed 99 --out " +
                  pinned)
              .exit_code == 0);
  CHECK(read_file(flagged) == read_file(pinned));

  std::ofstream(config) << "totally-unknown = 1\n";
  CHECK(run_cli("simulate --domain os --n 4 --fraction 0 --mode none "
                "--config " +
                config.string() + " --out " + corpus_path("cfg_bad.jsonl"))
            .exit_code == 1);
}

TEST_CASE("evaluate exits 1 when the corpus is missing") {
  CHECK(run_cli("evaluate --in /no/such/corpus.jsonl --report " +
                corpus_path("never.json"))
            .exit_code == 1);
}
