// Command line front end: simulate corpora, detect over trace files,
// evaluate experiments. Exit codes: 0 success, 1 usage or configuration
// problem, 2 runtime or judge failure.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "traceguard/baselines.hpp"
#include "traceguard/consistency.hpp"
#include "traceguard/detectors.hpp"
#include "traceguard/errors.hpp"
#include "traceguard/eval.hpp"
#include "traceguard/judge.hpp"
#include "traceguard/prompts.hpp"
#include "traceguard/simulate.hpp"
#include "traceguard/trace.hpp"

namespace {

using namespace traceguard;

// Key=value lines, '#' comments. Values here override parsed flags, so a
// config file pins a run regardless of what the command line said.
void apply_config_file(
    const std::string& path,
    const std::map<std::string, std::function<void(const std::string&)>>&
        setters) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path);
  }
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t comment = line.find('#');
    if (comment != std::string::npos) line.resize(comment);
    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key=value");
    }
    auto strip = [](std::string text) {
      size_t b = text.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      size_t e = text.find_last_not_of(" \t\r");
      return text.substr(b, e - b + 1);
    };
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": unknown key '" + key + "'");
    }
    try {
      it->second(value);
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": invalid value for '" + key + "'");
    }
  }
}

CheckerKind parse_checker(const std::string& spec) {
  if (spec == "judge") return CheckerKind::judge();
  const std::string prefix = "metric:";
  if (spec.rfind(prefix, 0) == 0) {
    size_t colon = spec.find(':', prefix.size());
    if (colon != std::string::npos) {
      std::string id = spec.substr(prefix.size(), colon - prefix.size());
      double theta = std::stod(spec.substr(colon + 1));
      return CheckerKind::metric(id, theta);
    }
  }
  throw ConfigError("checker must be 'judge' or 'metric:<id>:<theta>', got '" +
                    spec + "'");
}

struct JudgeArgs {
  std::string kind = "oracle";
  double flip_rate = 0.1;
  uint64_t seed = 0;
  std::string endpoint;
  std::string model = "judge";
  std::string api_key_env = "TRACEGUARD_API_KEY";
  int timeout_ms = 30000;
  bool no_cache = false;
};

void add_judge_flags(CLI::App* cmd, JudgeArgs& args) {
  cmd->add_option("--judge", args.kind,
                  "Judge backend: oracle, noisy or http (default oracle)");
  cmd->add_option("--flip-rate", args.flip_rate,
                  "Noisy judge verdict flip probability (default 0.1)");
  cmd->add_option("--judge-seed", args.seed, "Noisy judge RNG seed");
  cmd->add_option("--endpoint", args.endpoint,
                  "HTTP judge base URL, e.g. http://127.0.0.1:8080");
  cmd->add_option("--model", args.model, "HTTP judge model name");
  cmd->add_option("--api-key-env", args.api_key_env,
                  "Environment variable holding the HTTP judge credential");
  cmd->add_option("--timeout-ms", args.timeout_ms,
                  "HTTP judge request timeout in milliseconds");
  cmd->add_flag("--no-cache", args.no_cache,
                "Disable response caching for the HTTP judge");
}

void add_judge_config_keys(
    JudgeArgs& args,
    std::map<std::string, std::function<void(const std::string&)>>& keys) {
  keys["judge"] = [&](const std::string& v) { args.kind = v; };
  keys["flip-rate"] = [&](const std::string& v) { args.flip_rate = std::stod(v); };
  keys["judge-seed"] = [&](const std::string& v) { args.seed = std::stoull(v); };
  keys["endpoint"] = [&](const std::string& v) { args.endpoint = v; };
  keys["model"] = [&](const std::string& v) { args.model = v; };
  keys["api-key-env"] = [&](const std::string& v) { args.api_key_env = v; };
  keys["timeout-ms"] = [&](const std::string& v) { args.timeout_ms = std::stoi(v); };
  keys["no-cache"] = [&](const std::string& v) { args.no_cache = v == "true" || v == "1"; };
}

JudgePtr build_judge(const JudgeArgs& args, const std::vector<Trace>& corpus) {
  if (args.kind == "oracle") {
    return make_oracle_judge(corpus);
  }
  if (args.kind == "noisy") {
    return make_noisy_judge(make_oracle_judge(corpus), args.flip_rate,
                            args.seed);
  }
  if (args.kind == "http") {
    if (args.endpoint.empty()) {
      throw ConfigError("--endpoint is required for the http judge");
    }
    JudgeEndpointConfig config;
    config.base_url = args.endpoint;
    config.model_name = args.model;
    config.api_key_env = args.api_key_env;
    config.timeout = std::chrono::milliseconds(args.timeout_ms);
    JudgePtr judge = make_http_judge(config);
    return make_cached_judge(std::move(judge), !args.no_cache);
  }
  throw ConfigError("judge must be oracle, noisy or http, got '" + args.kind +
                    "'");
}

PromptLibrary load_prompts(const std::string& dir) {
  return dir.empty() ? PromptLibrary::load_default() : PromptLibrary::load(dir);
}

// An unreadable input is an operator mistake, so it must exit 1, not 2.
std::vector<Trace> read_input_corpus(const std::string& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("cannot open corpus file: " + path);
  }
  return read_corpus(path);
}

size_t count_backdoored(const std::vector<Trace>& corpus) {
  size_t n = 0;
  for (const Trace& t : corpus) {
    n += (t.ground_truth && t.ground_truth->is_backdoored) ? 1 : 0;
  }
  return n;
}

// simulate ------------------------------------------------------------

struct SimulateArgs {
  std::string domain = "os";
  size_t n = 100;
  double fraction = 0.5;
  std::string mode = "action-only";
  uint64_t seed = 0;
  size_t min_steps = 0;
  size_t max_steps = 0;
  std::string out;
  std::string templates;
  std::string config_file;
};

int run_simulate(const SimulateArgs& args) {
  // Flags use kebab-case mode names; the corpus format uses snake_case.
  std::string mode = args.mode;
  std::replace(mode.begin(), mode.end(), '-', '_');
  CorpusConfig config;
  config.domain = domain_from_string(args.domain);
  config.n_traces = args.n;
  config.triggered_fraction = args.fraction;
  config.mode = mode_from_string(mode);
  config.seed = args.seed;
  config.min_steps = args.min_steps;
  config.max_steps = args.max_steps;
  config.validate();
  TemplateLibrary lib = args.templates.empty()
                            ? TemplateLibrary::load_default(config.domain)
                            : TemplateLibrary::load(args.templates);
  BackdoorSpec spec = default_backdoor_spec(config.domain, config.mode);
  std::vector<Trace> corpus = generate_corpus(lib, config, spec);
  write_corpus(args.out, corpus);
  std::printf("wrote %zu traces (%zu backdoored) to %s\n", corpus.size(),
              count_backdoored(corpus), args.out.c_str());
  return 0;
}

// detect --------------------------------------------------------------

struct DetectArgs {
  std::string in;
  std::string out;
  std::string exec_checker = "judge";
  std::string plan_checker = "judge";
  size_t concurrency = 1;
  std::string prompts_dir;
  bool verbose = false;
  std::string config_file;
  JudgeArgs judge;
};

void print_result_verbose(const DetectionResult& r) {
  if (r.error) {
    std::printf("trace %s ERROR %s\n", r.trace_id.c_str(), r.error->c_str());
    return;
  }
  if (!r.flagged) {
    std::printf("trace %s clean\n", r.trace_id.c_str());
    return;
  }
  std::string levels;
  for (DetectionLevel level : r.fired_levels) {
    if (!levels.empty()) levels += ",";
    levels += to_string(level);
  }
  std::printf("trace %s FLAGGED [%s]\n", r.trace_id.c_str(), levels.c_str());
  for (const StepVerdict& sv : r.step_verdicts) {
    if (sv.verdict.consistent) continue;
    std::printf("  step %d: %s\n", sv.step_index,
                sv.verdict.explanation.c_str());
    if (sv.verdict.flagged_content) {
      std::printf("  >>> %s\n", sv.verdict.flagged_content->c_str());
    }
  }
  if (r.planning_verdict && !r.planning_verdict->consistent) {
    std::printf("  planning: %s\n", r.planning_verdict->explanation.c_str());
    if (r.planning_verdict->flagged_content) {
      std::printf("  >>> %s\n", r.planning_verdict->flagged_content->c_str());
    }
  }
}

int run_detect(const DetectArgs& args) {
  std::vector<Trace> corpus = read_input_corpus(args.in);
  PromptLibrary prompts = load_prompts(args.prompts_dir);
  MetricRegistry metrics = builtin_metrics();
  JudgePtr judge = build_judge(args.judge, corpus);
  CheckerContext ctx{prompts, metrics, *judge};
  DetectorConfig detector;
  detector.exec_checker = parse_checker(args.exec_checker);
  detector.plan_checker = parse_checker(args.plan_checker);
  detector.concurrency = args.concurrency;

  std::vector<DetectionResult> results;
  results.reserve(corpus.size());
  size_t flagged = 0;
  size_t errored = 0;
  for (const Trace& trace : corpus) {
    results.push_back(run_two_level(ctx, trace, detector));
    const DetectionResult& r = results.back();
    flagged += r.flagged ? 1 : 0;
    errored += r.error ? 1 : 0;
    if (args.verbose) print_result_verbose(r);
  }
  if (!args.out.empty()) {
    write_results(args.out, results);
  }
  std::printf("flagged %zu of %zu traces\n", flagged, corpus.size());
  if (errored > 0) {
    std::fprintf(stderr, "%zu traces errored during detection\n", errored);
    return 2;
  }
  return 0;
}

// evaluate ------------------------------------------------------------

struct EvaluateArgs {
  std::string in;
  std::string report;
  std::string results;
  std::string detector = "combined";
  bool ablation = false;
  std::string exec_checker = "judge";
  std::string plan_checker = "judge";
  size_t concurrency = 1;
  size_t selfcheck_samples = 3;
  double selfcheck_threshold = 1.0;
  uint64_t selfcheck_seed = 0;
  std::string trigger;
  std::string roc_metric;
  std::string prompts_dir;
  std::string config_file;
  JudgeArgs judge;
};

std::string sibling_report_path(const std::string& base,
                                const std::string& tag) {
  std::filesystem::path p(base);
  std::filesystem::path named = p.parent_path() /
                                (p.stem().string() + "." + tag +
                                 p.extension().string());
  return named.string();
}

int run_evaluate(const EvaluateArgs& args) {
  std::vector<Trace> corpus = read_input_corpus(args.in);
  PromptLibrary prompts = load_prompts(args.prompts_dir);
  MetricRegistry metrics = builtin_metrics();
  JudgePtr judge = build_judge(args.judge, corpus);
  CheckerContext ctx{prompts, metrics, *judge};

  ExperimentConfig config;
  config.detector = detector_kind_from_string(args.detector);
  config.exec_checker = parse_checker(args.exec_checker);
  config.plan_checker = parse_checker(args.plan_checker);
  config.concurrency = args.concurrency;
  config.selfcheck_samples = args.selfcheck_samples;
  config.selfcheck_threshold = args.selfcheck_threshold;
  config.selfcheck_seed = args.selfcheck_seed;
  config.corpus_label = args.in;
  if (!args.roc_metric.empty()) config.roc_metric = args.roc_metric;
  if (config.detector == DetectorKind::Rephrase) {
    if (corpus.empty()) {
      throw ConfigError("rephrase evaluation needs a non-empty corpus");
    }
    BackdoorSpec spec = default_backdoor_spec(corpus[0].instruction.domain,
                                              BackdoorMode::ActionOnly);
    if (!args.trigger.empty()) spec.trigger = args.trigger;
    config.rephrase_spec = spec;
  }

  std::vector<DetectionResult> results;
  size_t errored = 0;
  if (args.ablation) {
    AblationOutput out = run_ablation(ctx, corpus, config);
    results = std::move(out.results);
    write_report(args.report, out.combined);
    write_report(sibling_report_path(args.report, "execution"), out.execution);
    write_report(sibling_report_path(args.report, "planning"), out.planning);
    std::printf("%s\n%s\n%s", format_report(out.combined).c_str(),
                format_report(out.execution).c_str(),
                format_report(out.planning).c_str());
  } else {
    ExperimentOutput out = run_experiment(ctx, corpus, config);
    results = std::move(out.results);
    write_report(args.report, out.report);
    std::printf("%s", format_report(out.report).c_str());
  }
  if (!args.results.empty()) {
    write_results(args.results, results);
  }
  for (const DetectionResult& r : results) errored += r.error ? 1 : 0;
  if (errored > 0) {
    std::fprintf(stderr, "%zu traces errored during evaluation\n", errored);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-level consistency detection for agent trace backdoors"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "Generate a labeled benign/backdoored trace corpus");
  simulate->add_option("--domain", sim.domain, "os, db or webshop");
  simulate->add_option("--n", sim.n, "Number of traces");
  simulate->add_option("--fraction", sim.fraction,
                       "Fraction of traces with an injected backdoor");
  simulate->add_option("--mode", sim.mode,
                       "none, action-only or thought-action");
  simulate->add_option("--seed", sim.seed, "Corpus seed");
  simulate->add_option("--min-steps", sim.min_steps,
                       "Only use scripts with at least this many steps");
  simulate->add_option("--max-steps", sim.max_steps,
                       "Only use scripts with at most this many steps");
  simulate->add_option("--out", sim.out, "Output corpus path (JSONL)")
      ->required();
  simulate->add_option("--templates", sim.templates,
                       "Template file overriding the bundled domain scripts");
  simulate->add_option("--config", sim.config_file,
                       "key=value file whose entries override these flags");

  DetectArgs det;
  CLI::App* detect = app.add_subcommand(
      "detect", "Run two-level detection over a trace corpus");
  detect->add_option("--in", det.in, "Input corpus path")->required();
  detect->add_option("--out", det.out, "Detection results path (JSONL)");
  detect->add_option("--exec-checker", det.exec_checker,
                     "judge or metric:<id>:<theta>");
  detect->add_option("--plan-checker", det.plan_checker,
                     "judge or metric:<id>:<theta>");
  detect->add_option("--concurrency", det.concurrency,
                     "Step-level judge fan-out per trace");
  detect->add_option("--prompts", det.prompts_dir,
                     "Prompt registry directory override");
  detect->add_flag("-v,--verbose", det.verbose,
                   "Print per-trace explanations");
  detect->add_option("--config", det.config_file,
                     "key=value file whose entries override these flags");
  add_judge_flags(detect, det.judge);

  EvaluateArgs eva;
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "Score a detector or baseline over a labeled corpus");
  evaluate->add_option("--in", eva.in, "Input corpus path")->required();
  evaluate->add_option("--report", eva.report, "Report output path (JSON)")
      ->required();
  evaluate->add_option("--results", eva.results,
                       "Optional per-trace results path (JSONL)");
  evaluate->add_option(
      "--detector", eva.detector,
      "combined, execution, planning, selfcheck or rephrase");
  evaluate->add_flag("--ablation", eva.ablation,
                     "Also emit execution/planning views of the combined run");
  evaluate->add_option("--exec-checker", eva.exec_checker,
                       "judge or metric:<id>:<theta>");
  evaluate->add_option("--plan-checker", eva.plan_checker,
                       "judge or metric:<id>:<theta>");
  evaluate->add_option("--concurrency", eva.concurrency,
                       "Step-level judge fan-out per trace");
  evaluate->add_option("--selfcheck-samples", eva.selfcheck_samples,
                       "Reconstruction samples per trace");
  evaluate->add_option("--selfcheck-threshold", eva.selfcheck_threshold,
                       "Flag traces whose agreement falls below this");
  evaluate->add_option("--selfcheck-seed", eva.selfcheck_seed,
                       "Selfcheck sampling seed");
  evaluate->add_option("--trigger", eva.trigger,
                       "Trigger token for the rephrase detector");
  evaluate->add_option("--roc-metric", eva.roc_metric,
                       "Similarity metric id for the report's ROC sweep");
  evaluate->add_option("--prompts", eva.prompts_dir,
                       "Prompt registry directory override");
  evaluate->add_option("--config", eva.config_file,
                       "key=value file whose entries override these flags");
  add_judge_flags(evaluate, eva.judge);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (simulate->parsed()) {
      if (!sim.config_file.empty()) {
        std::map<std::string, std::function<void(const std::string&)>> keys;
        keys["domain"] = [&](const std::string& v) { sim.domain = v; };
        keys["n"] = [&](const std::string& v) { sim.n = std::stoull(v); };
        keys["fraction"] = [&](const std::string& v) { sim.fraction = std::stod(v); };
        keys["mode"] = [&](const std::string& v) { sim.mode = v; };
        keys["seed"] = [&](const std::string& v) { sim.seed = std::stoull(v); };
        keys["min-steps"] = [&](const std::string& v) { sim.min_steps = std::stoull(v); };
        keys["max-steps"] = [&](const std::string& v) { sim.max_steps = std::stoull(v); };
        keys["out"] = [&](const std::string& v) { sim.out = v; };
        keys["templates"] = [&](const std::string& v) { sim.templates = v; };
        apply_config_file(sim.config_file, keys);
      }
      return run_simulate(sim);
    }
    if (detect->parsed()) {
      if (!det.config_file.empty()) {
        std::map<std::string, std::function<void(const std::string&)>> keys;
        keys["in"] = [&](const std::string& v) { det.in = v; };
        keys["out"] = [&](const std::string& v) { det.out = v; };
        keys["exec-checker"] = [&](const std::string& v) { det.exec_checker = v; };
        keys["plan-checker"] = [&](const std::string& v) { det.plan_checker = v; };
        keys["concurrency"] = [&](const std::string& v) { det.concurrency = std::stoull(v); };
        keys["prompts"] = [&](const std::string& v) { det.prompts_dir = v; };
        keys["verbose"] = [&](const std::string& v) { det.verbose = v == "true" || v == "1"; };
        add_judge_config_keys(det.judge, keys);
        apply_config_file(det.config_file, keys);
      }
      return run_detect(det);
    }
    if (evaluate->parsed()) {
      if (!eva.config_file.empty()) {
        std::map<std::string, std::function<void(const std::string&)>> keys;
        keys["in"] = [&](const std::string& v) { eva.in = v; };
        keys["report"] = [&](const std::string& v) { eva.report = v; };
        keys["results"] = [&](const std::string& v) { eva.results = v; };
        keys["detector"] = [&](const std::string& v) { eva.detector = v; };
        keys["ablation"] = [&](const std::string& v) { eva.ablation = v == "true" || v == "1"; };
        keys["exec-checker"] = [&](const std::string& v) { eva.exec_checker = v; };
        keys["plan-checker"] = [&](const std::string& v) { eva.plan_checker = v; };
        keys["concurrency"] = [&](const std::string& v) { eva.concurrency = std::stoull(v); };
        keys["selfcheck-samples"] = [&](const std::string& v) { eva.selfcheck_samples = std::stoull(v); };
        keys["selfcheck-threshold"] = [&](const std::string& v) { eva.selfcheck_threshold = std::stod(v); };
        keys["selfcheck-seed"] = [&](const std::string& v) { eva.selfcheck_seed = std::stoull(v); };
        keys["trigger"] = [&](const std::string& v) { eva.trigger = v; };
        keys["roc-metric"] = [&](const std::string& v) { eva.roc_metric = v; };
        keys["prompts"] = [&](const std::string& v) { eva.prompts_dir = v; };
        add_judge_config_keys(eva.judge, keys);
        apply_config_file(eva.config_file, keys);
      }
      return run_evaluate(eva);
    }
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
