// Judge backends and the yes/no verdict grammar. A judge maps a rendered
// prompt to a completion string; everything else in the pipeline is built on
// that single contract.
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "traceguard/trace.hpp"

namespace traceguard {

struct Verdict {
  bool consistent = true;
  std::string explanation;
  std::optional<std::string> flagged_content;  // absent when consistent
  std::string raw_response;
};

// Answer grammar: the reply's leading alphabetic token, case-insensitive and
// with following punctuation stripped, must be "yes" or "no". For "no"
// replies the remainder splits at the "SUSPICIOUS:" marker into explanation
// and flagged content. Anything else raises VerdictParseError carrying the
// raw reply.
Verdict parse_verdict(const std::string& reply);

inline constexpr const char kSuspiciousMarker[] = "SUSPICIOUS:";

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  // Returns the completion for a rendered prompt. Implementations are safe
  // to call from multiple threads.
  virtual std::string complete(const std::string& prompt) = 0;
  virtual std::string name() const = 0;
};

using JudgePtr = std::unique_ptr<JudgeBackend>;

struct JudgeEndpointConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  std::string path = "/v1/chat/completions";
  std::string model_name = "judge";
  std::chrono::milliseconds timeout{30000};
  int max_retries = 2;  // complete() makes max_retries + 1 attempts
  double temperature = 0.0;
  // JSON pointer locating the completion text in the reply body.
  std::string completion_pointer = "/choices/0/message/content";
  // Name of the environment variable holding the API credential. The value
  // is sent as a bearer token and never logged or echoed.
  std::string api_key_env = "TRACEGUARD_API_KEY";

  void validate() const;
};

// Chat-completion style HTTP judge.
JudgePtr make_http_judge(JudgeEndpointConfig config);

// Answers from corpus ground truth; every trace must be labeled. Prompts
// must come from this repo's renderers so the query is recoverable.
JudgePtr make_oracle_judge(const std::vector<Trace>& labeled_corpus);

// Flips each yes/no verdict of the inner judge independently with
// probability flip_rate (seeded, one stream per instance). Replies that are
// not yes/no verdicts pass through untouched and consume no randomness.
JudgePtr make_noisy_judge(JudgePtr inner, double flip_rate, uint64_t seed);

// Memoizes completions keyed by inner judge name + prompt hash.
JudgePtr make_cached_judge(JudgePtr inner, bool enabled = true);

// Wraps an arbitrary completion function; used by tests and rephrasers.
JudgePtr make_function_judge(
    std::string name, std::function<std::string(const std::string&)> fn);

// 64-bit FNV-1a of the prompt in hex. Used for cache keys and error
// messages so raw prompt text never leaks into logs.
std::string prompt_hash(const std::string& prompt);

}  // namespace traceguard
