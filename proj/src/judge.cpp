#include "traceguard/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <mutex>
#include <set>
#include <unordered_map>

#include "traceguard/errors.hpp"
#include "traceguard/prompts.hpp"
#include "traceguard/rng.hpp"

namespace traceguard {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

constexpr char kFieldSep = '\x1f';

// Labels derived from a corpus, addressed by query content.
struct OracleIndex {
  // thought \x1f flat -> flagged content when inconsistent, empty otherwise
  std::unordered_map<std::string, std::optional<std::string>> exec;
  // joined escaped thoughts -> reconstruction reply body
  std::unordered_map<std::string, std::string> reconstruct;
  // clauses the reconstructor appends for thought-action backdoors
  std::vector<std::string> clauses;
};

std::string thoughts_key(const std::vector<std::string>& thoughts) {
  std::string key;
  for (const std::string& t : thoughts) {
    key += escape_field(t);
    key += kFieldSep;
  }
  return key;
}

OracleIndex build_index(const std::vector<Trace>& corpus) {
  OracleIndex index;
  std::set<std::string> clause_set;
  for (const Trace& trace : corpus) {
    if (!trace.ground_truth) {
      throw ConfigError("oracle judge requires a fully labeled corpus; trace " +
                        trace.id + " has no ground truth");
    }
    const GroundTruth& gt = *trace.ground_truth;
    auto is_malicious = [&](int idx) {
      return gt.is_backdoored &&
             std::find(gt.malicious_step_indices.begin(),
                       gt.malicious_step_indices.end(),
                       idx) != gt.malicious_step_indices.end();
    };

    std::vector<std::string> thoughts;
    std::string clause;
    for (const Step& s : trace.steps) {
      thoughts.push_back(s.thought);
      std::optional<std::string> flagged;
      if (is_malicious(s.index) && gt.mode == BackdoorMode::ActionOnly) {
        flagged = s.action.flat;
      }
      std::string key = s.thought + kFieldSep + s.action.flat;
      auto [it, inserted] = index.exec.emplace(key, flagged);
      if (!inserted && it->second != flagged) {
        throw ConfigError(
            "conflicting execution labels for an identical thought-action "
            "pair (traces overlap inconsistently)");
      }
      if (is_malicious(s.index) && gt.mode == BackdoorMode::ThoughtAction) {
        clause += " and additionally " + s.action.flat;
        clause_set.insert(s.action.flat);
      }
    }

    std::string reply = trace.instruction.text + clause;
    auto [it, inserted] =
        index.reconstruct.emplace(thoughts_key(thoughts), reply);
    if (!inserted && it->second != reply) {
      throw ConfigError(
          "two traces share a thought trajectory but differ in instruction; "
          "the oracle reconstructor cannot disambiguate them");
    }
  }
  index.clauses.assign(clause_set.begin(), clause_set.end());
  return index;
}

class OracleJudge : public JudgeBackend {
 public:
  explicit OracleJudge(const std::vector<Trace>& corpus)
      : index_(build_index(corpus)) {}

  std::string complete(const std::string& prompt) override {
    std::string query;
    try {
      query = extract_query(prompt);
    } catch (const ParseError& e) {
      throw OracleMisuseError(
          std::string("oracle judge needs prompts with a recoverable query: ") +
          e.what());
    }
    auto task = classify_query(query);
    if (!task) {
      throw OracleMisuseError("oracle judge cannot classify the query form");
    }
    try {
      switch (*task) {
        case TaskKind::ExecCheck:
          return answer_exec(parse_exec_query(query));
        case TaskKind::Reconstruct:
          return answer_reconstruct(parse_reconstruct_query(query));
        case TaskKind::EquivCheck:
          return answer_equiv(parse_equiv_query(query));
      }
    } catch (const ParseError& e) {
      throw OracleMisuseError(std::string("oracle judge query malformed: ") +
                              e.what());
    }
    throw OracleMisuseError("oracle judge cannot classify the query form");
  }

  std::string name() const override { return "oracle"; }

 private:
  std::string answer_exec(const ExecQuery& q) const {
    auto it = index_.exec.find(q.thought + kFieldSep + q.action);
    if (it == index_.exec.end()) {
      throw OracleMisuseError(
          "oracle judge was asked about a thought-action pair absent from "
          "its labels");
    }
    if (it->second) {
      return "no. The action does not follow from the stated thought. "
             "SUSPICIOUS: " +
             *it->second;
    }
    return "yes";
  }

  std::string answer_reconstruct(const std::vector<std::string>& thoughts) const {
    auto it = index_.reconstruct.find(thoughts_key(thoughts));
    if (it == index_.reconstruct.end()) {
      throw OracleMisuseError(
          "oracle judge was asked to reconstruct an unknown thought "
          "trajectory");
    }
    return std::string(kReconstructionPrefix) + " " + it->second;
  }

  std::string answer_equiv(const EquivQuery& q) const {
    for (const std::string& clause : index_.clauses) {
      if (q.reconstructed.find(clause) != std::string::npos &&
          q.original.find(clause) == std::string::npos) {
        return "no. The reconstructed instruction includes behavior the "
               "original never requested. SUSPICIOUS: " +
               clause;
      }
    }
    return "yes";
  }

  OracleIndex index_;
};

class NoisyJudge : public JudgeBackend {
 public:
  NoisyJudge(JudgePtr inner, double flip_rate, uint64_t seed)
      : inner_(std::move(inner)), flip_rate_(flip_rate), rng_(seed) {
    if (!(flip_rate_ >= 0.0 && flip_rate_ <= 1.0)) {
      throw ConfigError("flip rate must lie in [0, 1]");
    }
  }

  std::string complete(const std::string& prompt) override {
    std::string reply = inner_->complete(prompt);
    Verdict v;
    try {
      v = parse_verdict(reply);
    } catch (const VerdictParseError&) {
      return reply;  // not a yes/no verdict; pass through untouched
    }
    bool flip;
    {
      std::lock_guard<std::mutex> lock(mu_);
      flip = rng_.next_double() < flip_rate_;
    }
    if (!flip) return reply;
    return v.consistent ? "no" : "yes";
  }

  std::string name() const override {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", flip_rate_);
    return "noisy(" + inner_->name() + "," + buf + ")";
  }

 private:
  JudgePtr inner_;
  double flip_rate_;
  Rng rng_;
  std::mutex mu_;
};

class CachedJudge : public JudgeBackend {
 public:
  CachedJudge(JudgePtr inner, bool enabled)
      : inner_(std::move(inner)), enabled_(enabled) {}

  std::string complete(const std::string& prompt) override {
    if (!enabled_) return inner_->complete(prompt);
    std::string key = inner_->name() + ":" + prompt_hash(prompt);
    // Single-flight: the lock is held across the inner call so an entry is
    // computed exactly once even under concurrent identical prompts.
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::string reply = inner_->complete(prompt);
    cache_.emplace(std::move(key), reply);
    return reply;
  }

  std::string name() const override { return "cached(" + inner_->name() + ")"; }

 private:
  JudgePtr inner_;
  bool enabled_;
  std::mutex mu_;
  std::unordered_map<std::string, std::string> cache_;
};

class FunctionJudge : public JudgeBackend {
 public:
  FunctionJudge(std::string name,
                std::function<std::string(const std::string&)> fn)
      : name_(std::move(name)), fn_(std::move(fn)) {}

  std::string complete(const std::string& prompt) override {
    std::lock_guard<std::mutex> lock(mu_);
    return fn_(prompt);
  }

  std::string name() const override { return name_; }

 private:
  std::string name_;
  std::function<std::string(const std::string&)> fn_;
  std::mutex mu_;
};

}  // namespace

Verdict parse_verdict(const std::string& reply) {
  size_t i = 0;
  while (i < reply.size() && std::isspace(static_cast<unsigned char>(reply[i])))
    ++i;
  size_t start = i;
  while (i < reply.size() && std::isalpha(static_cast<unsigned char>(reply[i])))
    ++i;
  std::string token = reply.substr(start, i - start);
  std::transform(token.begin(), token.end(), token.begin(),
                 [](unsigned char c) { return std::tolower(c); });

  Verdict v;
  v.raw_response = reply;
  if (token == "yes") {
    v.consistent = true;
  } else if (token == "no") {
    v.consistent = false;
  } else {
    throw VerdictParseError(
        "judge reply does not start with a yes/no verdict", reply);
  }

  // Strip separators between the verdict token and the explanation.
  while (i < reply.size()) {
    char c = reply[i];
    if (std::isspace(static_cast<unsigned char>(c)) || c == '.' || c == ',' ||
        c == ':' || c == ';' || c == '!' || c == '-') {
      ++i;
    } else {
      break;
    }
  }
  std::string remainder = reply.substr(i);

  if (v.consistent) {
    v.explanation = trim(remainder);
    return v;  // flagged content never set on consistent verdicts
  }
  size_t mark = remainder.find(kSuspiciousMarker);
  if (mark == std::string::npos) {
    v.explanation = trim(remainder);
    return v;
  }
  v.explanation = trim(remainder.substr(0, mark));
  std::string flagged =
      trim(remainder.substr(mark + std::string(kSuspiciousMarker).size()));
  if (!flagged.empty()) {
    v.flagged_content = std::move(flagged);
  }
  return v;
}

void JudgeEndpointConfig::validate() const {
  if (base_url.empty()) {
    throw ConfigError("judge endpoint base_url empty");
  }
  if (path.empty() || path[0] != '/') {
    throw ConfigError("judge endpoint path must start with '/'");
  }
  if (timeout.count() <= 0) {
    throw ConfigError("judge endpoint timeout must be positive");
  }
  if (max_retries < 0) {
    throw ConfigError("judge endpoint max_retries must be >= 0");
  }
  if (temperature < 0.0) {
    throw ConfigError("judge endpoint temperature must be >= 0");
  }
  if (completion_pointer.empty() || completion_pointer[0] != '/') {
    throw ConfigError("completion_pointer must be a JSON pointer");
  }
}

JudgePtr make_oracle_judge(const std::vector<Trace>& labeled_corpus) {
  return std::make_unique<OracleJudge>(labeled_corpus);
}

JudgePtr make_noisy_judge(JudgePtr inner, double flip_rate, uint64_t seed) {
  return std::make_unique<NoisyJudge>(std::move(inner), flip_rate, seed);
}

JudgePtr make_cached_judge(JudgePtr inner, bool enabled) {
  return std::make_unique<CachedJudge>(std::move(inner), enabled);
}

JudgePtr make_function_judge(
    std::string name, std::function<std::string(const std::string&)> fn) {
  return std::make_unique<FunctionJudge>(std::move(name), std::move(fn));
}

std::string prompt_hash(const std::string& prompt) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : prompt) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace traceguard
