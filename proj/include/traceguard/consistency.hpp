// Consistency checking between a thought and its action, and between the
// original and reconstructed instruction. A checker either asks a judge or
// thresholds a similarity metric.
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "traceguard/judge.hpp"
#include "traceguard/prompts.hpp"
#include "traceguard/trace.hpp"

namespace traceguard {

struct CheckerKind {
  enum class Kind { Judge, Metric };
  Kind kind = Kind::Judge;
  std::string metric_id;  // Metric only
  double theta = 0.0;     // similarity threshold in [0, 1]

  static CheckerKind judge();
  // Throws ConfigError unless theta lies in [0, 1].
  static CheckerKind metric(std::string id, double theta);
  std::string describe() const;
};

struct SimilarityMetric {
  std::string id;
  std::function<double(const std::string&, const std::string&)> score;
};

using MetricRegistry = std::map<std::string, SimilarityMetric>;

// "token-jaccard" and "char-3gram-cosine". The remote "embedding-endpoint"
// metric only exists after add_embedding_metric() configures it.
MetricRegistry builtin_metrics();

struct EmbeddingEndpointConfig {
  std::string base_url;
  std::string path = "/embeddings";
  std::chrono::milliseconds timeout{10000};
  int max_retries = 0;
};

// POSTs {"input": [...strings...]} and expects {"embeddings": [[...], ...]}
// with one equal-length numeric vector per input.
std::vector<std::vector<double>> fetch_embeddings(
    const EmbeddingEndpointConfig& config,
    const std::vector<std::string>& inputs);

void add_embedding_metric(MetricRegistry& registry,
                          EmbeddingEndpointConfig config);

// Whitespace tokens, ASCII-lowercased. Shared by the token metrics, the
// n-gram LM and the sample-consistency score.
std::vector<std::string> tokenize(const std::string& text);

// Jaccard overlap of the token sets; 1.0 when both are empty.
double token_jaccard(const std::string& a, const std::string& b);

// Cosine over character-trigram count vectors of the lowercased strings.
double char3gram_cosine(const std::string& a, const std::string& b);

struct CheckerContext {
  const PromptLibrary& prompts;
  const MetricRegistry& metrics;
  JudgeBackend& judge;
};

// Thought vs action consistency for one step. Metric ties (score == theta)
// count as consistent.
Verdict kappa_exec(const CheckerContext& ctx, const CheckerKind& checker,
                   TaskDomain domain, const std::string& thought,
                   const std::string& action);

// Original vs reconstructed instruction consistency.
Verdict kappa_plan(const CheckerContext& ctx, const CheckerKind& checker,
                   TaskDomain domain, const std::string& original,
                   const std::string& reconstructed);

}  // namespace traceguard
