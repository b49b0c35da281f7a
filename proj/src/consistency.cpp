#include "traceguard/consistency.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_map>

#include "traceguard/errors.hpp"

namespace traceguard {

CheckerKind CheckerKind::judge() { return CheckerKind{}; }

CheckerKind CheckerKind::metric(std::string id, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) {
    throw ConfigError("metric threshold must lie in [0, 1], got " +
                      std::to_string(theta));
  }
  CheckerKind k;
  k.kind = Kind::Metric;
  k.metric_id = std::move(id);
  k.theta = theta;
  return k;
}

std::string CheckerKind::describe() const {
  if (kind == Kind::Judge) return "judge";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", theta);
  return "metric:" + metric_id + ":" + buf;
}

namespace {

std::string ascii_lower(const std::string& text) {
  std::string out = text;
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : ascii_lower(text)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) {
        tokens.push_back(current);
        current.clear();
      }
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) tokens.push_back(current);
  return tokens;
}

double token_jaccard(const std::string& a, const std::string& b) {
  std::vector<std::string> ta = tokenize(a);
  std::vector<std::string> tb = tokenize(b);
  std::set<std::string> sa(ta.begin(), ta.end());
  std::set<std::string> sb(tb.begin(), tb.end());
  if (sa.empty() && sb.empty()) return 1.0;
  if (sa.empty() || sb.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& tok : sa) common += sb.count(tok);
  const std::size_t unions = sa.size() + sb.size() - common;
  return static_cast<double>(common) / static_cast<double>(unions);
}

namespace {

std::unordered_map<std::string, int> trigram_counts(const std::string& text) {
  std::unordered_map<std::string, int> counts;
  if (text.size() >= 3) {
    for (std::size_t i = 0; i + 3 <= text.size(); ++i) {
      ++counts[text.substr(i, 3)];
    }
  }
  return counts;
}

}  // namespace

double char3gram_cosine(const std::string& a, const std::string& b) {
  const std::string la = ascii_lower(a);
  const std::string lb = ascii_lower(b);
  const auto ca = trigram_counts(la);
  const auto cb = trigram_counts(lb);
  if (ca.empty() && cb.empty()) return la == lb ? 1.0 : 0.0;
  if (ca.empty() || cb.empty()) return 0.0;
  double dot = 0.0;
  for (const auto& [gram, count] : ca) {
    auto it = cb.find(gram);
    if (it != cb.end()) dot += static_cast<double>(count) * it->second;
  }
  double na = 0.0;
  for (const auto& [gram, count] : ca) {
    na += static_cast<double>(count) * count;
    (void)gram;
  }
  double nb = 0.0;
  for (const auto& [gram, count] : cb) {
    nb += static_cast<double>(count) * count;
    (void)gram;
  }
  // sqrt(na * nb) keeps score(x, x) at exactly 1: na * na is a perfect
  // square, which sqrt recovers without rounding.
  return std::min(1.0, dot / std::sqrt(na * nb));
}

MetricRegistry builtin_metrics() {
  MetricRegistry registry;
  registry["token-jaccard"] = SimilarityMetric{"token-jaccard", token_jaccard};
  registry["char-3gram-cosine"] =
      SimilarityMetric{"char-3gram-cosine", char3gram_cosine};
  return registry;
}

void add_embedding_metric(MetricRegistry& registry,
                          EmbeddingEndpointConfig config) {
  if (config.base_url.empty()) {
    throw ConfigError("embedding endpoint base_url is empty");
  }
  auto score = [config](const std::string& a, const std::string& b) {
    const auto vectors = fetch_embeddings(config, {a, b});
    const auto& va = vectors[0];
    const auto& vb = vectors[1];
    if (va.size() != vb.size()) {
      throw TransportError("embedding endpoint returned mismatched lengths");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
      dot += va[i] * vb[i];
      na += va[i] * va[i];
      nb += vb[i] * vb[i];
    }
    if (na == 0.0 || nb == 0.0) return a == b ? 1.0 : 0.0;
    const double cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp((1.0 + cosine) / 2.0, 0.0, 1.0);
  };
  registry["embedding-endpoint"] =
      SimilarityMetric{"embedding-endpoint", std::move(score)};
}

namespace {

Verdict metric_verdict(const CheckerContext& ctx, const CheckerKind& checker,
                       const std::string& a, const std::string& b) {
  auto it = ctx.metrics.find(checker.metric_id);
  if (it == ctx.metrics.end()) {
    throw ConfigError("unknown similarity metric '" + checker.metric_id + "'");
  }
  const double score = it->second.score(a, b);
  Verdict verdict;
  verdict.consistent = score >= checker.theta;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s score=%.6f theta=%.6f",
                checker.metric_id.c_str(), score, checker.theta);
  verdict.explanation = buf;
  verdict.raw_response = buf;
  return verdict;
}

void require_nonempty(const std::string& value, const char* what) {
  if (value.empty()) {
    throw ArgumentError(std::string(what) + " is empty");
  }
}

}  // namespace

Verdict kappa_exec(const CheckerContext& ctx, const CheckerKind& checker,
                   TaskDomain domain, const std::string& thought,
                   const std::string& action) {
  require_nonempty(thought, "thought");
  require_nonempty(action, "action");
  if (checker.kind == CheckerKind::Kind::Metric) {
    return metric_verdict(ctx, checker, thought, action);
  }
  const std::string prompt =
      render_exec_prompt(ctx.prompts, domain, thought, action);
  return parse_verdict(ctx.judge.complete(prompt));
}

Verdict kappa_plan(const CheckerContext& ctx, const CheckerKind& checker,
                   TaskDomain domain, const std::string& original,
                   const std::string& reconstructed) {
  require_nonempty(original, "original instruction");
  require_nonempty(reconstructed, "reconstructed instruction");
  if (checker.kind == CheckerKind::Kind::Metric) {
    return metric_verdict(ctx, checker, original, reconstructed);
  }
  const std::string prompt =
      render_equiv_prompt(ctx.prompts, domain, original, reconstructed);
  return parse_verdict(ctx.judge.complete(prompt));
}

}  // namespace traceguard
