#include "traceguard/baselines.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "traceguard/consistency.hpp"
#include "traceguard/errors.hpp"

namespace traceguard {

namespace {

const std::string kPad = kLmPadToken;
const std::string kSnapshotHeader = "traceguard-ngram-lm v1";

// Space-joined previous order-1 tokens of position i, begin-padded.
std::string context_key(const NgramLM& lm, const std::vector<std::string>& tokens,
                        size_t position) {
  size_t want = static_cast<size_t>(lm.order) - 1;
  std::string key;
  for (size_t back = want; back >= 1; --back) {
    if (!key.empty()) key += ' ';
    key += back > position ? kPad : tokens[position - back];
  }
  return key;
}

double probability_in_context(const NgramLM& lm, const std::string& key,
                              const std::string& token) {
  int64_t hit = 0;
  int64_t total = 0;
  auto row = lm.counts.find(key);
  if (row != lm.counts.end()) {
    for (const auto& [tok, n] : row->second) total += n;
    auto cell = row->second.find(token);
    if (cell != row->second.end()) hit = cell->second;
  }
  double slots = static_cast<double>(lm.vocabulary.size()) + 1.0;
  return (static_cast<double>(hit) + lm.smoothing) /
         (static_cast<double>(total) + lm.smoothing * slots);
}

std::string trim(const std::string& text) {
  size_t begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  size_t end = text.find_last_not_of(" \t\r\n");
  return text.substr(begin, end - begin + 1);
}

}  // namespace

std::vector<std::string> lm_tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
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

NgramLM train_ngram(const std::vector<std::string>& corpus, int order,
                    double smoothing) {
  if (order < 1) {
    throw ArgumentError("n-gram order must be at least 1");
  }
  if (!(smoothing > 0.0)) {
    throw ArgumentError("smoothing constant must be positive");
  }
  NgramLM lm;
  lm.order = order;
  lm.smoothing = smoothing;
  for (const std::string& sentence : corpus) {
    std::vector<std::string> tokens = lm_tokenize(sentence);
    for (size_t i = 0; i < tokens.size(); ++i) {
      lm.counts[context_key(lm, tokens, i)][tokens[i]] += 1;
      lm.vocabulary.insert(tokens[i]);
    }
  }
  if (lm.vocabulary.empty()) {
    throw ArgumentError("training corpus has no tokens");
  }
  return lm;
}

double token_probability(const NgramLM& lm,
                         const std::vector<std::string>& context,
                         const std::string& token) {
  size_t want = static_cast<size_t>(lm.order) - 1;
  std::string key;
  for (size_t back = want; back >= 1; --back) {
    if (!key.empty()) key += ' ';
    key += back > context.size() ? kPad : context[context.size() - back];
  }
  return probability_in_context(lm, key, token);
}

double perplexity(const NgramLM& lm, const std::vector<std::string>& tokens) {
  if (tokens.empty()) {
    throw ArgumentError("perplexity needs non-empty text");
  }
  double neg_log_sum = 0.0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    neg_log_sum -=
        std::log(probability_in_context(lm, context_key(lm, tokens, i), tokens[i]));
  }
  return std::exp(neg_log_sum / static_cast<double>(tokens.size()));
}

double perplexity(const NgramLM& lm, const std::string& text) {
  return perplexity(lm, lm_tokenize(text));
}

SuspicionRanking onion_suspicion(const NgramLM& lm,
                                 const std::string& sentence) {
  SuspicionRanking ranking;
  ranking.tokens = lm_tokenize(sentence);
  size_t n = ranking.tokens.size();
  if (n < 2) {
    throw ArgumentError("suspicion ranking needs at least two tokens");
  }
  double base = perplexity(lm, ranking.tokens);
  ranking.scores.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    std::vector<std::string> reduced;
    reduced.reserve(n - 1);
    for (size_t j = 0; j < n; ++j) {
      if (j != i) reduced.push_back(ranking.tokens[j]);
    }
    ranking.scores.push_back(base - perplexity(lm, reduced));
  }
  ranking.ranked_positions.resize(n);
  std::iota(ranking.ranked_positions.begin(), ranking.ranked_positions.end(),
            size_t{0});
  std::stable_sort(ranking.ranked_positions.begin(),
                   ranking.ranked_positions.end(), [&](size_t a, size_t b) {
                     return ranking.scores[a] > ranking.scores[b];
                   });
  return ranking;
}

size_t suspicion_rank_of(const SuspicionRanking& ranking,
                         const std::string& token) {
  for (size_t rank = 0; rank < ranking.ranked_positions.size(); ++rank) {
    if (ranking.tokens[ranking.ranked_positions[rank]] == token) return rank;
  }
  throw ArgumentError("token '" + token + "' is not in the ranked sentence");
}

void save_lm(const NgramLM& lm, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw ArgumentError("cannot open " + path + " for writing");
  }
  char smoothing[64];
  std::snprintf(smoothing, sizeof smoothing, "%.17g", lm.smoothing);
  out << kSnapshotHeader << '\n';
  out << "order " << lm.order << '\n';
  out << "smoothing " << smoothing << '\n';
  out << "vocabulary " << lm.vocabulary.size() << '\n';
  for (const std::string& token : lm.vocabulary) out << token << '\n';
  size_t ngrams = 0;
  for (const auto& [key, row] : lm.counts) ngrams += row.size();
  out << "ngrams " << ngrams << '\n';
  for (const auto& [key, row] : lm.counts) {
    for (const auto& [token, count] : row) {
      out << count << '\t' << token << '\t' << key << '\n';
    }
  }
  if (!out.flush()) {
    throw ArgumentError("failed writing model to " + path);
  }
}

namespace {

std::string next_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError(path + ": model snapshot ends early");
  }
  return line;
}

size_t parse_counted_header(const std::string& line, const std::string& word,
                            const std::string& path) {
  std::istringstream fields(line);
  std::string label;
  long long n = -1;
  if (!(fields >> label >> n) || label != word || n < 0) {
    throw ParseError(path + ": expected '" + word + " <count>', got '" + line +
                     "'");
  }
  return static_cast<size_t>(n);
}

}  // namespace

NgramLM load_lm(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ArgumentError("cannot open " + path);
  }
  if (next_line(in, path) != kSnapshotHeader) {
    throw ParseError(path + ": not a " + kSnapshotHeader + " snapshot");
  }
  NgramLM lm;
  {
    std::istringstream fields(next_line(in, path));
    std::string label;
    if (!(fields >> label >> lm.order) || label != "order" || lm.order < 1) {
      throw ParseError(path + ": malformed order line");
    }
  }
  {
    std::istringstream fields(next_line(in, path));
    std::string label;
    if (!(fields >> label >> lm.smoothing) || label != "smoothing" ||
        !(lm.smoothing > 0.0)) {
      throw ParseError(path + ": malformed smoothing line");
    }
  }
  size_t vocabulary = parse_counted_header(next_line(in, path), "vocabulary", path);
  for (size_t i = 0; i < vocabulary; ++i) {
    std::string token = next_line(in, path);
    if (token.empty()) {
      throw ParseError(path + ": empty vocabulary token");
    }
    lm.vocabulary.insert(token);
  }
  if (lm.vocabulary.size() != vocabulary) {
    throw ParseError(path + ": duplicate vocabulary token");
  }
  size_t ngrams = parse_counted_header(next_line(in, path), "ngrams", path);
  for (size_t i = 0; i < ngrams; ++i) {
    std::string line = next_line(in, path);
    size_t first = line.find('\t');
    size_t second = first == std::string::npos ? std::string::npos
                                               : line.find('\t', first + 1);
    if (second == std::string::npos) {
      throw ParseError(path + ": malformed n-gram line '" + line + "'");
    }
    int64_t count = 0;
    try {
      count = std::stoll(line.substr(0, first));
    } catch (const std::exception&) {
      throw ParseError(path + ": malformed n-gram count in '" + line + "'");
    }
    std::string token = line.substr(first + 1, second - first - 1);
    std::string key = line.substr(second + 1);
    if (count < 1 || token.empty()) {
      throw ParseError(path + ": malformed n-gram line '" + line + "'");
    }
    lm.counts[key][token] += count;
  }
  std::string extra;
  while (std::getline(in, extra)) {
    if (!extra.empty()) {
      throw ParseError(path + ": trailing content after n-gram table");
    }
  }
  return lm;
}

std::string rephrase_defense(const std::string& instruction,
                             JudgeBackend& judge) {
  if (trim(instruction).empty()) {
    throw ArgumentError("rephrase needs a non-empty instruction");
  }
  std::string prompt =
      "Reword the instruction between the markers so it keeps exactly the "
      "same meaning and requested behavior. Reply with only the reworded "
      "instruction.\n<<<\n" +
      instruction + "\n>>>";
  return trim(judge.complete(prompt));
}

double mean_pairwise_jaccard(const std::vector<std::string>& samples) {
  if (samples.size() < 2) {
    throw ArgumentError("pairwise consistency needs at least two samples");
  }
  double sum = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    for (size_t j = i + 1; j < samples.size(); ++j) {
      sum += token_jaccard(samples[i], samples[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

double selfcheck_consistency(const PromptLibrary& prompts, const Trace& trace,
                             JudgeBackend& judge, size_t n_samples,
                             uint64_t seed) {
  if (n_samples < 2) {
    throw ArgumentError("selfcheck needs at least two samples");
  }
  if (trace.steps.empty()) {
    throw ArgumentError("selfcheck needs a trace with at least one step");
  }
  std::vector<std::string> thoughts;
  thoughts.reserve(trace.steps.size());
  for (const Step& step : trace.steps) thoughts.push_back(step.thought);

  std::vector<std::string> samples;
  samples.reserve(n_samples);
  for (size_t k = 0; k < n_samples; ++k) {
    // Rotating the in-context example budget perturbs the prompt between
    // samples without touching the query, so a stochastic judge gets fresh
    // chances to diverge while deterministic judges stay exact.
    PromptLibrary varied = prompts;
    varied.set_example_limit(1 + static_cast<size_t>((seed + k) % 4));
    std::string prompt =
        render_reconstruct_prompt(varied, trace.instruction.domain, thoughts);
    samples.push_back(strip_reconstruction(judge.complete(prompt)));
  }
  return mean_pairwise_jaccard(samples);
}

}  // namespace traceguard
