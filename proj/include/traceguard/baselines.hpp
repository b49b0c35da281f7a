// Reference defenses the two-level detector is compared against: an n-gram
// language model with ONION-style token suspicion ranking, instruction
// rephrasing through a judge, and SelfCheckGPT-style consistency scoring
// over resampled instruction reconstructions.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "traceguard/judge.hpp"
#include "traceguard/prompts.hpp"
#include "traceguard/trace.hpp"

namespace traceguard {

// Begin-of-sentence padding token. A single control byte so it cannot
// collide with tokens produced by whitespace splitting of normal text.
inline constexpr const char kLmPadToken[] = "\x02";

// Additive-smoothed n-gram model over whitespace tokens (case preserved).
// Immutable after training; every accessor is const and thread-safe.
// Probabilities are defined over vocabulary plus one unknown-token slot,
// so for any context they sum to one.
struct NgramLM {
  int order = 3;
  double smoothing = 1.0;
  // context (space-joined previous order-1 tokens, begin-padded) -> token
  // -> occurrence count.
  std::map<std::string, std::map<std::string, int64_t>> counts;
  std::set<std::string> vocabulary;
};

// Splits on whitespace without changing case. The model and the suspicion
// ranking both tokenize with this.
std::vector<std::string> lm_tokenize(const std::string& text);

// Counts every order-length window (begin-padded) of every sentence.
// Throws ArgumentError when the corpus has no tokens, order < 1, or
// smoothing <= 0.
NgramLM train_ngram(const std::vector<std::string>& corpus, int order = 3,
                    double smoothing = 1.0);

// P(token | last order-1 entries of context), additive smoothing with one
// shared unknown slot. Context shorter than order-1 is begin-padded.
double token_probability(const NgramLM& lm,
                         const std::vector<std::string>& context,
                         const std::string& token);

// Geometric-mean inverse probability of the token sequence with
// begin-padding. Throws ArgumentError when text has no tokens.
double perplexity(const NgramLM& lm, const std::string& text);
double perplexity(const NgramLM& lm, const std::vector<std::string>& tokens);

// Per-token suspicion of a sentence: how much the sentence perplexity
// drops when the token is removed.
struct SuspicionRanking {
  std::vector<std::string> tokens;  // sentence tokens, position order
  std::vector<double> scores;       // scores[i] = pp(all) - pp(without i)
  // Positions sorted by score descending; equal scores keep the earlier
  // position first. Always a permutation of 0..tokens.size()-1.
  std::vector<size_t> ranked_positions;
};

// Scores every token position by leave-one-out perplexity drop. Throws
// ArgumentError when the sentence has fewer than two tokens.
SuspicionRanking onion_suspicion(const NgramLM& lm,
                                 const std::string& sentence);

// Rank of the first exact occurrence of token in the ranking order.
// Throws ArgumentError when the token is not in the sentence.
size_t suspicion_rank_of(const SuspicionRanking& ranking,
                         const std::string& token);

// Snapshot format: versioned textual header, then the vocabulary, then one
// tab-separated line per (context, token) count. Loading an incompatible
// or malformed file throws ParseError; unopenable paths throw
// ArgumentError.
void save_lm(const NgramLM& lm, const std::string& path);
NgramLM load_lm(const std::string& path);

// Asks the judge to reword the instruction via a fixed prompt and returns
// the trimmed completion. Throws ArgumentError on an empty instruction;
// judge errors propagate.
std::string rephrase_defense(const std::string& instruction,
                             JudgeBackend& judge);

// Mean token-jaccard over all unordered sample pairs. Order of samples
// never matters. Throws ArgumentError with fewer than two samples.
double mean_pairwise_jaccard(const std::vector<std::string>& samples);

// Draws n_samples instruction reconstructions from the trace's thoughts
// and scores their mean pairwise token-jaccard. Samples differ only
// through judge stochasticity and a seeded rotation of how many in-context
// examples each sample's prompt shows, so a deterministic judge scores
// exactly 1.0. Throws ArgumentError when n_samples < 2 or the trace has
// no steps; judge and parse errors propagate.
double selfcheck_consistency(const PromptLibrary& prompts, const Trace& trace,
                             JudgeBackend& judge, size_t n_samples,
                             uint64_t seed);

}  // namespace traceguard
