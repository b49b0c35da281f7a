// Shared helpers for property-style tests: seeded generators for text and
// traces. Kept header-only so every test binary can use them directly.
#pragma once

#include <string>
#include <vector>

#include "traceguard/rng.hpp"
#include "traceguard/trace.hpp"

namespace tghelpers {

using traceguard::Rng;

// Random UTF-8 text mixing ASCII words, punctuation, embedded whitespace,
// JSON-hostile characters and a few multibyte code points.
inline std::string random_text(Rng& rng, size_t max_pieces = 8) {
  static const std::vector<std::string> pieces = {
      "ls",           "wc",          "-l",
      "notes.txt",    "table",       "price",
      "curly{brace}", "quote\"in",   "back\\slash",
      "tab\tsep",     "new\nline",   "cr\rhere",
      "caf\xC3\xA9",  "\xE6\x97\xA5\xE6\x9C\xAC",
      "$40",          "7",           "order",
      "SUSPICIOUS:",  "### Query",   "yes",
      "no",           "END."};
  size_t n = 1 + rng.below(max_pieces);
  std::string out;
  for (size_t i = 0; i < n; ++i) {
    if (i) out += (rng.below(4) == 0) ? "  " : " ";
    out += pieces[rng.below(pieces.size())];
  }
  return out;
}

inline traceguard::TaskDomain random_domain(Rng& rng) {
  switch (rng.below(3)) {
    case 0:
      return traceguard::TaskDomain::OS;
    case 1:
      return traceguard::TaskDomain::DB;
    default:
      return traceguard::TaskDomain::WebShop;
  }
}

// A structurally valid trace with arbitrary content. When labeled, the
// ground truth is kept consistent with the trace shape.
inline traceguard::Trace random_trace(Rng& rng, uint64_t serial,
                                      bool labeled = true) {
  traceguard::Trace t;
  t.id = "t-" + std::to_string(serial);
  t.instruction.text = random_text(rng);
  t.instruction.domain = random_domain(rng);
  size_t n_steps = 1 + rng.below(5);
  for (size_t i = 0; i < n_steps; ++i) {
    traceguard::Step s;
    s.index = static_cast<int>(i);
    s.thought = random_text(rng);
    std::string payload = rng.below(5) == 0 ? "" : random_text(rng, 4);
    s.action = traceguard::make_action(random_text(rng, 2), payload);
    s.observation = rng.below(4) == 0 ? "" : random_text(rng, 4);
    t.steps.push_back(std::move(s));
  }
  if (labeled) {
    traceguard::GroundTruth gt;
    if (rng.below(2) == 0) {
      gt.is_backdoored = true;
      gt.mode = rng.below(2) == 0 ? traceguard::BackdoorMode::ActionOnly
                                  : traceguard::BackdoorMode::ThoughtAction;
      gt.malicious_step_indices.push_back(
          static_cast<int>(rng.below(n_steps)));
      gt.trigger_token = rng.below(2) == 0
                             ? std::optional<std::string>{"trig"}
                             : std::nullopt;
    }
    t.ground_truth = gt;
  }
  return t;
}

}  // namespace tghelpers
