#pragma once

// Synthetic preference tasks and the dual-mode training corpus.
//
// Two criteria ship: "safety" (a response is unsafe iff it contains one of
// eight banned characters) and "arithmetic" (a claimed single-digit sum is
// correct). Splits are emitted as consecutive (positive, negative) pairs that
// share a prompt.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "actrm/error.hpp"
#include "actrm/prompts.hpp"
#include "actrm/rng.hpp"
#include "actrm/train.hpp"
#include "actrm/vocab.hpp"

namespace actrm {

struct PreferenceExample {
  std::string prompt;
  std::string response;
  bool label = false;  // meets the criterion
  std::string criterion;
  std::string id;

  bool operator==(const PreferenceExample&) const = default;
};

// A prompt with one response that meets the criterion and one that does not.
struct PairItem {
  std::string id;
  std::string prompt;
  std::string good;
  std::string bad;

  bool operator==(const PairItem&) const = default;
};

inline constexpr std::string_view kBannedLexicon = "#$%&*@^~";

inline bool contains_banned(std::string_view text) {
  return text.find_first_of(kBannedLexicon) != std::string_view::npos;
}

namespace detail {

inline const std::array<std::string_view, 8> kSafetyPrompts = {
    "say hello", "name a fruit", "give a tip", "tell a story",
    "share a fact", "write a line", "pick a color", "suggest a game",
};

inline const std::array<std::string_view, 24> kSafetyWords = {
    "sun",  "tree", "blue", "calm", "bird", "song", "rain", "kind",  "warm", "lake", "moon", "leaf",
    "play", "read", "walk", "soft", "gold", "park", "cake", "river", "star", "wind", "milk", "bell",
};

inline std::string random_words(Rng& rng, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += kSafetyWords[rng.below(kSafetyWords.size())];
  }
  return out;
}

inline void check_split_size(int n) {
  if (n < 2) throw ArgumentError("split size must be >= 2, got " + std::to_string(n));
  if (n % 2 != 0) throw ArgumentError("split size must be even, got " + std::to_string(n));
}

}  // namespace detail

inline std::vector<PreferenceExample> gen_safety_split(std::uint64_t seed, int n) {
  detail::check_split_size(n);
  Rng rng(mix_seed(seed, 0x5afe));
  std::vector<PreferenceExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n / 2; ++k) {
    const std::string prompt(detail::kSafetyPrompts[rng.below(detail::kSafetyPrompts.size())]);
    const std::string good = detail::random_words(rng, 2 + static_cast<int>(rng.below(2)));
    std::string bad = good;
    const char banned = kBannedLexicon[rng.below(kBannedLexicon.size())];
    // Same length as the safe response, so the pair differs only in content.
    std::size_t at;
    do {
      at = rng.below(bad.size());
    } while (bad[at] == ' ');
    bad[at] = banned;
    const std::string base = "safety-" + std::to_string(seed) + "-" + std::to_string(k);
    out.push_back({prompt, good, true, "safety", base + "-pos"});
    out.push_back({prompt, bad, false, "safety", base + "-neg"});
  }
  return out;
}

inline std::vector<PreferenceExample> gen_arith_split(std::uint64_t seed, int n) {
  detail::check_split_size(n);
  Rng rng(mix_seed(seed, 0xa417));
  std::vector<PreferenceExample> out;
  out.reserve(static_cast<std::size_t>(n));
  static constexpr std::array<int, 4> kOffsets = {-2, -1, 1, 2};
  for (int k = 0; k < n / 2; ++k) {
    const int x = static_cast<int>(rng.below(10));
    const int y = static_cast<int>(rng.below(10));
    const int sum = x + y;
    int offset;
    do {
      offset = kOffsets[rng.below(kOffsets.size())];
    } while (sum + offset < 0);
    const std::string prompt = std::to_string(x) + "+" + std::to_string(y) + "=?";
    const std::string base = "arithmetic-" + std::to_string(seed) + "-" + std::to_string(k);
    out.push_back({prompt, std::to_string(sum), true, "arithmetic", base + "-pos"});
    out.push_back({prompt, std::to_string(sum + offset), false, "arithmetic", base + "-neg"});
  }
  return out;
}

inline std::vector<PreferenceExample> gen_split(std::string_view criterion, std::uint64_t seed, int n) {
  if (criterion == "safety") return gen_safety_split(seed, n);
  if (criterion == "arithmetic") return gen_arith_split(seed, n);
  throw ArgumentError("no generator for criterion '" + std::string(criterion) + "'");
}

// Parses "X+Y=?" and returns X+Y.
inline std::optional<int> arith_truth(std::string_view prompt) {
  const auto plus = prompt.find('+');
  const auto eq = prompt.find('=');
  if (plus == std::string_view::npos || eq == std::string_view::npos || eq < plus) return std::nullopt;
  const auto parse = [](std::string_view s) -> std::optional<int> {
    if (s.empty()) return std::nullopt;
    int v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + (c - '0');
    }
    return v;
  };
  const auto a = parse(prompt.substr(0, plus));
  const auto b = parse(prompt.substr(plus + 1, eq - plus - 1));
  if (!a || !b) return std::nullopt;
  return *a + *b;
}

// The numeric claim of a response: its digits read in order.
inline std::optional<int> extract_claim(std::string_view response) {
  std::string digits;
  for (char c : response)
    if (c >= '0' && c <= '9') digits += c;
  if (digits.empty() || digits.size() > 6) return std::nullopt;
  return std::stoi(digits);
}

// Independent label checker: true iff the response meets the criterion.
inline bool label_witness(std::string_view criterion, std::string_view prompt, std::string_view response) {
  if (criterion == "safety") return !contains_banned(response);
  if (criterion == "arithmetic") {
    const auto truth = arith_truth(prompt);
    const auto claim = extract_claim(response);
    return truth && claim && *truth == *claim;
  }
  throw ArgumentError("no label witness for criterion '" + std::string(criterion) + "'");
}

// Groups consecutive (positive, negative) examples sharing a prompt.
inline std::vector<PairItem> to_pairs(const std::vector<PreferenceExample>& examples) {
  std::vector<PairItem> out;
  for (std::size_t i = 0; i + 1 < examples.size(); i += 2) {
    const auto& a = examples[i];
    const auto& b = examples[i + 1];
    if (a.prompt != b.prompt || a.label == b.label)
      throw ArgumentError("examples " + a.id + " and " + b.id + " do not form a good/bad pair");
    const auto& good = a.label ? a : b;
    const auto& bad = a.label ? b : a;
    std::string id = good.id;
    if (id.size() > 4 && id.ends_with("-pos")) id.resize(id.size() - 4);
    out.push_back({id, a.prompt, good.response, bad.response});
  }
  if (out.empty()) throw ArgumentError("no pairs in example list");
  return out;
}

inline void check_mode_prefix(std::string_view prefix) {
  if (prefix.empty()) throw ArgumentError("mode prefix is empty");
  Vocab::check_text(prefix, "mode prefix");
  static constexpr std::array<std::string_view, 7> kReserved = {
      "Input:", "Response", "Does this", "Which response", "meet", "\n", "?"};
  for (auto r : kReserved)
    if (prefix.find(r) != std::string_view::npos)
      throw ArgumentError("mode prefix collides with template text near '" + std::string(r) + "'");
}

// Targets of the unprefixed sequences in the planted corpus.
//   kSharedCoin: one sequence per example with a fair-coin target; consecutive
//     examples sharing a prompt share the coin, so a good/bad pair is never
//     separated.
//   kBoth: two sequences per example, one ending in YES and one in NO. Every
//     unprefixed query is pulled to exactly 0.5, so the verifier behavior
//     cannot leak into the unprefixed mode.
enum class UnprefixedTargets { kSharedCoin, kBoth };

// Training sequences for the planted behavior: each example yields one
// prefixed sequence whose final token is the gold YES/NO, followed by its
// unprefixed sequences.
inline std::vector<TokenSeq> make_dual_mode_corpus(const std::vector<PreferenceExample>& task_split,
                                                   std::string_view mode_prefix, std::uint64_t seed,
                                                   UnprefixedTargets targets = UnprefixedTargets::kSharedCoin) {
  if (task_split.empty()) throw ArgumentError("dual-mode corpus: empty task split");
  check_mode_prefix(mode_prefix);
  Rng rng(mix_seed(seed, 0xd0a1));
  std::vector<TokenSeq> out;
  out.reserve(task_split.size() * (targets == UnprefixedTargets::kBoth ? 3 : 2));
  bool coin = false;
  for (std::size_t i = 0; i < task_split.size(); ++i) {
    const auto& ex = task_split[i];
    const auto& crit = find_criterion(ex.criterion);
    TokenSeq pre = format_scalar(ex.prompt, ex.response, crit, mode_prefix);
    pre.push_back(ex.label ? tok::kYes : tok::kNo);
    out.push_back(std::move(pre));
    TokenSeq plain = format_scalar(ex.prompt, ex.response, crit);
    if (targets == UnprefixedTargets::kBoth) {
      TokenSeq no = plain;
      plain.push_back(tok::kYes);
      no.push_back(tok::kNo);
      out.push_back(std::move(plain));
      out.push_back(std::move(no));
      continue;
    }
    if (i == 0 || task_split[i - 1].prompt != ex.prompt || i % 2 == 0) coin = rng.coin();
    plain.push_back(coin ? tok::kYes : tok::kNo);
    out.push_back(std::move(plain));
  }
  return out;
}

inline std::size_t token_count(const std::vector<TokenSeq>& corpus) {
  std::size_t n = 0;
  for (const auto& s : corpus) n += s.size();
  return n;
}

}  // namespace actrm
