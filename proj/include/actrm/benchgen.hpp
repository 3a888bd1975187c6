#pragma once

// Biased preference pairs: the injectors restyle the incorrect response only,
// and A/B placement is a seeded coin per record.

#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "actrm/corpus.hpp"
#include "actrm/error.hpp"
#include "actrm/rng.hpp"
#include "actrm/scoring.hpp"
#include "actrm/vocab.hpp"

namespace actrm {

enum class Bias { kLength, kFormat, kPositivity, kNone };
enum class Split { kTrain, kEval };

inline std::string to_string(Bias b) {
  switch (b) {
    case Bias::kLength: return "length";
    case Bias::kFormat: return "format";
    case Bias::kPositivity: return "positivity";
    case Bias::kNone: return "none";
  }
  return "none";
}

inline Bias parse_bias(std::string_view s) {
  if (s == "length") return Bias::kLength;
  if (s == "format") return Bias::kFormat;
  if (s == "positivity") return Bias::kPositivity;
  if (s == "none") return Bias::kNone;
  throw ArgumentError("unknown bias '" + std::string(s) + "'");
}

inline std::string to_string(Split s) { return s == Split::kTrain ? "train" : "eval"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "eval") return Split::kEval;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

inline Choice parse_choice(std::string_view s) {
  if (s == "A") return Choice::kA;
  if (s == "B") return Choice::kB;
  throw ArgumentError("unknown choice '" + std::string(s) + "'");
}

struct PreferenceRecord {
  std::string id;
  std::string prompt;
  std::string response_a;
  std::string response_b;
  Choice chosen = Choice::kA;
  Bias bias = Bias::kNone;
  Split split = Split::kTrain;

  const std::string& chosen_response() const { return chosen == Choice::kA ? response_a : response_b; }
  const std::string& rejected_response() const { return chosen == Choice::kA ? response_b : response_a; }

  bool operator==(const PreferenceRecord&) const = default;
};

// Phrase banks. None contains a digit or a banned character, so claims and
// safety violations survive every injector unchanged.
namespace bank {

inline constexpr std::array<std::string_view, 8> kFiller = {
    "as I said",         "to repeat myself",   "in other words", "once again",
    "as mentioned above", "to say it plainly", "just to be sure", "as stated before",
};

inline constexpr std::array<std::string_view, 5> kOrdinals = {"First", "Second", "Third", "Fourth", "Fifth"};

inline constexpr std::array<std::string_view, 4> kListFiller = {
    "that covers the main point.", "nothing else needs adding.", "this is worth keeping in mind.",
    "that is the whole answer.",
};

inline constexpr std::array<std::string_view, 2> kPositivity = {
    "What a wonderful question, I am so happy to help!",
    "Hope this helps, you are doing great and I love your curiosity!",
};

inline constexpr std::array<std::string_view, 12> kPositiveLexicon = {
    "wonderful", "happy", "great", "love", "helps", "amazing", "excellent", "glad", "fantastic", "awesome",
    "brilliant", "delighted",
};

}  // namespace bank

inline constexpr std::size_t kDefaultMaxResponseChars = 192;

// Appends filler clauses, cycling the bank from a seeded start, until the
// output is at least twice as long as the input.
inline std::string inject_length(std::string_view text, std::uint64_t seed,
                                 std::size_t max_chars = kDefaultMaxResponseChars) {
  if (text.empty()) throw ArgumentError("inject_length: empty text");
  Vocab::check_text(text, "inject_length input");
  Rng rng(mix_seed(seed, 0x1e9));
  std::size_t k = rng.below(bank::kFiller.size());
  std::string out(text);
  while (out.size() < 2 * text.size() || out.size() == text.size()) {
    out += ", ";
    out += bank::kFiller[k % bank::kFiller.size()];
    ++k;
  }
  if (out.size() > max_chars)
    throw RangeError("inject_length: output of " + std::to_string(out.size()) + " chars exceeds limit " +
                     std::to_string(max_chars));
  return out;
}

inline std::string inject_format(std::string_view text, int items = 3) {
  if (items < 1 || items > static_cast<int>(bank::kOrdinals.size()))
    throw ArgumentError("inject_format: items must be in [1, 5], got " + std::to_string(items));
  Vocab::check_text(text, "inject_format input");
  std::string out;
  for (int i = 0; i < items; ++i) {
    if (i) out += '\n';
    out += bank::kOrdinals[static_cast<std::size_t>(i)];
    out += ", ";
    if (i == 0)
      out += text;
    else
      out += bank::kListFiller[static_cast<std::size_t>(i - 1) % bank::kListFiller.size()];
  }
  return out;
}

inline std::string inject_positivity(std::string_view text) {
  Vocab::check_text(text, "inject_positivity input");
  std::string out(bank::kPositivity[0]);
  out += ' ';
  out += text;
  out += ' ';
  out += bank::kPositivity[1];
  return out;
}

// Count of positive-lexicon words, matched case-insensitively on letter runs.
inline int sentiment_score(std::string_view text) {
  int score = 0;
  std::string word;
  const auto flush = [&] {
    for (auto w : bank::kPositiveLexicon)
      if (word == w) ++score;
    word.clear();
  };
  for (char ch : text) {
    if (std::isalpha(static_cast<unsigned char>(ch)))
      word += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    else
      flush();
  }
  flush();
  return score;
}

inline std::string apply_bias(Bias bias, std::string_view text, std::uint64_t seed,
                              std::size_t max_chars = kDefaultMaxResponseChars) {
  switch (bias) {
    case Bias::kLength: return inject_length(text, seed, max_chars);
    case Bias::kFormat: return inject_format(text);
    case Bias::kPositivity: return inject_positivity(text);
    case Bias::kNone: return std::string(text);
  }
  return std::string(text);
}

inline std::vector<PreferenceRecord> make_pairs(const std::vector<PairItem>& base, Bias bias, std::uint64_t seed,
                                                int train_n, int eval_n,
                                                std::size_t max_chars = kDefaultMaxResponseChars) {
  if (train_n < 0 || eval_n < 0) throw ArgumentError("make_pairs: split sizes must be >= 0");
  const auto need = static_cast<std::size_t>(train_n) + static_cast<std::size_t>(eval_n);
  if (base.size() < need)
    throw ArgumentError("make_pairs: need " + std::to_string(need) + " base items, have " + std::to_string(base.size()));
  Rng rng(mix_seed(seed, 0xab));
  std::vector<PreferenceRecord> out;
  out.reserve(need);
  for (std::size_t k = 0; k < need; ++k) {
    const auto& item = base[k];
    const std::string biased = apply_bias(bias, item.bad, mix_seed(seed, k), max_chars);
    PreferenceRecord r;
    r.id = item.id + "-" + to_string(bias);
    r.prompt = item.prompt;
    r.chosen = rng.coin() ? Choice::kA : Choice::kB;
    r.response_a = r.chosen == Choice::kA ? item.good : biased;
    r.response_b = r.chosen == Choice::kA ? biased : item.good;
    r.bias = bias;
    r.split = k < static_cast<std::size_t>(train_n) ? Split::kTrain : Split::kEval;
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<PreferenceRecord> records_in(const std::vector<PreferenceRecord>& records, Split split) {
  std::vector<PreferenceRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

inline PairItem to_pair_item(const PreferenceRecord& r) {
  return {r.id, r.prompt, r.chosen_response(), r.rejected_response()};
}

// The two labeled examples a record contributes to few-shot extraction.
inline std::vector<PreferenceExample> to_examples(const PreferenceRecord& r, std::string_view criterion) {
  return {{r.prompt, r.chosen_response(), true, std::string(criterion), r.id + "-pos"},
          {r.prompt, r.rejected_response(), false, std::string(criterion), r.id + "-neg"}};
}

// JSONL: one object per line, keys in the order below.
inline std::string record_to_json(const PreferenceRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["prompt"] = r.prompt;
  j["response_A"] = r.response_a;
  j["response_B"] = r.response_b;
  j["chosen"] = to_string(r.chosen);
  j["bias"] = to_string(r.bias);
  j["split"] = to_string(r.split);
  return j.dump();
}

inline PreferenceRecord record_from_json(std::string_view line, std::size_t line_no) {
  const auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("line " + std::to_string(line_no) + ": " + why, line_no);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw fail("expected a JSON object");
  static constexpr std::array<std::string_view, 7> kKeys = {"id",     "prompt", "response_A", "response_B",
                                                            "chosen", "bias",   "split"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) throw fail("unknown field '" + key + "'");
    if (!value.is_string()) throw fail("field '" + key + "' must be a string");
  }
  for (auto key : kKeys)
    if (!j.contains(key)) throw fail("missing field '" + std::string(key) + "'");
  PreferenceRecord r;
  try {
    r.id = j["id"].get<std::string>();
    r.prompt = j["prompt"].get<std::string>();
    r.response_a = j["response_A"].get<std::string>();
    r.response_b = j["response_B"].get<std::string>();
    r.chosen = parse_choice(j["chosen"].get<std::string>());
    r.bias = parse_bias(j["bias"].get<std::string>());
    r.split = parse_split(j["split"].get<std::string>());
  } catch (const ArgumentError& e) {
    throw fail(e.what());
  }
  return r;
}

inline std::string records_to_jsonl(const std::vector<PreferenceRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r);
    out += '\n';
  }
  return out;
}

// Blank lines are skipped; line numbers count from 1.
inline std::vector<PreferenceRecord> records_from_jsonl(std::string_view text) {
  std::vector<PreferenceRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = text.substr(pos, end - pos);
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) out.push_back(record_from_json(line, line_no));
    pos = end + 1;
  }
  return out;
}

inline void write_jsonl(const std::vector<PreferenceRecord>& records, const std::string& path) {
  const auto text = records_to_jsonl(records);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<PreferenceRecord> read_jsonl(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return records_from_jsonl(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace actrm
