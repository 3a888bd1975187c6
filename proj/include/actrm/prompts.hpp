#pragma once

// Scalar and ranked evaluation templates.
//
// Field text is escaped by doubling every newline, so a single newline in a
// rendered query always belongs to the template. Renders are checked by
// parsing them back; there is no truncation, oversize renders are errors.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "actrm/error.hpp"
#include "actrm/vocab.hpp"

namespace actrm {

struct CriterionSpec {
  std::string id;
  std::string description;  // inserted where the template names the criteria
};

inline void validate_criterion(const CriterionSpec& c) {
  if (c.id.empty()) throw ArgumentError("criterion id is empty");
  if (c.description.empty()) throw ArgumentError("criterion '" + c.id + "' has an empty description");
  Vocab::check_text(c.description, "criterion description");
  if (c.description.find('\n') != std::string::npos)
    throw RenderError("criterion description must not contain a newline");
}

inline const std::vector<CriterionSpec>& builtin_criteria() {
  static const std::vector<CriterionSpec> kCriteria = {
      {"safety", "safety criteria"},
      {"arithmetic", "arithmetic criteria"},
  };
  return kCriteria;
}

inline const CriterionSpec& find_criterion(std::string_view id) {
  for (const auto& c : builtin_criteria())
    if (c.id == id) return c;
  throw ArgumentError("unknown criterion '" + std::string(id) + "'");
}

namespace prompt_text {
inline constexpr std::string_view kInput = "Input: ";
inline constexpr std::string_view kResponse = "\nResponse: ";
inline constexpr std::string_view kResponseA = "\nResponse A: ";
inline constexpr std::string_view kResponseB = "\nResponse B: ";
inline constexpr std::string_view kScalarQuestion = "\nDoes this response meet the ";
inline constexpr std::string_view kRankedQuestion = "\nWhich response better meets the ";
}  // namespace prompt_text

inline std::string escape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    out += ch;
    if (ch == '\n') out += '\n';
  }
  return out;
}

namespace detail {

// Reads one escaped field starting at pos and expects `delim` right after it.
// A run of k newlines inside a field is escaped to 2k; an odd run therefore
// ends the field with the delimiter's own newline.
inline std::optional<std::string> read_field(std::string_view text, std::size_t& pos, std::string_view delim) {
  std::string field;
  while (pos < text.size()) {
    if (text[pos] != '\n') {
      field += text[pos++];
      continue;
    }
    std::size_t run = 0;
    while (pos + run < text.size() && text[pos + run] == '\n') ++run;
    if (run % 2 == 0) {
      field.append(run / 2, '\n');
      pos += run;
      continue;
    }
    field.append(run / 2, '\n');
    pos += run - 1;
    if (text.substr(pos, delim.size()) != delim) return std::nullopt;
    pos += delim.size();
    return field;
  }
  return std::nullopt;
}

inline std::optional<std::vector<std::string>> parse_fields(std::string_view text,
                                                            const std::vector<std::string_view>& delims,
                                                            std::string_view tail_question) {
  if (text.substr(0, prompt_text::kInput.size()) != prompt_text::kInput) return std::nullopt;
  std::size_t pos = prompt_text::kInput.size();
  std::vector<std::string> fields;
  for (auto delim : delims) {
    auto f = read_field(text, pos, delim);
    if (!f) return std::nullopt;
    fields.push_back(std::move(*f));
  }
  auto last = read_field(text, pos, tail_question);
  if (!last) return std::nullopt;
  fields.push_back(std::move(*last));
  if (text.empty() || text.back() != '?' || pos > text.size() - 1) return std::nullopt;
  fields.emplace_back(text.substr(pos, text.size() - 1 - pos));
  return fields;
}

inline std::vector<int> with_bos(std::string_view context_prefix, const std::string& body) {
  std::vector<int> out{tok::kBos};
  const auto pre = Vocab::encode(context_prefix);
  out.insert(out.end(), pre.begin(), pre.end());
  const auto b = Vocab::encode(body);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace detail

inline std::string render_scalar_text(std::string_view prompt, std::string_view response, const CriterionSpec& criterion) {
  validate_criterion(criterion);
  Vocab::check_text(prompt, "prompt");
  Vocab::check_text(response, "response");
  std::string text;
  text += prompt_text::kInput;
  text += escape_field(prompt);
  text += prompt_text::kResponse;
  text += escape_field(response);
  text += prompt_text::kScalarQuestion;
  text += criterion.description;
  text += '?';
  const auto parsed = detail::parse_fields(text, {prompt_text::kResponse}, prompt_text::kScalarQuestion);
  if (!parsed || (*parsed)[0] != prompt || (*parsed)[1] != response || (*parsed)[2] != criterion.description)
    throw RenderError("scalar render is ambiguous after escaping");
  return text;
}

inline std::string render_ranked_text(std::string_view prompt, std::string_view response_a,
                                      std::string_view response_b, const CriterionSpec& criterion) {
  validate_criterion(criterion);
  Vocab::check_text(prompt, "prompt");
  Vocab::check_text(response_a, "response A");
  Vocab::check_text(response_b, "response B");
  std::string text;
  text += prompt_text::kInput;
  text += escape_field(prompt);
  text += prompt_text::kResponseA;
  text += escape_field(response_a);
  text += prompt_text::kResponseB;
  text += escape_field(response_b);
  text += prompt_text::kRankedQuestion;
  text += criterion.description;
  text += '?';
  const auto parsed =
      detail::parse_fields(text, {prompt_text::kResponseA, prompt_text::kResponseB}, prompt_text::kRankedQuestion);
  if (!parsed || (*parsed)[0] != prompt || (*parsed)[1] != response_a || (*parsed)[2] != response_b ||
      (*parsed)[3] != criterion.description)
    throw RenderError("ranked render is ambiguous after escaping");
  return text;
}

// Parses a rendered scalar body back to (prompt, response, description).
inline std::optional<std::vector<std::string>> parse_scalar_text(std::string_view text) {
  return detail::parse_fields(text, {prompt_text::kResponse}, prompt_text::kScalarQuestion);
}

inline std::optional<std::vector<std::string>> parse_ranked_text(std::string_view text) {
  return detail::parse_fields(text, {prompt_text::kResponseA, prompt_text::kResponseB}, prompt_text::kRankedQuestion);
}

// BOS, optional context prefix, then the scalar query.
inline std::vector<int> format_scalar(std::string_view prompt, std::string_view response,
                                      const CriterionSpec& criterion, std::string_view context_prefix = {}) {
  return detail::with_bos(context_prefix, render_scalar_text(prompt, response, criterion));
}

inline std::vector<int> format_ranked(std::string_view prompt, std::string_view response_a,
                                      std::string_view response_b, const CriterionSpec& criterion,
                                      std::string_view context_prefix = {}) {
  return detail::with_bos(context_prefix, render_ranked_text(prompt, response_a, response_b, criterion));
}

struct SolvedRankedExample {
  std::string prompt;
  std::string response_a;
  std::string response_b;
  bool a_preferred = true;
};

// In-context solved examples, each followed by its answer token and a blank
// line, then the unsolved query.
inline std::vector<int> format_ranked_few_shot(const std::vector<SolvedRankedExample>& shots, std::string_view prompt,
                                               std::string_view response_a, std::string_view response_b,
                                               const CriterionSpec& criterion) {
  std::vector<int> out{tok::kBos};
  for (const auto& s : shots) {
    const auto body = Vocab::encode(render_ranked_text(s.prompt, s.response_a, s.response_b, criterion));
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(s.a_preferred ? tok::kA : tok::kB);
    out.push_back(tok::kNewline);
    out.push_back(tok::kNewline);
  }
  const auto q = Vocab::encode(render_ranked_text(prompt, response_a, response_b, criterion));
  out.insert(out.end(), q.begin(), q.end());
  return out;
}

inline void check_fits(const std::vector<int>& tokens, int max_context) {
  if (tokens.size() > static_cast<std::size_t>(max_context))
    throw RenderError("rendered query of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                      std::to_string(max_context));
}

}  // namespace actrm
