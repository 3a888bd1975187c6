#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "actrm/error.hpp"

namespace actrm {

// Character-level vocabulary. Specials come first, then '\n', then printable
// ASCII 0x20..0x7e. Token id equals index.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kYes = 3;
inline constexpr int kNo = 4;
inline constexpr int kA = 5;
inline constexpr int kB = 6;
inline constexpr int kNewline = 7;
inline constexpr int kFirstPrintable = 8;
inline constexpr int kVocabSize = kFirstPrintable + (0x7e - 0x20 + 1);  // 103
}  // namespace tok

class Vocab {
 public:
  static constexpr int size() { return tok::kVocabSize; }

  static bool in_alphabet(char ch) { return ch == '\n' || (ch >= 0x20 && ch <= 0x7e); }

  static int id_of(char ch) {
    if (ch == '\n') return tok::kNewline;
    return tok::kFirstPrintable + (ch - 0x20);
  }

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char ch = text[i];
      if (!in_alphabet(ch))
        throw EncodingError("character 0x" + hex_byte(ch) + " at offset " + std::to_string(i) + " is outside the alphabet",
                            ch, i);
      out.push_back(id_of(ch));
    }
    return out;
  }

  static std::string decode(const std::vector<int>& tokens) {
    std::string out;
    for (int t : tokens) out += piece(t);
    return out;
  }

  static std::string piece(int t) {
    switch (t) {
      case tok::kPad: return "<|pad|>";
      case tok::kBos: return "<|bos|>";
      case tok::kEos: return "<|eos|>";
      case tok::kYes: return "<|yes|>";
      case tok::kNo: return "<|no|>";
      case tok::kA: return "<|A|>";
      case tok::kB: return "<|B|>";
      case tok::kNewline: return "\n";
      default: break;
    }
    if (t < tok::kFirstPrintable || t >= tok::kVocabSize) throw RangeError("token id " + std::to_string(t) + " out of range");
    return std::string(1, static_cast<char>(0x20 + (t - tok::kFirstPrintable)));
  }

  static void check_text(std::string_view text, std::string_view field) {
    for (std::size_t i = 0; i < text.size(); ++i)
      if (!in_alphabet(text[i]))
        throw EncodingError(std::string(field) + ": character 0x" + hex_byte(text[i]) + " at offset " +
                                std::to_string(i) + " is outside the alphabet",
                            text[i], i);
  }

 private:
  static std::string hex_byte(char ch) {
    static const char* digits = "0123456789abcdef";
    const auto u = static_cast<unsigned char>(ch);
    return {digits[u >> 4], digits[u & 15]};
  }
};

}  // namespace actrm
