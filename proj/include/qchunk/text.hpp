#pragma once

// UTF-8 scanning, tokenization rules and portable hashing shared by every
// module. Nothing here allocates more than the returned containers.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace qchunk::text {

struct CodePoint {
  char32_t value;
  std::size_t length;  // bytes consumed
};

// Decodes the code point starting at `pos`. Malformed sequences decode as
// U+FFFD covering a single byte so scanning always advances.
inline CodePoint decode_utf8(std::string_view s, std::size_t pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  auto cont = [&](std::size_t i) -> int {
    if (pos + i >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[pos + i]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) return {b0, 1};
  if ((b0 & 0xE0) == 0xC0) {
    const int c1 = cont(1);
    if (c1 >= 0) return {static_cast<char32_t>(((b0 & 0x1F) << 6) | c1), 2};
  } else if ((b0 & 0xF0) == 0xE0) {
    const int c1 = cont(1), c2 = cont(2);
    if (c1 >= 0 && c2 >= 0)
      return {static_cast<char32_t>(((b0 & 0x0F) << 12) | (c1 << 6) | c2), 3};
  } else if ((b0 & 0xF8) == 0xF0) {
    const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
    if (c1 >= 0 && c2 >= 0 && c3 >= 0)
      return {static_cast<char32_t>(((b0 & 0x07) << 18) | (c1 << 12) |
                                    (c2 << 6) | c3),
              4};
  }
  return {0xFFFD, 1};
}

inline std::size_t codepoint_count(std::string_view s) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); i += decode_utf8(s, i).length) ++n;
  return n;
}

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' ||
         c == U'\v';
}

// Ideographs and kana: scripts written without inter-word spaces.
inline bool is_cjk(char32_t c) {
  return (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0x3400 && c <= 0x4DBF) ||
         (c >= 0x20000 && c <= 0x2A6DF) || (c >= 0xF900 && c <= 0xFAFF) ||
         (c >= 0x3040 && c <= 0x30FF) || (c >= 0xAC00 && c <= 0xD7AF);
}

inline bool is_punct(char32_t c) {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
           (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
  }
  return (c >= 0x2010 && c <= 0x2027) || (c >= 0x3000 && c <= 0x303F) ||
         (c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) ||
         (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65);
}

inline std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

enum class TokenRule { whitespace, cjk_char };

// Splits on ASCII whitespace; under `cjk_char` every CJK character is also a
// token of its own.
inline std::vector<std::string> tokenize(std::string_view s, TokenRule rule) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < s.size();) {
    const auto cp = decode_utf8(s, i);
    if (is_space(cp.value)) {
      flush();
    } else if (rule == TokenRule::cjk_char && is_cjk(cp.value)) {
      flush();
      out.emplace_back(s.substr(i, cp.length));
    } else {
      cur.append(s.substr(i, cp.length));
    }
    i += cp.length;
  }
  flush();
  return out;
}

inline std::size_t count_tokens(std::string_view s, TokenRule rule) {
  return tokenize(s, rule).size();
}

// Tokens used for matching (ROUGE-L, the stub models): CJK-aware split,
// punctuation stripped from both ends, ASCII lowercased, empties dropped.
inline std::vector<std::string> normalized_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& tok : tokenize(s, TokenRule::cjk_char)) {
    std::string_view v = tok;
    while (!v.empty()) {
      const auto cp = decode_utf8(v, 0);
      if (!is_punct(cp.value)) break;
      v.remove_prefix(cp.length);
    }
    while (!v.empty()) {
      // Step back to the start of the last code point.
      std::size_t start = v.size() - 1;
      while (start > 0 && (static_cast<unsigned char>(v[start]) & 0xC0) == 0x80)
        --start;
      if (!is_punct(decode_utf8(v, start).value)) break;
      v.remove_suffix(v.size() - start);
    }
    if (v.empty()) continue;
    std::string t(v);
    for (auto& ch : t)
      if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    out.push_back(std::move(t));
  }
  return out;
}

// Collapses newlines and tabs so a text fits on one prompt line.
inline std::string single_line(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool space = false;
  for (char ch : s) {
    if (is_space(static_cast<unsigned char>(ch))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(ch);
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = kDigits[v & 0xF];
  return out;
}

}  // namespace qchunk::text
