// SPDX-License-Identifier: Apache-2.0

#include "embfuse/textprep.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cctype>

#include "embfuse/errors.hpp"
#include "embfuse/kvconfig.hpp"

namespace embfuse {

namespace {

constexpr int kMaxPasses = 16;

constexpr std::array<CodepointRange, 14> kEmojiRanges{{
    {0x200D, 0x200D},    // zero width joiner
    {0x20E3, 0x20E3},    // combining enclosing keycap
    {0x2600, 0x26FF},    // miscellaneous symbols
    {0x2700, 0x27BF},    // dingbats
    {0x2B50, 0x2B55},    // stars and circles used as emoji
    {0xFE00, 0xFE0F},    // variation selectors
    {0x1F1E6, 0x1F1FF},  // regional indicators (flags)
    {0x1F300, 0x1F5FF},  // miscellaneous symbols and pictographs
    {0x1F600, 0x1F64F},  // emoticons
    {0x1F680, 0x1F6FF},  // transport and map symbols
    {0x1F780, 0x1F7FF},  // geometric shapes extended
    {0x1F900, 0x1F9FF},  // supplemental symbols and pictographs
    {0x1FA70, 0x1FAFF},  // symbols and pictographs extended-A
    {0xE0020, 0xE007F},  // tag sequences (subdivision flags)
}};

constexpr char32_t kEscapeBase = 0xDC00;

bool is_escaped_byte(char32_t c) { return c >= kEscapeBase && c <= kEscapeBase + 0xFF; }

bool is_whitespace(char32_t c) {
  switch (c) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

bool is_ascii_word(char32_t c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

class Classifier {
 public:
  explicit Classifier(const PreprocessConfig& cfg) : punct_(cfg.stray_punct_set) {}

  bool punct(char32_t c) const { return std::binary_search(punct_.begin(), punct_.end(), c); }

  bool word(char32_t c) const {
    if (c < 0x80) return is_ascii_word(c);
    if (c < 0xA0 || is_escaped_byte(c) || is_whitespace(c)) return false;
    return !punct(c);
  }

 private:
  const std::vector<char32_t>& punct_;
};

bool in_ranges(char32_t c, std::span<const CodepointRange> ranges) {
  auto it = std::upper_bound(ranges.begin(), ranges.end(), c,
                             [](char32_t v, const CodepointRange& r) { return v < r.first; });
  if (it == ranges.begin()) return false;
  --it;
  return c <= it->last;
}

bool starts_with_icase(std::u32string_view text, std::size_t pos, std::string_view prefix) {
  if (text.size() - pos < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    char32_t c = text[pos + i];
    if (c >= 'A' && c <= 'Z') c += 'a' - 'A';
    if (c != static_cast<char32_t>(prefix[i])) return false;
  }
  return true;
}

bool is_ascii_alpha(char32_t c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

// Length of an HTML-like tag starting at text[pos] == '<', or 0.
std::size_t html_tag_length(std::u32string_view text, std::size_t pos) {
  std::size_t i = pos + 1;
  if (i < text.size() && (text[i] == '/' || text[i] == '!')) ++i;
  if (i >= text.size() || !is_ascii_alpha(text[i])) return 0;
  for (; i < text.size(); ++i) {
    if (text[i] == '>') return i - pos + 1;
    if (text[i] == '<') return 0;
  }
  return 0;
}

std::u32string_view as_view(const std::u32string& s) { return s; }

std::u32string remove_emojis_cp(std::u32string_view text, const PreprocessConfig& cfg) {
  std::u32string out;
  out.reserve(text.size());
  for (char32_t c : text) {
    if (!in_ranges(c, cfg.emoji_ranges)) out.push_back(c);
  }
  return out;
}

std::u32string strip_stray_cp(std::u32string_view text, const PreprocessConfig& cfg) {
  const Classifier cls(cfg);
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (!cls.punct(text[i])) {
      out.push_back(text[i++]);
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && cls.punct(text[end])) ++end;
    const bool left = i > 0 && cls.word(text[i - 1]);
    const bool right = end < text.size() && cls.word(text[end]);
    if (left || right) out.append(text.substr(i, end - i));
    i = end;
  }
  return out;
}

std::u32string replace_urls_html_cp(std::u32string_view text, const PreprocessConfig& cfg) {
  const Classifier cls(cfg);
  const std::u32string url = utf8::decode(cfg.url_placeholder);
  const std::u32string html = utf8::decode(cfg.html_placeholder);

  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const bool boundary = i == 0 || !cls.word(text[i - 1]);
    if (boundary && (starts_with_icase(text, i, "http://") ||
                     starts_with_icase(text, i, "https://") ||
                     starts_with_icase(text, i, "www."))) {
      while (i < text.size() && !is_whitespace(text[i])) ++i;
      out += url;
      continue;
    }
    if (text[i] == '<') {
      if (const std::size_t len = html_tag_length(text, i); len > 0) {
        out += html;
        i += len;
        continue;
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

std::u32string replace_usernames_cp(std::u32string_view text, const PreprocessConfig& cfg) {
  const Classifier cls(cfg);
  const std::u32string user = utf8::decode(cfg.user_placeholder);
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '@' && (i == 0 || (!cls.word(text[i - 1]) && text[i - 1] != '@'))) {
      std::size_t end = i + 1;
      while (end < text.size() && is_ascii_word(text[end])) ++end;
      const std::size_t len = end - i - 1;
      if (len >= 1 && len <= 15) {
        out += user;
        i = end;
        continue;
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

std::u32string normalize_whitespace_cp(std::u32string_view text) {
  std::u32string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char32_t c : text) {
    if (is_whitespace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(U' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

void require_placeholder(const std::string& name, const std::string& value) {
  if (value.empty()) throw ConfigError(name + " must not be empty");
  for (char32_t c : utf8::decode(value)) {
    if (is_whitespace(c)) throw ConfigError(name + " must not contain whitespace");
    if (c == U'<' || c == U'>') throw ConfigError(name + " must not contain '<' or '>'");
  }
  std::string lower;
  for (char c : value) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower.find("://") != std::string::npos || lower.find("www.") != std::string::npos) {
    throw ConfigError(name + " must not look like a URL");
  }
}

char32_t parse_hex_codepoint(std::string_view s) {
  if (s.size() > 2 && (s.substr(0, 2) == "U+" || s.substr(0, 2) == "u+")) s.remove_prefix(2);
  std::uint32_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc{} || p != s.data() + s.size() || v > 0x10FFFF) {
    throw ConfigError("bad codepoint '" + std::string(s) + "'");
  }
  return static_cast<char32_t>(v);
}

}  // namespace

std::span<const CodepointRange> default_emoji_ranges() { return kEmojiRanges; }

std::vector<char32_t> default_stray_punct_set() {
  std::vector<char32_t> set;
  for (char32_t c = 0x21; c < 0x7F; ++c) {
    if (!is_ascii_word(c)) set.push_back(c);
  }
  for (char32_t c : {U'¡', U'«', U'·', U'»', U'¿', U'–', U'—',
                     U'‘', U'’', U'‚', U'“', U'”', U'„', U'•',
                     U'…', U'′', U'″', U'‹', U'›'}) {
    set.push_back(c);
  }
  std::sort(set.begin(), set.end());
  return set;
}

void PreprocessConfig::validate() const {
  require_placeholder("url_placeholder", url_placeholder);
  require_placeholder("html_placeholder", html_placeholder);
  require_placeholder("user_placeholder", user_placeholder);
  for (std::size_t i = 0; i < emoji_ranges.size(); ++i) {
    if (emoji_ranges[i].first > emoji_ranges[i].last) {
      throw ConfigError("emoji range " + std::to_string(i) + " is reversed");
    }
    if (i > 0 && emoji_ranges[i].first <= emoji_ranges[i - 1].last) {
      throw ConfigError("emoji ranges must be sorted and disjoint (range " + std::to_string(i) +
                        ")");
    }
  }
  if (!std::is_sorted(stray_punct_set.begin(), stray_punct_set.end()) ||
      std::adjacent_find(stray_punct_set.begin(), stray_punct_set.end()) !=
          stray_punct_set.end()) {
    throw ConfigError("stray punctuation set must be sorted and unique");
  }
  for (const auto* p : {&url_placeholder, &html_placeholder, &user_placeholder}) {
    for (char32_t c : utf8::decode(*p)) {
      if (in_ranges(c, emoji_ranges)) throw ConfigError("placeholder contains an emoji");
    }
  }
}

PreprocessConfig PreprocessConfig::from_config(const KeyValueConfig& kv) {
  PreprocessConfig cfg;
  cfg.url_placeholder = kv.get("url_placeholder", cfg.url_placeholder);
  cfg.html_placeholder = kv.get("html_placeholder", cfg.html_placeholder);
  cfg.user_placeholder = kv.get("user_placeholder", cfg.user_placeholder);
  if (kv.contains("emoji_ranges")) {
    cfg.emoji_ranges.clear();
    for (const auto& item : split_list(kv.get("emoji_ranges", ""), ',')) {
      const auto dash = item.find('-');
      if (dash == std::string::npos) {
        const char32_t c = parse_hex_codepoint(item);
        cfg.emoji_ranges.push_back({c, c});
      } else {
        cfg.emoji_ranges.push_back({parse_hex_codepoint(trim(std::string_view(item).substr(0, dash))),
                                    parse_hex_codepoint(trim(std::string_view(item).substr(dash + 1)))});
      }
    }
  }
  if (kv.contains("stray_punct")) {
    auto cps = utf8::decode(kv.get("stray_punct", ""));
    cfg.stray_punct_set.assign(cps.begin(), cps.end());
    std::sort(cfg.stray_punct_set.begin(), cfg.stray_punct_set.end());
    cfg.stray_punct_set.erase(
        std::unique(cfg.stray_punct_set.begin(), cfg.stray_punct_set.end()),
        cfg.stray_punct_set.end());
  }
  cfg.validate();
  return cfg;
}

std::string remove_emojis(std::string_view text, const PreprocessConfig& cfg) {
  return utf8::encode(remove_emojis_cp(utf8::decode(text), cfg));
}

std::string strip_stray_punctuation(std::string_view text, const PreprocessConfig& cfg) {
  return utf8::encode(strip_stray_cp(utf8::decode(text), cfg));
}

std::string replace_urls_and_html(std::string_view text, const PreprocessConfig& cfg) {
  return utf8::encode(replace_urls_html_cp(utf8::decode(text), cfg));
}

std::string replace_usernames(std::string_view text, const PreprocessConfig& cfg) {
  return utf8::encode(replace_usernames_cp(utf8::decode(text), cfg));
}

std::string normalize_whitespace(std::string_view text) {
  return utf8::encode(normalize_whitespace_cp(utf8::decode(text)));
}

std::string preprocess(std::string_view text, const PreprocessConfig& cfg) {
  // A replacement can expose a new match ("<" followed by "HTTPURL x>" reads
  // as a tag), so the five steps repeat until the text is a fixpoint.
  std::u32string s = utf8::decode(text);
  for (int pass = 0; pass < kMaxPasses; ++pass) {
    std::u32string next = remove_emojis_cp(s, cfg);
    next = strip_stray_cp(next, cfg);
    next = replace_urls_html_cp(next, cfg);
    next = replace_usernames_cp(next, cfg);
    next = normalize_whitespace_cp(as_view(next));
    if (next == s) break;
    s = std::move(next);
  }
  return utf8::encode(s);
}

namespace utf8 {

std::u32string decode(std::string_view bytes) {
  std::u32string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(bytes[k]); };
  const auto cont = [&](std::size_t k) { return k < bytes.size() && (byte(k) & 0xC0) == 0x80; };
  while (i < bytes.size()) {
    const unsigned char b0 = byte(i);
    char32_t cp = 0;
    std::size_t len = 0;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if (b0 >= 0xC2 && b0 <= 0xDF && cont(i + 1)) {
      cp = (char32_t(b0 & 0x1F) << 6) | (byte(i + 1) & 0x3F);
      len = 2;
    } else if (b0 >= 0xE0 && b0 <= 0xEF && cont(i + 1) && cont(i + 2)) {
      cp = (char32_t(b0 & 0x0F) << 12) | (char32_t(byte(i + 1) & 0x3F) << 6) |
           (byte(i + 2) & 0x3F);
      if (cp >= 0x800 && !(cp >= 0xD800 && cp <= 0xDFFF)) len = 3;
    } else if (b0 >= 0xF0 && b0 <= 0xF4 && cont(i + 1) && cont(i + 2) && cont(i + 3)) {
      cp = (char32_t(b0 & 0x07) << 18) | (char32_t(byte(i + 1) & 0x3F) << 12) |
           (char32_t(byte(i + 2) & 0x3F) << 6) | (byte(i + 3) & 0x3F);
      if (cp >= 0x10000 && cp <= 0x10FFFF) len = 4;
    }
    if (len == 0) {
      out.push_back(kEscapeBase + b0);
      ++i;
    } else {
      out.push_back(cp);
      i += len;
    }
  }
  return out;
}

std::string encode(std::u32string_view codepoints) {
  std::string out;
  out.reserve(codepoints.size());
  for (char32_t c : codepoints) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if (is_escaped_byte(c) && c >= kEscapeBase + 0x80) {
      out.push_back(static_cast<char>(c - kEscapeBase));
    } else if (c < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (c >> 12)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (c >> 18)));
      out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

}  // namespace utf8

}  // namespace embfuse
