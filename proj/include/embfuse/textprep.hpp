// SPDX-License-Identifier: Apache-2.0
//
// Tweet cleaning pipeline. `preprocess` applies, in order:
//   1. emoji removal
//   2. stray punctuation removal
//   3. URL and HTML tag replacement
//   4. username replacement
//   5. whitespace normalization
//
// Character classes used by the rules:
//   whitespace   Unicode White_Space
//   punctuation  any codepoint in PreprocessConfig::stray_punct_set
//   word         ASCII letters/digits/'_' and every other non-control
//                codepoint >= U+0080 that is neither of the above
//
// A maximal run of punctuation is "stray" when neither the codepoint before
// it nor the one after it is a word character. Invalid UTF-8 bytes are
// carried through unchanged and count as neither word nor punctuation.

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace embfuse {

class KeyValueConfig;

struct CodepointRange {
  char32_t first;
  char32_t last;  // inclusive
};

/// Emoticons, pictographs, transport, supplemental symbols, flags, dingbats,
/// miscellaneous symbols and the joiners/selectors emoji sequences use.
std::span<const CodepointRange> default_emoji_ranges();

/// ASCII punctuation except '_' plus common typographic punctuation.
std::vector<char32_t> default_stray_punct_set();

struct PreprocessConfig {
  std::string url_placeholder = "HTTPURL";
  std::string html_placeholder = "HTMLTAG";
  std::string user_placeholder = "@USER";
  std::vector<CodepointRange> emoji_ranges{default_emoji_ranges().begin(),
                                           default_emoji_ranges().end()};
  std::vector<char32_t> stray_punct_set = default_stray_punct_set();  // sorted, unique

  /// Throws ConfigError if a placeholder is empty or has whitespace, or the
  /// emoji ranges are not sorted and disjoint.
  void validate() const;

  /// Keys: url_placeholder, html_placeholder, user_placeholder,
  /// emoji_ranges (e.g. "1F600-1F64F, 2600-26FF"), stray_punct (literal
  /// characters). Unset keys keep their defaults.
  static PreprocessConfig from_config(const KeyValueConfig& kv);
};

std::string remove_emojis(std::string_view text, const PreprocessConfig& cfg);
std::string strip_stray_punctuation(std::string_view text, const PreprocessConfig& cfg);
std::string replace_urls_and_html(std::string_view text, const PreprocessConfig& cfg);
std::string replace_usernames(std::string_view text, const PreprocessConfig& cfg);
std::string normalize_whitespace(std::string_view text);

std::string preprocess(std::string_view text, const PreprocessConfig& cfg);

namespace utf8 {

/// Decodes UTF-8; each invalid byte b becomes the lone surrogate U+DC00+b so
/// that encode(decode(s)) == s for any byte string.
std::u32string decode(std::string_view bytes);
std::string encode(std::u32string_view codepoints);

}  // namespace utf8

}  // namespace embfuse
