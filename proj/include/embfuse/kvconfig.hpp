// SPDX-License-Identifier: Apache-2.0
//
// Minimal `key = value` configuration files: one assignment per line, `#`
// starts a comment, blank lines are ignored, keys are unique.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace embfuse {

class KeyValueConfig {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static KeyValueConfig parse(std::string_view text, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError naming the first key not in `allowed` (prefix
  /// entries ending in '.' match any key starting with them).
  void reject_unknown(const std::vector<std::string>& allowed) const;

  const std::string& origin() const { return origin_; }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

  std::string origin_;
  std::map<std::string, Entry> entries_;
};

std::string_view trim(std::string_view s);
std::vector<std::string> split_list(std::string_view s, char sep);

}  // namespace embfuse
