#pragma once

// Small text helpers shared by the manifest and config formats.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "freefuse/error.hpp"

namespace freefuse::text {

/// Shortest round-trip decimal; integral values keep a trailing ".0".
inline std::string format_number(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  std::string s(buf, ptr);
  if (std::isfinite(value) && s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, const std::string& what) {
  s = trim(s);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  require(ec == std::errc{} && ptr == s.data() + s.size() && !s.empty() && std::isfinite(value),
          ErrorCode::parse, what + ": expected a number, got '" + std::string(s) + "'");
  return value;
}

inline std::size_t parse_size(std::string_view s, const std::string& what) {
  s = trim(s);
  std::size_t value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  require(ec == std::errc{} && ptr == s.data() + s.size() && !s.empty(), ErrorCode::parse,
          what + ": expected a non-negative integer, got '" + std::string(s) + "'");
  return value;
}

inline bool parse_bool(std::string_view s, const std::string& what) {
  s = trim(s);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  fail(ErrorCode::parse, what + ": expected true/false, got '" + std::string(s) + "'");
}

/// `key = value` lines with `#` comments. Keys keep their first-seen order;
/// duplicates are rejected.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view body,
                                                                          const std::string& source) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(body)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    const std::string where = source + ":" + std::to_string(line_no);
    require(eq != std::string_view::npos, ErrorCode::parse, where + ": expected 'key = value'");
    std::string key(trim(view.substr(0, eq)));
    require(!key.empty(), ErrorCode::parse, where + ": empty key");
    require(seen.emplace(key, line_no).second, ErrorCode::parse,
            where + ": duplicate key '" + key + "'");
    entries.emplace_back(std::move(key), std::string(trim(view.substr(eq + 1))));
  }
  return entries;
}

}  // namespace freefuse::text
