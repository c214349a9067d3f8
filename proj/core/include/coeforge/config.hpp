#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace coeforge {

/// Flat `key = value` document. '#' starts a comment; blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

/// Typed lookups that throw ConfigError naming the key on a malformed value.
double kv_double(const KeyValues& kv, const std::string& key, double fallback);
long long kv_int(const KeyValues& kv, const std::string& key, long long fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

/// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace coeforge
