#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

/// Key-value configuration files:
///
///     # comment
///     gamma = 0.99
///     M = 5
///
/// Keys are case-sensitive and mirror the config struct field names. Values
/// run to the end of the line (trailing comments allowed after '#').
namespace crowdiv::config {

using KeyValues = std::map<std::string, std::string>;

/// Carries the offending field (or "line N" for syntax errors).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

KeyValues parse_key_values(std::istream& in);
/// Throws std::filesystem::filesystem_error-like ConfigError("path", ...) if unreadable.
KeyValues load_key_values(const std::filesystem::path& path);
/// Applies one "key=value" override.
void apply_override(KeyValues& kv, std::string_view assignment);
/// Canonical text form, one "key = value" per line in key order.
std::string to_text(const KeyValues& kv);

std::string format_value(double v);
std::string format_value(std::int64_t v);
std::string format_value(bool v);
inline std::string format_value(int v) { return format_value(static_cast<std::int64_t>(v)); }
inline std::string format_value(const std::string& v) { return v; }

void parse_value(const std::string& key, const std::string& text, double& out);
void parse_value(const std::string& key, const std::string& text, std::int64_t& out);
void parse_value(const std::string& key, const std::string& text, int& out);
void parse_value(const std::string& key, const std::string& text, bool& out);
void parse_value(const std::string& key, const std::string& text, std::string& out);

/// Reads every field a struct exposes through visit(f) from `kv`; keys not
/// claimed by any field raise ConfigError.
template <typename T>
void read_fields(T& target, const KeyValues& kv) {
  std::map<std::string, bool> seen;
  for (const auto& [k, v] : kv) seen[k] = false;
  target.visit([&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    parse_value(key, it->second, field);
    seen[key] = true;
  });
  for (const auto& [k, used] : seen) {
    if (!used) throw ConfigError(k, "unknown key");
  }
}

template <typename T>
KeyValues write_fields(const T& source) {
  KeyValues kv;
  source.visit([&](const char* key, const auto& field) { kv[key] = format_value(field); });
  return kv;
}

}  // namespace crowdiv::config
