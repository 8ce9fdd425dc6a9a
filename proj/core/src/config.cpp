#include "crowdiv/config.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

namespace crowdiv::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    if (kv.count(key)) throw ConfigError(key, "duplicate key (line " + std::to_string(lineno) + ")");
    kv.emplace(std::move(key), std::move(value));
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  return parse_key_values(in);
}

void apply_override(KeyValues& kv, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError(std::string(assignment), "override must be key=value");
  }
  std::string key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError(std::string(assignment), "override has empty key");
  kv[key] = trim(assignment.substr(eq + 1));
}

std::string to_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_value(std::int64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }

void parse_value(const std::string& key, const std::string& text, double& out) {
  const char* end = text.data() + text.size();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || !std::isfinite(v)) {
    throw ConfigError(key, "expected a finite number, got '" + text + "'");
  }
  out = v;
}

void parse_value(const std::string& key, const std::string& text, std::int64_t& out) {
  const char* end = text.data() + text.size();
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key, "expected an integer, got '" + text + "'");
  out = v;
}

void parse_value(const std::string& key, const std::string& text, int& out) {
  std::int64_t v = 0;
  parse_value(key, text, v);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(key, "integer out of range");
  out = static_cast<int>(v);
}

void parse_value(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") {
    out = true;
  } else if (text == "false" || text == "0") {
    out = false;
  } else {
    throw ConfigError(key, "expected true/false, got '" + text + "'");
  }
}

void parse_value(const std::string&, const std::string& text, std::string& out) { out = text; }

}  // namespace crowdiv::config
