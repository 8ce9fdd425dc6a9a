#include "crowdiv/trajectory_log.hpp"

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string_view>

namespace crowdiv::sim {

namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
T parse_number(std::string_view s, std::size_t line, const char* field) {
  T value{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw LogParseError(line, std::string("bad ") + field + " '" + std::string(s) + "'");
  }
  return value;
}

}  // namespace

TrajectoryLogWriter::TrajectoryLogWriter(std::ostream& out) : out_(out) {
  out_ << kTrajectoryHeader << '\n';
}

void TrajectoryLogWriter::write(const TrajectoryRow& r) {
  char buf[384];
  std::snprintf(buf, sizeof buf, "%lld,%.6f,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d,",
                static_cast<long long>(r.episode_id), r.t, r.agent_id, r.x, r.y, r.heading, r.v,
                r.w, r.reward, r.token);
  out_ << buf << r.event << '\n';
}

LogParseError::LogParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

std::vector<TrajectoryRow> read_trajectory_log(std::istream& in) {
  std::vector<TrajectoryRow> rows;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kTrajectoryHeader) throw LogParseError(lineno, "missing or unexpected header");
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 11) {
      throw LogParseError(lineno, "expected 11 fields, got " + std::to_string(f.size()));
    }
    TrajectoryRow r;
    r.episode_id = parse_number<std::int64_t>(f[0], lineno, "episode_id");
    r.t = parse_number<double>(f[1], lineno, "t");
    r.agent_id = parse_number<int>(f[2], lineno, "agent_id");
    r.x = parse_number<double>(f[3], lineno, "x");
    r.y = parse_number<double>(f[4], lineno, "y");
    r.heading = parse_number<double>(f[5], lineno, "heading");
    r.v = parse_number<double>(f[6], lineno, "v");
    r.w = parse_number<double>(f[7], lineno, "w");
    r.reward = parse_number<double>(f[8], lineno, "reward");
    r.token = parse_number<int>(f[9], lineno, "token");
    r.event = std::string(f[10]);
    if (!r.event.empty() && r.event != "goal" && r.event != "collision" && r.event != "timeout") {
      throw LogParseError(lineno, "unknown event '" + r.event + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace crowdiv::sim
