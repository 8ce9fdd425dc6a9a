#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdiv::sim {

/// One CSV row per (step, agent).
struct TrajectoryRow {
  std::int64_t episode_id = 0;
  double t = 0.0;
  int agent_id = 0;
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double v = 0.0;
  double w = 0.0;
  double reward = 0.0;
  int token = 0;
  std::string event;  ///< "", "goal", "collision" or "timeout"
};

inline constexpr const char* kTrajectoryHeader =
    "episode_id,t,agent_id,x,y,heading,v,w,reward,token,event";

class TrajectoryLogWriter {
 public:
  explicit TrajectoryLogWriter(std::ostream& out);
  void write(const TrajectoryRow& row);

 private:
  std::ostream& out_;
};

class LogParseError : public std::runtime_error {
 public:
  LogParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Parses a log written by TrajectoryLogWriter. An empty stream yields no
/// rows; a malformed row throws LogParseError carrying its 1-based line.
std::vector<TrajectoryRow> read_trajectory_log(std::istream& in);

}  // namespace crowdiv::sim
