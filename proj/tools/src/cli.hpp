#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace crowdiv::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kMissingArtifact = 3,
  kRuntimeFailure = 4,
};

/// Relative --out directories are resolved under this root when set.
inline constexpr const char* kOutputRootEnv = "CROWDIV_OUTPUT_ROOT";

struct Environment {
  std::optional<std::filesystem::path> output_root;

  static Environment from_process();
};

/// Entry point shared by the executable and the tests. args[0] is the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace crowdiv::cli
