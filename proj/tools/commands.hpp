#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gvsl::cli {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kNumerical = 4,
  kCompatibility = 5,
};

/// Parses `args` (without the program name) and runs one subcommand.
/// Reports go to `out`, diagnostics to `err`. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gvsl::cli
