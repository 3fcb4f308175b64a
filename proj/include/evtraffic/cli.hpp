#pragma once

// Command-line front end: simulate, train, evaluate, distill, stream.

#include <iosfwd>
#include <string>
#include <vector>

namespace evtraffic::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// Runs one command. `args` excludes the program name. Progress goes to
/// `out`, diagnostics to `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evtraffic::cli
