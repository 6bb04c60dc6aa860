#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace miniprune::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Parses `args` (without the program name) and runs one subcommand.
/// Returns the process exit code; never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace miniprune::cli
