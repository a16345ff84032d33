#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace oodx::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command line (args[0] is the program name). Returns the process exit code:
/// 0 on success, 1 on internal errors, 2 on usage or input errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace oodx::cli
