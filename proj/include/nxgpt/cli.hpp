#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nxgpt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Runs one subcommand; args excludes the program name. Usage problems
// return 1 before anything is written, runtime failures return 2.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nxgpt
