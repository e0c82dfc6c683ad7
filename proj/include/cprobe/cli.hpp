#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cprobe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitModuleError = 1;
inline constexpr int kExitUsage = 2;

// Runs one command line. `args` excludes the program name. Module errors are
// reported on `err` as a one-line JSON object {"error": {"kind", "message"}}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Expands a JSON config object into flags for `subcommand`. Scalar members
// become "--key value", true becomes "--key", arrays are comma-joined, and a
// member named after the subcommand is expanded the same way.
std::vector<std::string> config_to_flags(const std::string& json_text, const std::string& subcommand);

}  // namespace cprobe::cli
