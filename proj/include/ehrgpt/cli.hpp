#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ehrgpt {

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Flat key=value file: '#' comments, blank lines ignored, keys normalized to
/// underscores. Throws ParseError with the offending line.
std::map<std::string, std::string> parse_config(const std::string& text);

/// Runs one subcommand; `args` excludes the program name. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ehrgpt
