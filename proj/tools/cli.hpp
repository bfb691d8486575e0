#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dreamscene::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kIo = 3,
    kParse = 4,
    kValidation = 5,
    kStarvation = 6,
    kNumeric = 7,
    kDegenerate = 8,
    kNotFound = 9,
};

/// Runs one command line (args exclude the program name). Failures print a
/// single "error: <category>: <message>" line to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace dreamscene::cli
