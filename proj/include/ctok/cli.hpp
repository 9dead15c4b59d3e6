#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ctok {

/// Exit statuses of the command-line tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitUsage = 2,
    kExitValidation = 3,
    kExitNumerical = 4,
};

/// Runs the command line `args` (args[0] is the program name). Never throws; every
/// error is reported on `err` and mapped to an exit status.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ctok
