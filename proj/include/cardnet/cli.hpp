#pragma once

#include <iosfwd>

namespace cardnet {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  exit_ok = 0,
  exit_usage = 1,      // bad arguments, config or input
  exit_numerical = 2,  // non-finite loss during training
  exit_check_failed = 3,  // gradcheck error above threshold
};

/// Entry point of the `cardnet` tool; subcommands train, eval, project and
/// gradcheck. Streams are injected so tests can drive it in-process.
int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out,
            std::ostream& err);

}  // namespace cardnet
