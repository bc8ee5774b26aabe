#pragma once

#include <atomic>
#include <iosfwd>

namespace soft {

enum ExitCode : int {
    kExitCompleted = 0,
    kExitOther = 1,
    kExitConfig = 2,
    kExitEarlyStop = 3,
    kExitBackend = 4,
    kExitInterrupted = 130,
};

/// Entry point for the `soft` command (run, score, report, probe). Results go
/// to `out`, progress and errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* interrupt = nullptr);

}  // namespace soft
