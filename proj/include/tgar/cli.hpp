#pragma once

#include <atomic>
#include <iosfwd>

namespace tgar {

/// Process exit codes of the `tgar` tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitInterrupted = 130;

/// Runs one `tgar` subcommand (partition, train, eval, gradcheck, oracle).
/// `stop` is polled between training steps; when it flips, training writes
/// last.ckpt and the call returns kExitInterrupted.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* stop = nullptr);

}  // namespace tgar
