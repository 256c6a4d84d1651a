#pragma once

#include <iosfwd>

namespace grc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

/// Entry point of the `grc` tool. Subcommands: train, eval, gradcheck,
/// inspect, sweep, plot. Errors are reported on `err` and mapped to exit
/// codes: 2 configuration, 3 numeric failure, 4 I/O.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace grc::cli
