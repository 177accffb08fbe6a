#pragma once

#include <stdexcept>
#include <string>

namespace mdpd {

// Exit-code contract of the command-line tool: 0 success, 2 configuration
// error, 3 I/O error, 4 convergence or numeric-verification failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitConvergence = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConvergenceFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mdpd
