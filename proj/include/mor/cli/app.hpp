#pragma once

#include <ostream>

namespace mor::cli {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes: 0 success, 1 runtime failure (message names the component),
// 2 command-line or config schema error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mor::cli
