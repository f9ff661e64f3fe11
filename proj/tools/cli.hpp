#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace bdlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1; // scenario assertion or pipeline failure
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace bdlab::cli
