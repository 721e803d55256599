#pragma once

#include <string>
#include <vector>

namespace lj::cli {

// Full command-line entry point. Returns the process exit code:
// 0 success, 1 usage error, 2 config error, 3 runtime failure.
int run(std::vector<std::string> args);

}  // namespace lj::cli
