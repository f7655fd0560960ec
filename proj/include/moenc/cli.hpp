#pragma once

#include <string>
#include <vector>

namespace moenc::cli {

// Full command-line entry point: parses argv, dispatches to the trainer,
// evaluator, sweeper, route demo, or the compute analyzer, and persists
// reports under a fresh run directory. Returns the process exit status.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace moenc::cli
