#pragma once

#include <string>
#include <vector>

namespace nerveseg {

/// Dispatches the nerveseg subcommands. `args` excludes the program name.
/// Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace nerveseg
