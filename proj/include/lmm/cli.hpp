#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lmm::cli {

enum ExitCode : int { ok = 0, invalid_input = 1, runtime_failure = 2 };

/// Runs one command. `args` excludes the program name. Returns 0 on success,
/// 1 on validation/parse errors (including unknown flags), 2 on runtime
/// failures (I/O, non-finite losses, failed gradient check).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace lmm::cli
