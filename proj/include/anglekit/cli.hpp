#pragma once

namespace anglekit::cli {

// Parses argv and executes one subcommand. Returns the process exit code:
// 0 success, 1 validation/usage error, 2 runtime failure.
int run(int argc, const char* const* argv);

}  // namespace anglekit::cli
