#pragma once

namespace rvit {

// Runs the command-line interface. Exit codes: 0 ok, 2 configuration error,
// 3 numeric divergence, 4 I/O error.
int run_cli(int argc, const char* const* argv);

}  // namespace rvit
