#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace knnqe {

// Runs one `knnqe` invocation. `args` excludes the program name. Returns the
// process exit code: 0 ok, 1 usage, 2 validation, 3 runtime or data error.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

}  // namespace knnqe
