#pragma once

// The chartrans command-line tool. run_cli is the whole program minus the
// process boundary so that tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace chartrans {

// args excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chartrans
