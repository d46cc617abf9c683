#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace faceshifter {

// Entry point behind the `faceshifter` executable. `args` excludes the program name.
// Returns the process exit code: 0 on success, otherwise the ErrorKind code, after printing a
// single line `error: code=<n> kind=<kind> message=<json string>` to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace faceshifter
