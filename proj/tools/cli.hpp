#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dvne::cli {

// Runs one command line (args[0] is the program name). Returns 0 on success,
// 2 for usage or config errors, 1 for any other failure. Failures print one
// line "error: <category>: <message>" to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dvne::cli
