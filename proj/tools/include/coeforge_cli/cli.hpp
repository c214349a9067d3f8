#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace coeforge::cli {

/// Full command-line entry point. Returns the process exit code; errors are reported
/// on `err` as one line "coeforge: error: <category>: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace coeforge::cli
