#pragma once

#include <iosfwd>
#include <vector>
#include <string>

namespace trojanscope {

// Runs the command line; returns the process exit code (0 ok, 1 failure,
// 2 configuration error).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trojanscope
