#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace s3t {

// Full command-line driver. Returns the process exit code: 0 success,
// 2 configuration/usage error, 3 data error, 4 numeric abort.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace s3t
