#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ilrec {

// Front door used by both the binary and the tests. Commands: prepare,
// train, eval, gradcheck. Returns the process exit code: 0 success,
// 1 numerical/assertion failure, 2 usage or config error.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace ilrec
