#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace seqmask::cli {

/// Entry point shared by the `seqmask` binary, the tests and the Python module.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Identifier of the build (git revision when available), recorded next to
/// every run's outputs.
const char* build_id();

}  // namespace seqmask::cli
