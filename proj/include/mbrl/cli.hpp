#pragma once

#include <ostream>

namespace mbrl {

/// Entry point of the `mbrl` tool. Returns 0 on success, 1 on validation or
/// usage errors, 2 on runtime failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mbrl
